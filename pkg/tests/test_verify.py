from navis import verify


def test_all_checks_pass():
    results = verify.run_all()
    assert len(results) == len(verify.CHECKS)
    for name, ok, detail in results:
        assert ok, f"{name}: {detail}"


def test_crashing_check_reported_not_raised():
    def boom():
        raise RuntimeError("nope")

    (name, ok, detail), = verify.run_all((boom,))
    assert name == "boom" and not ok and "nope" in detail


def test_tight_tolerance_fails():
    assert not verify.check_heuristic_equivalence(d=4, steps=50, tol=-1.0)[1]
