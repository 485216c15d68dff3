"""``navis`` command-line interface.

Every subcommand that takes ``--out`` writes into that directory:

* ``run.json``: reproducibility record (resolved config, overrides, seed,
  build id, dataset hash);
* ``metrics.jsonl``: one JSON record per line, deterministic for a given
  invocation and input;
* ``timing.jsonl``: wall-clock measurements, kept apart from the metrics;
* ``summary.txt`` / ``summary.json``: aligned table and its records.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .ctdg import DataError, dataset_from_events, load_dataset, load_events, save_dataset
from .synth import BENCHMARK_TRAIN, SynthConfig, generate_synthetic, run_toy_benchmark
from .train import (BASELINES, PORTIONS, TrainConfig, apply_overrides, evaluate,
                    evaluate_baseline, load_checkpoint, load_config, run_ablation, save_checkpoint,
                    train)

logger = logging.getLogger("navis")

EXIT_OK = 0
EXIT_FAILED = 1  # a check or run completed but did not succeed
EXIT_USAGE = 2  # unknown flag or malformed arguments (argparse's own code)
EXIT_MISSING = 3  # config, dataset or checkpoint file not found
EXIT_UNWRITABLE = 4  # output directory cannot be created or written
EXIT_INVALID = 5  # input found but rejected (bad data, bad config value)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def build_id() -> str:
    """Content hash of the package sources, in the style of a git object id."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


# ---------------------------------------------------------------------------
# Output handling
# ---------------------------------------------------------------------------


class RunDir:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        try:
            self.path.mkdir(parents=True, exist_ok=True)
            probe = self.path / ".write-test"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise CliError(EXIT_UNWRITABLE, f"output directory {path} is not writable: {exc}") from None
        self._metrics = []
        self._timing = []

    def metric(self, record: dict) -> None:
        self._metrics.append(record)

    def timing(self, record: dict) -> None:
        self._timing.append(record)

    def write_json(self, name: str, data) -> None:
        self._write(name, json.dumps(data, indent=2, sort_keys=True) + "\n")

    def _write(self, name: str, text: str) -> None:
        try:
            (self.path / name).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise CliError(EXIT_UNWRITABLE, f"cannot write {self.path / name}: {exc}") from None

    def close(self, summary_rows: list[dict] | None = None) -> None:
        self._write("metrics.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in self._metrics))
        self._write("timing.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in self._timing))
        if summary_rows is not None:
            self.write_json("summary.json", summary_rows)
            self._write("summary.txt", format_table(summary_rows))


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]

    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return "" if v is None else str(v)

    body = [[cell(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)).rstrip() for b in body]
    return "\n".join(lines) + "\n"


def run_record(command: str, args, config=None, overrides=(), dataset=None, extra=None) -> dict:
    rec = {
        "command": command,
        "version": __version__,
        "build": build_id(),
        "overrides": list(overrides),
        "config": dataclasses.asdict(config) if config is not None else None,
        "seed": getattr(config, "seed", None),
        "dataset": None if dataset is None else {"name": dataset.name, "hash": dataset.digest(),
                                                 "events": len(dataset.events),
                                                 "queries": len(dataset.labels)},
    }
    rec.update(extra or {})
    return json.loads(json.dumps(rec, default=list))


# ---------------------------------------------------------------------------
# Input helpers
# ---------------------------------------------------------------------------


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_MISSING, f"{what} not found: {path}")
    return p


def _config(args, base):
    path = _existing(getattr(args, "config", None), "config file")
    try:
        return load_config(path, args.set or (), base=base)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_INVALID, f"config {path} is not valid JSON: {exc}") from None
    except (KeyError, ValueError, TypeError) as exc:
        raise CliError(EXIT_INVALID, f"bad config: {exc}") from None


def _dataset(args):
    path = _existing(args.data, "dataset manifest")
    try:
        return load_dataset(path)
    except (DataError, KeyError, ValueError) as exc:
        raise CliError(EXIT_INVALID, f"cannot load dataset {path}: {exc}") from None


def _train_config(args) -> TrainConfig:
    return _config(args, TrainConfig())


def _epoch_logger(out: RunDir):
    def log(rec, wall):
        out.metric(rec)
        if rec["split"] == "val":
            out.timing({"epoch": rec["epoch"], "wall_seconds": wall})
        logger.info("epoch %d %s loss %.4f ndcg@10 %.4f", rec["epoch"], rec["split"], rec["loss"],
                    rec["ndcg@10"])
    return log


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate_synthetic(args) -> int:
    config = _config(args, SynthConfig())
    out = RunDir(args.out)
    t0 = time.perf_counter()
    ds = generate_synthetic(config)
    save_dataset(ds, out.path)
    out.write_json("run.json", run_record("generate-synthetic", args, config, args.set or (), ds))
    out.metric({"events": len(ds.events), "queries": len(ds.labels), "num_nodes": ds.num_nodes})
    out.timing({"stage": "generate", "wall_seconds": time.perf_counter() - t0})
    rows = None
    if args.benchmark:
        try:
            tc = apply_overrides(TrainConfig(**BENCHMARK_TRAIN), args.train_set or [])
        except (KeyError, ValueError, TypeError) as exc:
            raise CliError(EXIT_INVALID, f"bad training override: {exc}") from None
        t1 = time.perf_counter()
        result = run_toy_benchmark(config, tc, seeds=args.seeds)
        out.timing({"stage": "benchmark", "wall_seconds": time.perf_counter() - t1})
        for rec in result["plot"]:
            out.metric(rec)
        out._write("plot.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in result["plot"]))
        rows = result["table"]
        print(format_table(rows), end="")
    out.close(rows)
    print(f"wrote {len(ds.events)} events and {len(ds.labels)} queries to {out.path}")
    return EXIT_OK


def cmd_convert_links(args) -> int:
    path = _existing(args.events, "event file")
    try:
        events = load_events(path)
        ds = dataset_from_events(events, args.period, args.candidates, args.name or path.stem, args.origin)
    except DataError as exc:
        raise CliError(EXIT_INVALID, str(exc)) from None
    out = RunDir(args.out)
    save_dataset(ds, out.path)
    out.write_json("run.json", run_record("convert-links", args, None, (), ds,
                                          {"period": args.period, "candidates": args.candidates}))
    out.metric({"events": len(ds.events), "queries": len(ds.labels), "candidates": ds.index.d,
                "skipped_events": int(ds.labels.skipped_events)})
    out.close()
    print(f"{len(ds.labels)} labelled queries over {ds.index.d} candidates written to {out.path}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _train_config(args)
    ds = _dataset(args)
    out = RunDir(args.out)
    out.write_json("run.json", run_record("train", args, config, args.set or (), ds))
    result = train(config, ds, log=_epoch_logger(out))
    rows = []
    for portion in ("val", "test"):
        r = evaluate(result.model, ds, portion, config)
        rows.append({"portion": portion, "ndcg@10": r.ndcg, "l1": r.l1, "loss": r.loss, "queries": r.count})
        out.metric({"split": portion, "best_epoch": result.best_epoch, **r.to_dict()})
    save_checkpoint(out.path / "checkpoint.npz", result.model, result.adam, config,
                    {"best_epoch": result.best_epoch, "dataset": ds.digest()})
    out.close(rows)
    print(format_table(rows), end="")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = _existing(args.checkpoint, "checkpoint")
    try:
        model, _, saved, _ = load_checkpoint(ckpt)
    except (ValueError, KeyError, OSError) as exc:
        raise CliError(EXIT_INVALID, f"cannot read checkpoint {ckpt}: {exc}") from None
    config = _config(args, saved or TrainConfig())
    ds = _dataset(args)
    out = RunDir(args.out)
    out.write_json("run.json", run_record("evaluate", args, config, args.set or (), ds,
                                          {"checkpoint": str(ckpt)}))
    rows = []
    for portion in args.portion:
        r = evaluate(model, ds, portion, config)
        out.metric({"split": portion, **r.to_dict()})
        rows.append({"portion": portion, "ndcg@10": r.ndcg, "l1": r.l1, "loss": r.loss, "queries": r.count})
    out.close(rows)
    print(format_table(rows), end="")
    return EXIT_OK


def cmd_baseline(args) -> int:
    config = _train_config(args)
    ds = _dataset(args)
    out = RunDir(args.out)
    out.write_json("run.json", run_record("baseline", args, config, args.set or (), ds,
                                          {"method": args.method, "alpha": args.alpha, "window": args.window}))
    rows = []
    for portion in args.portion:
        r = evaluate_baseline(args.method, ds, portion, setting=config.setting, alpha=args.alpha,
                              window=args.window, fractions=config.fractions, k=config.eval_k)
        out.metric({"method": args.method, "split": portion, **r.to_dict()})
        rows.append({"method": args.method, "portion": portion, "ndcg@10": r.ndcg, "l1": r.l1,
                     "queries": r.count})
    out.close(rows)
    print(format_table(rows), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _train_config(args)
    ds = _dataset(args)
    out = RunDir(args.out)
    out.write_json("run.json", run_record("ablate", args, config, args.set or (), ds,
                                          {"seeds": list(args.seeds)}))
    t0 = time.perf_counter()
    table = run_ablation(config, ds, seeds=args.seeds)
    out.timing({"stage": "ablation", "wall_seconds": time.perf_counter() - t0})
    for rec in table:
        out.metric(rec)
    rows = [{"row": r["row"], "val": r["val"], "test": r["test"], "test_std": r["test_std"]} for r in table]
    out.close(rows)
    print(format_table(rows), end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all()
    width = max(len(name) for name, _, _ in results)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name.ljust(width)}  {detail}")
    if args.out:
        out = RunDir(args.out)
        out.write_json("run.json", run_record("verify", args))
        for name, ok, detail in results:
            out.metric({"check": name, "passed": bool(ok)})
        out.close([{"check": n, "passed": bool(ok), "detail": d} for n, ok, d in results])
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_FAILED


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def _portions(text: str) -> tuple[str, ...]:
    parts = tuple(p.strip() for p in text.split(",") if p.strip())
    bad = [p for p in parts if p not in PORTIONS]
    if bad or not parts:
        raise argparse.ArgumentTypeError(f"portions must be among {', '.join(PORTIONS)}")
    return parts


def _add_config(p: argparse.ArgumentParser, what: str = "run") -> None:
    p.add_argument("--config", help=f"JSON {what} config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field; may repeat; wins over --config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="navis", description="Node affinity prediction on CTDGs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-synthetic", help="write a synthetic regime-switching dataset")
    p.add_argument("--out", required=True)
    _add_config(p, "generator")
    p.add_argument("--benchmark", action="store_true",
                   help="also run the toy benchmark (heuristics vs. trained NAViS)")
    p.add_argument("--seeds", type=_seeds, default=(0,), help="benchmark dataset seeds, e.g. 0,1")
    p.add_argument("--train-set", action="append", metavar="KEY=VALUE",
                   help="override a field of the benchmark training config")
    p.set_defaults(func=cmd_generate_synthetic)

    p = sub.add_parser("convert-links", help="bucket a link CSV into affinity labels")
    p.add_argument("--events", required=True, help="CSV with header source,dest,time,weight")
    p.add_argument("--period", type=float, required=True, help="bucket length in time units")
    p.add_argument("--candidates", choices=("all-nodes", "destinations-only"), default="all-nodes")
    p.add_argument("--origin", type=float, default=None, help="first bucket start (default: first event)")
    p.add_argument("--name")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert_links)

    p = sub.add_parser("train", help="train NAViS and keep the best-validation checkpoint")
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--out", required=True)
    _add_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--portion", type=_portions, default=("test",), help="comma-separated portions")
    p.add_argument("--out", required=True)
    _add_config(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="score a heuristic forecaster")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=BASELINES, required=True)
    p.add_argument("--alpha", type=float, default=0.2, help="EMA decay")
    p.add_argument("--window", type=int, default=5, help="SMA window")
    p.add_argument("--portion", type=_portions, default=("test",))
    p.add_argument("--out", required=True)
    _add_config(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("ablate", help="train the ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=_seeds, default=(0,))
    p.add_argument("--out", required=True)
    _add_config(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="run the built-in oracle checks")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"navis {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except DataError as exc:
        print(f"navis {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
