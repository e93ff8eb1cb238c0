"""``deskseg`` command line: gen-data, train, predict, eval, report.

Every command writes ``manifest.json`` next to its artifacts.  Failures print
one line ``error: <kind>: <message>`` to stderr and exit nonzero (2 for usage
and unwritable output directories, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import nullcontext
from fractions import Fraction
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError
from .data import coco
from .data.rle import CodecError
from .data.synth import PAPER_SPLIT, ConfigError, SynthConfig, generate_synthetic, save_image_store, split_dataset
from .metrics import ApReport, EvaluationError, evaluate_files, load_results, render_table
from .model import ModelConfig, init_params
from .train import (
    CheckpointMismatch,
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    load_samples,
    predict_results,
    save_checkpoint,
    train,
)

SPLITS = ("train", "val", "test")
TASKS = ("detection", "segmentation")


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError("io", f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError("config", f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise CliError("config", f"{path}: expected a JSON object of key-value settings")
    return doc


def _sections(doc: dict, allowed: tuple[str, ...]) -> dict[str, dict]:
    unknown = set(doc) - set(allowed)
    if unknown:
        raise CliError("config", f"unknown config sections {sorted(unknown)}; expected {list(allowed)}")
    out = {}
    for name in allowed:
        sec = doc.get(name, {})
        if not isinstance(sec, dict):
            raise CliError("config", f"section {name!r} must be an object")
        out[name] = dict(sec)
    return out


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError("io", f"output directory {out} is not writable: {exc.strerror}", code=2) from None
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _manifest(out: Path, command: str, seed, threads, config: dict, inputs: dict, artifacts: dict) -> None:
    _write_json(
        out / "manifest.json",
        {
            "command": command,
            "tool_version": __version__,
            "seed": seed,
            "threads": threads,
            "config": config,
            "inputs": {k: str(v) for k, v in inputs.items()},
            "artifacts": {k: str(v) for k, v in artifacts.items()},
        },
    )


def _load_split(data_dir: Path, split: str):
    path = data_dir / f"{split}.json"
    if not path.exists():
        raise CliError("io", f"{path} does not exist")
    ds = coco.load(path)
    return ds, load_samples(ds, data_dir / "images")


def _thread_limit(threads: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=threads)


# ---------------------------------------------------------------------------
# commands


def _ratio(r) -> Fraction:
    try:
        return Fraction(r) if isinstance(r, str) else Fraction(r).limit_denominator(10**9)
    except (ValueError, ZeroDivisionError):
        raise CliError("config", f"bad split ratio {r!r}") from None


def cmd_gen_data(args) -> None:
    doc = _read_config(args.config)
    split = doc.pop("split", [str(r) for r in PAPER_SPLIT])
    split_seed = doc.pop("split_seed", 0)
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        cfg = SynthConfig(**doc)
        ratios = [_ratio(r) for r in split]
    except TypeError as exc:
        raise CliError("config", str(exc)) from None
    out = _prepare_out(args.out)
    ds, store = generate_synthetic(cfg)
    parts = split_dataset(ds, ratios, seed=split_seed)
    coco.save(ds, out / "annotations.json")
    for name, part in zip(SPLITS, parts):
        coco.save(part, out / f"{name}.json")
    save_image_store(store, out / "images")
    artifacts = {"annotations": "annotations.json", "images": "images", **{s: f"{s}.json" for s in SPLITS}}
    config = {**cfg.to_dict(), "split": [str(r) for r in ratios], "split_seed": split_seed}
    _manifest(out, "gen-data", cfg.seed, args.threads, config, {}, artifacts)
    counts = "/".join(str(len(p.images)) for p in parts)
    print(f"wrote {len(ds.images)} images ({counts} train/val/test) to {out}")


def cmd_train(args) -> None:
    sec = _sections(_read_config(args.config), ("model", "train"))
    if args.seed is not None:
        sec["train"]["seed"] = args.seed
        sec["model"].setdefault("seed", args.seed)
    sec["train"]["threads"] = args.threads
    try:
        tcfg = TrainConfig.from_dict(sec["train"])
    except (TypeError, ValueError) as exc:
        raise CliError("config", str(exc)) from None
    data_dir = Path(args.data)
    _, samples = _load_split(data_dir, args.split)
    val_samples = None
    if tcfg.eval_every and (data_dir / f"{args.val_split}.json").exists():
        _, val_samples = _load_split(data_dir, args.val_split)
    start_epoch = start_step = 0
    if args.resume:
        override = ModelConfig.from_dict(sec["model"]) if sec["model"] else None
        params, mcfg, meta = load_checkpoint(args.resume, override)
        start_epoch, start_step = int(meta.get("epochs_done", 0)), int(meta.get("steps", 0))
    else:
        try:
            mcfg = ModelConfig.from_dict(sec["model"])
        except (TypeError, ValueError) as exc:
            raise CliError("config", str(exc)) from None
        params = init_params(mcfg)
    out = _prepare_out(args.out)
    log_path = out / "train_log.jsonl"
    if not args.resume and log_path.exists():
        log_path.unlink()
    config = {"model": mcfg.to_dict(), "train": tcfg.to_dict()}
    inputs = {"data": data_dir, "split": args.split}
    if args.resume:
        inputs["resume"] = args.resume
    artifacts = {"checkpoint": "checkpoint.bin", "log": "train_log.jsonl"}
    _manifest(out, "train", tcfg.seed, args.threads, config, inputs, artifacts)
    result = train(samples, params, mcfg, tcfg, log_path, val_samples, start_epoch, start_step)
    meta = {"epochs_done": result.epochs_done, "steps": result.steps, "train": tcfg.to_dict()}
    save_checkpoint(out / "checkpoint.bin", result.params, mcfg, meta)
    print(f"trained {result.epochs_done - start_epoch} epochs ({result.steps - start_step} steps); checkpoint at {out / 'checkpoint.bin'}")


def cmd_predict(args) -> None:
    sec = _sections(_read_config(args.config), ("model", "train"))
    override = ModelConfig.from_dict(sec["model"]) if sec["model"] else None
    params, mcfg, _ = load_checkpoint(args.checkpoint, override)
    _, samples = _load_split(Path(args.data), args.split)
    out = _prepare_out(args.out)
    results = predict_results(params, mcfg, samples, args.score_threshold)
    (out / "predictions.json").write_text(json.dumps(results, separators=(",", ":")) + "\n")
    config = {"model": mcfg.to_dict(), "score_threshold": args.score_threshold}
    inputs = {"checkpoint": args.checkpoint, "data": args.data, "split": args.split}
    _manifest(out, "predict", mcfg.seed, args.threads, config, inputs, {"predictions": "predictions.json"})
    print(f"wrote {len(results)} predictions for {len(samples)} images")


def cmd_eval(args) -> None:
    results = load_results(args.predictions)
    ds = coco.load(args.annotations)
    tasks = TASKS if args.task == "both" else (args.task,)
    out = _prepare_out(args.out)
    reports = [evaluate_files(results, ds, t) for t in tasks]
    _write_json(out / "report.json", {r.task: r.to_json() for r in reports})
    table = render_table(reports)
    (out / "report.txt").write_text(table)
    inputs = {"predictions": args.predictions, "annotations": args.annotations}
    _manifest(out, "eval", None, args.threads, {"task": args.task}, inputs,
              {"report": "report.json", "table": "report.txt"})
    print(table, end="")


def cmd_report(args) -> None:
    reports = []
    for path in args.reports:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise CliError("io", f"cannot read {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise CliError("parse", f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        reports.extend(ApReport.from_json(doc[t]) for t in TASKS if t in doc)
    table = render_table(reports)
    if args.out:
        out = _prepare_out(args.out)
        (out / "report.txt").write_text(table)
        _manifest(out, "report", None, args.threads, {}, {f"report{i}": p for i, p in enumerate(args.reports)},
                  {"table": "report.txt"})
    print(table, end="")


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, code=2)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads (1 is fully deterministic)")
    common.add_argument("--config", default=None, help="JSON key-value config file")

    p = _Parser(prog="deskseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"deskseg {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train from a dataset directory")
    t.add_argument("--data", required=True, help="directory written by gen-data")
    t.add_argument("--split", default="train")
    t.add_argument("--val-split", default="val")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", parents=[common], help="write a results file for one split")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--split", default="val")
    pr.add_argument("--score-threshold", type=float, default=TrainConfig.score_threshold)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", parents=[common], help="score a results file against annotations")
    e.add_argument("--predictions", required=True)
    e.add_argument("--annotations", required=True)
    e.add_argument("--task", choices=("both",) + TASKS, default="both")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", parents=[common], help="render report.json files as one table")
    r.add_argument("reports", nargs="+")
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)
    return p


_ERROR_KINDS = (
    (coco.ParseError, "parse"),
    (coco.ValidationError, "validation"),
    (EvaluationError, "validation"),
    (CheckpointMismatch, "checkpoint"),
    (CheckpointError, "checkpoint"),
    (TrainingDiverged, "diverged"),
    (ConfigError, "config"),
    (CodecError, "codec"),
)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise CliError("usage", "--threads must be >= 1", code=2)
        with _thread_limit(args.threads):
            args.func(args)
        return 0
    except CliError as exc:
        err, code = f"{exc.kind}: {exc}", exc.code
    except tuple(k for k, _ in _ERROR_KINDS) as exc:
        kind = next(name for cls, name in _ERROR_KINDS if isinstance(exc, cls))
        err, code = f"{kind}: {exc}", 1
    except OSError as exc:
        err, code = f"io: {exc.filename or ''}: {exc.strerror}", 1
    except ValueError as exc:
        err, code = f"config: {exc}", 1
    print("error: " + " ".join(err.split()), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
