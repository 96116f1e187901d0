"""Command-line entry point: ``urgency-rank {generate,train,eval,ablate,validate}``.

Exit codes: 0 success, 2 validation error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import jsonl
from .config import RunConfig, RunConfigError, load_run_config
from .metrics import evaluate
from .model import load_checkpoint, save_checkpoint
from .simulate import generate, split_dataset, truth_to_dict
from .train import run_ablation, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("urgency_rank")

SPLITS = ("train", "val", "test")


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.threads is not None:
        cfg = cfg.with_shards(args.threads)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write-test"
    probe.write_text("")
    probe.unlink()
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_dataset(cfg: RunConfig, out: Path) -> dict:
    ds = generate(cfg.sim)
    parts = split_dataset(ds.slates, cfg.sim)
    counts = {name: jsonl.write_jsonl(out / f"{name}.jsonl", part) for name, part in zip(SPLITS, parts)}
    _write_json(out / "ground_truth.json", truth_to_dict(ds))
    manifest = {"counts": counts, "seed": cfg.sim.seed, "config_sha256": cfg.digest(),
                "skipped_requests": ds.skipped, "files": [f"{n}.jsonl" for n in SPLITS]}
    _write_json(out / "manifest.json", manifest)
    return manifest


def load_splits(data_dir) -> tuple[list, list, list]:
    d = Path(data_dir)
    missing = [n for n in SPLITS if not (d / f"{n}.jsonl").is_file()]
    if missing:
        raise FileNotFoundError(f"{d}: missing {', '.join(m + '.jsonl' for m in missing)}")
    return tuple(jsonl.read_jsonl(d / f"{n}.jsonl") for n in SPLITS)


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    manifest = write_dataset(cfg, out)
    print(json.dumps(manifest["counts"]))
    log.info("wrote %s", ", ".join(f"{k}={v}" for k, v in manifest["counts"].items()))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data_dir = args.data or cfg.data_dir
    if data_dir is None:
        raise RunConfigError("train needs --data or data_dir in the config")
    out = _out_dir(args)
    tr, va, _ = load_splits(data_dir)
    res = train(tr, va, cfg.model, cfg.train, log_path=out / "train_log.jsonl")
    save_checkpoint(out / "checkpoint.bin", res.params, cfg.model,
                    extra={"best_epoch": res.best_epoch, "steps": res.steps, "config_sha256": cfg.digest()})
    summary = {"best_epoch": res.best_epoch, "best_val_ndcg@1": res.best_val_ndcg1, "steps": res.steps}
    _write_json(out / "train_summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    params, model_cfg, _ = load_checkpoint(args.checkpoint)
    slates = jsonl.read_jsonl(args.data)
    report = evaluate((params, model_cfg), slates)
    if args.out:
        out = _out_dir(args)
        (out / "metrics.json").write_text(report.to_json() + "\n")
    print(report.to_json())
    log.info("%s", report.summary())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    data_dir = args.data or cfg.data_dir
    if data_dir is None:
        data_dir = out / "data"
        data_dir.mkdir(exist_ok=True)
        write_dataset(cfg, data_dir)
    tr, va, te = load_splits(data_dir)
    table = run_ablation(tr, va, te, cfg.model, cfg.train, seeds=cfg.ablation.seeds, max_steps=cfg.ablation.max_steps)
    _write_json(out / "ablation.json", table.to_dict())
    (out / "ablation.txt").write_text(table.format() + "\n")
    print(table.format())
    return EXIT_OK


def cmd_validate(args) -> int:
    bad = 0
    for path in args.data:
        ok, errors = jsonl.validate_file(path)
        for line, msg in errors:
            print(f"{path}:{line}: {msg}")
        print(json.dumps({"file": str(path), "valid": ok, "invalid": len(errors)}))
        bad += len(errors)
    return EXIT_INVALID if bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="gradient shard count")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="urgency-rank", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", parents=[common], help="simulate and write train/val/test JSONL")
    g.set_defaults(func=cmd_generate)
    t = sub.add_parser("train", parents=[common], help="train a model on generated data")
    t.add_argument("--data", help="directory holding train/val/test.jsonl")
    t.set_defaults(func=cmd_train)
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a JSONL file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="JSONL file of slates")
    e.set_defaults(func=cmd_eval)
    a = sub.add_parser("ablate", parents=[common], help="train the four ablation variants")
    a.add_argument("--data", help="directory holding train/val/test.jsonl (generated if omitted)")
    a.set_defaults(func=cmd_ablate)
    v = sub.add_parser("validate", parents=[common], help="check JSONL files against the slate invariants")
    v.add_argument("data", nargs="+")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    needs_out = args.command in ("generate", "train", "ablate")
    if needs_out and not args.out:
        print(f"error: {args.command} requires --out", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (RunConfigError, jsonl.RecordError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
