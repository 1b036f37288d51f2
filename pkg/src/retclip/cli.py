"""Command-line entry point: ``retclip {synth,pretrain,probe,finetune,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import (
    CONDITION_NAMES,
    MANIFEST_NAME,
    generate_cohort,
    load_manifest,
    save_cohort,
)
from .errors import CheckpointError, ConfigError, ManifestParseError, NonFiniteLossError, RetClipError
from .gradcheck import THRESHOLD, run_gradcheck
from .train import load_checkpoint, pretrain

logger = logging.getLogger("retclip")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out", type=Path, help="output path")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retclip", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic binocular cohort")
    _common(p)
    p.add_argument("--n-patients", type=int)
    p.add_argument("--n-conditions", type=int)

    p = sub.add_parser("pretrain", help="contrastive pre-training on a cohort manifest")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="cohort directory or manifest.tsv")
    p.add_argument("--log", type=Path, help="metrics CSV (default: <out>.csv)")
    p.add_argument("--loss", choices=("all", "patient", "monocular"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="stop after this many optimisation steps")
    p.add_argument("--fixed-scale", type=float,
                   help="constant similarity multiplier instead of a learned logit scale")

    for name in ("probe", "finetune"):
        p = sub.add_parser(name, help=f"{'linear probe' if name == 'probe' else 'fine-tune'} a checkpoint")
        _common(p)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--dataset", type=Path, required=True, help="labelled image manifest")
        p.add_argument("--seeds", type=int, help="number of seed repetitions")
        p.add_argument("--epochs", type=int)
        p.add_argument("--task", choices=("multiclass", "multilabel"),
                       help="head type to request; must match the manifest")

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    _common(p)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--corrupt", action="store_true", help="include a deliberately wrong gradient")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.command == "synth":
        data = cfg.data
        if args.n_patients is not None:
            data = replace(data, n_patients=args.n_patients)
        if args.n_conditions is not None:
            data = replace(data, n_conditions=args.n_conditions)
        cfg = replace(cfg, data=data)
    elif args.command == "pretrain":
        tr = cfg.train
        if args.loss:
            tr = replace(tr, loss=args.loss)
        if args.epochs is not None:
            tr = replace(tr, epochs=args.epochs)
        if args.steps is not None:
            tr = replace(tr, max_steps=args.steps)
        cfg = replace(cfg, train=tr)
        if args.fixed_scale is not None:
            cfg = replace(cfg, model=replace(cfg.model, fixed_scale=args.fixed_scale))
    elif args.command in ("probe", "finetune"):
        ev = cfg.eval
        if args.seeds is not None:
            ev = replace(ev, n_seeds=args.seeds)
        if args.epochs is not None:
            ev = replace(ev, adapt=replace(ev.adapt, epochs=args.epochs))
        cfg = replace(cfg, eval=ev)
    return cfg.resolved()


# ---------------------------------------------------------------------------
# commands

def cmd_synth(cfg: RunConfig, out_dir: Path, force: bool = False) -> Path:
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise UsageError(f"{out_dir} is not empty (use --force to overwrite)")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        cohort = generate_cohort(cfg.data)
        manifest = save_cohort(cohort, out_dir, n_conditions=cfg.data.n_conditions)
    except OSError as exc:
        raise OSError(f"cannot write cohort to {out_dir}: {exc}") from exc
    k = cfg.data.n_conditions
    left = np.zeros(k, dtype=int)
    right = np.zeros(k, dtype=int)
    for p in cohort:
        left[list(p.left_labels)] += 1
        right[list(p.right_labels)] += 1
    print(f"patients: {len(cohort)}")
    for i in range(k):
        print(f"  {CONDITION_NAMES[i]:<20} left {left[i]:>5}  right {right[i]:>5}")
    print(f"manifest: {manifest}")
    return manifest


def _manifest_path(data: Path) -> Path:
    path = data / MANIFEST_NAME if data.is_dir() else data
    if not path.exists():
        raise UsageError(f"manifest not found: {path}")
    return path


def cmd_pretrain(cfg: RunConfig, data: Path, out: Path, log: Path | None = None, force: bool = False):
    manifest = _manifest_path(data)
    if out.exists() and not force:
        raise UsageError(f"{out} exists (use --force to overwrite)")
    cohort = load_manifest(manifest)
    log = log or out.with_suffix(".csv")
    result = pretrain(cohort, cfg.model, cfg.train, out_path=out, log_path=log)
    last = result.log[-1] if result.log else None
    if last:
        print(f"final step {last['step']}: total {last['loss_total']:.6f} "
              f"(left {last['loss_left']:.4f}, right {last['loss_right']:.4f}, patient {last['loss_patient']:.4f})")
    print(f"checkpoint: {out}\nmetrics: {log}")
    return result


def cmd_adapt(mode: str, cfg: RunConfig, checkpoint: Path, dataset: Path, out: Path | None,
              task: str | None = None) -> list[dict]:
    from .evaluate import fine_tune, linear_probe, load_labeled_manifest, write_results

    for path in (checkpoint, dataset):
        if not path.exists():
            raise UsageError(f"not found: {path}")
    ckpt = load_checkpoint(checkpoint)
    ds = load_labeled_manifest(dataset)
    if task is not None and task != ds.task_kind:
        raise ConfigError(f"requested a {task} head but {dataset} is a {ds.task_kind} dataset")
    run = linear_probe if mode == "probe" else fine_tune
    records = []
    for i in range(cfg.eval.n_seeds):
        seed = cfg.seed + i
        adapt = replace(cfg.eval.adapt, seed=seed)
        split = replace(cfg.eval.split, seed=seed)
        rec = run(ckpt, ds, split, adapt)
        records.append(rec)
        excl = f" excluded classes {rec['excluded_classes']}" if rec["excluded_classes"] else ""
        print(f"seed {seed}: auroc {rec['auroc']:.4f} aupr {rec['aupr']:.4f} best epoch {rec['best_epoch']}{excl}")
    mean = {"auroc": float(np.mean([r["auroc"] for r in records])),
            "aupr": float(np.mean([r["aupr"] for r in records])), "n_seeds": len(records)}
    print(f"mean over {len(records)} seeds: auroc {mean['auroc']:.4f} aupr {mean['aupr']:.4f}")
    if out is not None:
        write_results(records, out)
        print(f"results: {out}")
    return records


def cmd_gradcheck(eps: float, seed: int, corrupt: bool = False) -> bool:
    report = run_gradcheck(eps=eps, seed=seed, corrupt=corrupt)
    ok = True
    for name, err in report.items():
        status = "ok" if err <= THRESHOLD else "FAIL"
        ok &= err <= THRESHOLD
        print(f"{name:<24} max rel err {err:.3e}  {status}")
    print("gradcheck passed" if ok else f"gradcheck FAILED (threshold {THRESHOLD:g})")
    return ok


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        print(f"root seed: {cfg.seed}")
        print("config:", cfg.dumps())
        if args.command == "synth":
            cmd_synth(cfg, args.out or Path("cohort"), args.force)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, args.data, args.out or Path("retclip.ckpt"), args.log, args.force)
        elif args.command in ("probe", "finetune"):
            cmd_adapt(args.command, cfg, args.checkpoint, args.dataset, args.out, args.task)
        elif args.command == "gradcheck":
            if not 1e-7 <= args.eps <= 1e-3:
                raise UsageError("--eps must lie in [1e-7, 1e-3]")
            if not cmd_gradcheck(args.eps, cfg.seed, args.corrupt):
                return EXIT_RUNTIME
    except (UsageError, ConfigError, ManifestParseError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RetClipError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
