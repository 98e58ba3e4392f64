"""Command line entry point: one subcommand per stage plus ``run-all``.

Exit codes: 0 success, 2 invalid input or config, 3 missing upstream output
(or unreachable remote service), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .errors import PipelineError
from .evaluation import TASKS, VARIANTS
from .runner import Run, resolve_config
from . import runner

log = logging.getLogger("cardiopulm")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults apply to missing keys)")
    common.add_argument("--run-dir", default="runs/default", help="directory for caches and reports")
    common.add_argument("--seed", type=int, help="master seed (cohort, split, training)")
    common.add_argument("--workers", type=int, help="worker processes for per-scan stages")
    common.add_argument("--task", choices=TASKS)
    common.add_argument("--variant", choices=list(VARIANTS))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cardiopulm", description="Explainable cardiopulmonary risk pipeline")
    p.add_argument("--version", action="version", version=f"cardiopulm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", parents=[common], help="sample a synthetic cohort (or register a manifest)")
    sim.add_argument("--n-subjects", type=int)
    sim.add_argument("--manifest", help="CSV manifest of existing volumes instead of a synthetic cohort")
    sim.add_argument("--write-volumes", action="store_true", help="materialize NIfTI volumes, not just specs")
    for name, text in (("preprocess", "clip HU and resample to isotropic spacing"),
                       ("locate", "find the heart ROI"),
                       ("findings", "score the five lung findings"),
                       ("reason", "build reasoning traces from findings"),
                       ("lungrisk", "estimate six-year lung-risk trajectories"),
                       ("features", "extract cardiac feature vectors"),
                       ("train", "fit the fusion head for --task/--variant"),
                       ("evaluate", "test-split AUC, bootstrap CI, ROC figure"),
                       ("ablate", "train and test every input variant"),
                       ("run-all", "every stage end to end with reports")):
        sp = sub.add_parser(name, parents=[common], help=text)
        if name == "run-all":
            sp.add_argument("--n-subjects", type=int)
            sp.add_argument("--manifest")
    ex = sub.add_parser("explain", parents=[common], help="attributions for one scan")
    ex.add_argument("--scan-id")
    return p


def _summary(rep) -> str:
    return f"{rep.task:<10} {rep.variant_name:<24} AUC {rep.auc:.3f} [{rep.ci95[0]:.3f}, {rep.ci95[1]:.3f}]"


def _dispatch(args) -> int:
    cfg = resolve_config(args.config, {"seed": args.seed, "workers": args.workers, "task": args.task,
                                       "variant": args.variant})
    if getattr(args, "n_subjects", None) is not None:
        cfg["cohort"]["n_subjects"] = args.n_subjects
    if getattr(args, "manifest", None):
        cfg["cohort"]["manifest"] = args.manifest
    if getattr(args, "write_volumes", False):
        cfg["cohort"]["write_volumes"] = True
    run = Run(args.run_dir, cfg)
    task, variant = cfg["task"], cfg["variant"]
    cmd = args.command
    if cmd == "simulate":
        d = runner.stage_simulate(run)
        print(f"cohort: {len(run.scans())} scans -> {d}")
    elif cmd in ("preprocess", "locate", "findings", "reason", "lungrisk", "features"):
        d = getattr(runner, f"stage_{cmd}")(run)
        print(f"{cmd}: {d}")
    elif cmd == "train":
        d = runner.stage_train(run, task, variant)
        info = json.loads((d / "train_log.json").read_text())
        print(f"train {task}/{variant}: best epoch {info['best_epoch']}, val AUC {info['best_val_auc']:.3f} -> {d}")
    elif cmd == "evaluate":
        d, rep = runner.stage_evaluate(run, task, variant)
        print(_summary(rep))
        print(f"report: {d}")
    elif cmd == "ablate":
        d, reports = runner.stage_ablate(run)
        print((d / "ablation.txt").read_text(), end="")
        print(f"report: {d}")
    elif cmd == "explain":
        d, out = runner.stage_explain(run, task, variant, args.scan_id)
        print(f"scan {out['scan_id']}: p = {out['probability']:.3f}")
        if "indicators" in out:
            print(out["indicators"]["annotated_rationale"] or "no active reasoning chains")
        print(f"attribution: {d}")
    elif cmd == "run-all":
        res = runner.stage_run_all(run)
        for rep in res["evaluations"].values():
            print(_summary(rep))
        print((run.dir / "reports" / "ablation.txt").read_text(), end="")
        print(f"reports: {run.dir / 'reports'}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except PipelineError as exc:
        print(f"cardiopulm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
