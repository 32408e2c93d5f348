"""Command-line front end: dataset -> plan -> fit -> audit/dlsi -> report.

Every stage reads and writes JSON. Exit codes: 0 on success, 2 on invalid
input (bad flags, stale plans, malformed files), 1 on runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .audit import PermutationConfig, audit_fit
from .data import DEFAULT_NA_TOKENS, Dataset, RoleMap, load_csv
from .dlsi import delta_lsi
from .learners import parse_learner
from .preprocess import PreprocSpec
from .report import make_bundle, read_bundle, read_json, write_html, write_json
from .resample import FitResult, fit_resample, tune_resample
from .sim import MECHANISMS, PipelineConfig, run_grid, write_table_csv
from .splits import SplitPlan, TimeParams, make_split_plan

log = logging.getLogger("leakguard")


class UsageError(ValueError):
    pass


def _csv_list(text: str | None) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _bool_or_auto(text: str):
    t = text.lower()
    if t == "auto":
        return "auto"
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError("expected auto, true or false")


# -- shared option groups -------------------------------------------------------


def _add_data_args(p: argparse.ArgumentParser, required: bool = True):
    g = p.add_argument_group("data")
    g.add_argument("--data", required=required, help="CSV file")
    g.add_argument("--outcome", default="outcome")
    g.add_argument("--positive", default=None, help="positive outcome level")
    g.add_argument("--predictors", default=None, help="comma list; default all non-role columns")
    g.add_argument("--subject", default=None)
    g.add_argument("--batch", default=None)
    g.add_argument("--study", default=None)
    g.add_argument("--time", default=None)
    g.add_argument("--na", default=None, help="comma list of missing-value tokens")
    g.add_argument("--delimiter", default=",")


def _load_data(args) -> Dataset:
    roles = RoleMap(
        outcome=args.outcome,
        predictors=tuple(_csv_list(args.predictors)),
        positive_class=args.positive,
        subject=args.subject,
        batch=args.batch,
        study=args.study,
        time=args.time,
    )
    na = DEFAULT_NA_TOKENS if args.na is None else tuple(args.na.split(","))
    return load_csv(args.data, roles, delimiter=args.delimiter, na_tokens=na)


def _load_plan(path) -> SplitPlan:
    d = read_json(path)
    if "kind" in d and "payload" in d:
        d = d["payload"]
    return SplitPlan.from_dict(d)


def _load_fit(path) -> FitResult:
    b = read_bundle(path, "fit")
    return FitResult.from_dict(b["payload"])


def _emit(args, text: str):
    if not args.quiet:
        print(text)


# -- subcommands ------------------------------------------------------------------


def cmd_split(args) -> int:
    ds = _load_data(args)
    tp = TimeParams(args.horizon, args.purge, args.embargo)
    plan = make_split_plan(
        ds, args.mode, v=args.v, repeats=args.repeats, stratify=args.stratify, nested=args.nested,
        inner_v=args.inner_v, compact=args.compact, seed=args.seed, time_params=tp, group=args.group,
        constraints=_csv_list(args.constraints) or None,
    )
    write_json(plan.to_dict(), args.out)
    _emit(args, plan.summary())
    return 0


def cmd_fit(args) -> int:
    ds = _load_data(args)
    plan = _load_plan(args.plan)
    fr = fit_resample(
        ds, plan, parse_learner(args.learner), PreprocSpec.parse(args.preprocess),
        metrics=_csv_list(args.metrics) or None, seed=args.seed, guarded=not args.leaky,
    )
    config = {"learner": args.learner, "preprocess": args.preprocess, "seed": args.seed,
              "guarded": not args.leaky, "plan": str(args.plan)}
    write_json(make_bundle("fit", fr.to_dict(with_predictions=args.save_predictions), config, plan.hash), args.out)
    _emit(args, fr.summary())
    return 0


def cmd_tune(args) -> int:
    ds = _load_data(args)
    plan = _load_plan(args.plan)
    grid = [float(x) for x in _csv_list(args.grid)] if "," in args.grid else int(args.grid)
    tr = tune_resample(
        ds, plan, parse_learner(args.learner), PreprocSpec.parse(args.preprocess), grid=grid,
        metrics=_csv_list(args.metrics) or None, selection=args.selection, seed=args.seed,
    )
    config = {"learner": args.learner, "preprocess": args.preprocess, "grid": args.grid,
              "selection": args.selection, "seed": args.seed}
    write_json(make_bundle("tune", tr.to_dict(), config, plan.hash), args.out)
    _emit(args, tr.summary())
    return 0


def cmd_audit(args) -> int:
    fit = _load_fit(args.fit)
    if not fit.has_predictions:
        raise UsageError(f"{args.fit} holds no predictions; rerun fit with --save-predictions")
    ds = _load_data(args)
    plan = _load_plan(args.plan) if args.plan else None
    if plan is not None and plan.hash != fit.plan_hash:
        raise UsageError(f"plan {plan.hash} is not the plan {fit.plan_hash} used by the fit")
    if fit.data_hash is not None and fit.data_hash != ds.content_hash():
        raise UsageError(f"fit was made on data {fit.data_hash}, current data is {ds.content_hash()}")
    if plan is not None:
        fit.refit_payload = {"dataset": ds, "learner": fit.learner, "preprocess": fit.preprocess, "plan": plan}
    xref = None
    if args.xref:
        xref = [ln.strip() for ln in Path(args.xref).read_text(encoding="utf-8").splitlines() if ln.strip()]
    perm = PermutationConfig(B=args.B, perm_refit=args.perm_refit, perm_stratify=args.perm_stratify,
                             metric=args.metric, seed=args.seed, scope=args.perm_scope)
    au = audit_fit(
        fit, ds, perm, batch_cols=_csv_list(args.batch_cols) or None, x_ref=xref,
        target_threshold=args.threshold, dup_threshold=args.dup_threshold,
        multivariate=not args.no_multivariate, B_multi=args.B, plan=plan,
    )
    write_json(make_bundle("audit", au.to_dict(), au.config, fit.plan_hash), args.out)
    _emit(args, au.summary())
    return 0


def cmd_dlsi(args) -> int:
    leaky = _load_fit(args.leaky)
    guarded = _load_fit(args.guarded)
    res = delta_lsi(leaky, guarded, metric=args.metric, M_boot=args.m_boot, M_flip=args.m_flip,
                    exchangeability=args.exchangeability, seed=args.seed, block_length=args.block_length)
    plan_hash = guarded.plan_hash if guarded.plan_hash == leaky.plan_hash else None
    write_json(make_bundle("dlsi", res.to_dict(), res.config, plan_hash), args.out)
    _emit(args, res.summary())
    return 0


def cmd_simulate(args) -> int:
    mechs = _csv_list(args.mechanisms) or list(MECHANISMS)
    pipe = PipelineConfig(learner=parse_learner(args.learner), preprocess=args.preprocess, v=args.v, B=args.B,
                          metric=args.metric, split_mode=args.split_mode)
    cells, records = run_grid(
        mechs, [int(x) for x in _csv_list(args.n)], [int(x) for x in _csv_list(args.p)],
        [float(x) for x in _csv_list(args.s)], args.seeds, pipe, base_seed=args.seed,
        checkpoint_dir=args.checkpoint_dir, split_modes=_csv_list(args.split_modes) or None,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table_csv(cells, out)
    if args.json:
        config = {"pipeline": pipe.to_dict(), "seeds": args.seeds, "base_seed": args.seed}
        write_json(make_bundle("simulate", {"cells": cells, "tasks": records}, config), args.json)
    _emit(args, f"{len(records)} tasks, {len(cells)} cells -> {out}")
    return 0


def cmd_report(args) -> int:
    src = args.audit or args.dlsi or args.bundle
    b = read_bundle(src)
    write_html(b, args.out)
    _emit(args, f"wrote {args.out}")
    return 0


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="leakguard", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"leakguard {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=1)
    common.add_argument("--quiet", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", parents=[common], help="build a split plan")
    _add_data_args(p)
    p.add_argument("--mode", default="subject_grouped")
    p.add_argument("--group", default=None)
    p.add_argument("--constraints", default=None, help="grouping columns for mode=combined")
    p.add_argument("--v", type=int, default=5)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--stratify", action="store_true")
    p.add_argument("--nested", action="store_true")
    p.add_argument("--inner-v", type=int, default=3)
    p.add_argument("--compact", action="store_true")
    p.add_argument("--horizon", type=int, default=0)
    p.add_argument("--purge", type=int, default=0)
    p.add_argument("--embargo", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    for name, func in (("fit", cmd_fit), ("tune", cmd_tune)):
        p = sub.add_parser(name, parents=[common], help=f"{name} across a split plan")
        _add_data_args(p)
        p.add_argument("--plan", required=True)
        p.add_argument("--learner", default="glmnet:alpha=0.9")
        p.add_argument("--preprocess", default="impute=median,normalize=zscore")
        p.add_argument("--metrics", default=None)
        p.add_argument("--out", required=True)
        if name == "fit":
            p.add_argument("--leaky", action="store_true", help="fit preprocessing on all rows (for comparison)")
            p.add_argument("--save-predictions", action="store_true")
        else:
            p.add_argument("--grid", default="5", help="grid size or comma list of lambdas")
            p.add_argument("--selection", default="one_std_err", choices=["one_std_err", "best"])
        p.set_defaults(func=func)

    p = sub.add_parser("audit", parents=[common], help="leakage audit of a fit")
    _add_data_args(p)
    p.add_argument("--fit", required=True)
    p.add_argument("--plan", default=None)
    p.add_argument("--metric", default=None)
    p.add_argument("--B", type=int, default=200)
    p.add_argument("--perm-refit", type=_bool_or_auto, default="auto")
    p.add_argument("--perm-stratify", action="store_true")
    p.add_argument("--perm-scope", default="within_fold", choices=["within_fold", "global"])
    p.add_argument("--xref", default=None, help="file listing reference columns, one per line")
    p.add_argument("--batch-cols", default=None)
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--dup-threshold", type=float, default=0.995)
    p.add_argument("--no-multivariate", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("dlsi", parents=[common], help="paired inflation estimate between two fits")
    p.add_argument("--leaky", required=True)
    p.add_argument("--guarded", required=True)
    p.add_argument("--metric", default=None)
    p.add_argument("--m-boot", type=int, default=2000)
    p.add_argument("--m-flip", type=int, default=10000)
    p.add_argument("--exchangeability", default="iid",
                   choices=["iid", "by_group", "within_batch", "blocked_time"])
    p.add_argument("--block-length", type=int, default=None)
    p.add_argument("--out", default="dlsi.json")
    p.set_defaults(func=cmd_dlsi)

    p = sub.add_parser("simulate", parents=[common], help="simulation grid")
    p.add_argument("--mechanisms", default=None)
    p.add_argument("--n", default="250")
    p.add_argument("--p", default="10")
    p.add_argument("--s", default="0")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--learner", default="glmnet:alpha=0.9")
    p.add_argument("--preprocess", default="impute=median,normalize=zscore")
    p.add_argument("--v", type=int, default=5)
    p.add_argument("--B", type=int, default=200)
    p.add_argument("--metric", default="auc")
    p.add_argument("--split-mode", default="subject_grouped")
    p.add_argument("--split-modes", default=None)
    p.add_argument("--checkpoint-dir", default=None)
    p.add_argument("--json", default=None, help="also write a JSON bundle")
    p.add_argument("--out", required=True, help="aggregated CSV table")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", parents=[common], help="render a JSON bundle to HTML")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--audit")
    src.add_argument("--dlsi")
    src.add_argument("--bundle")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 2
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error
        print(f"failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
