"""Synthetic data with controlled leakage, and the detection experiments.

Rows are ordered subject-major (six rows per subject by default), time is
the row index, and the binary outcome follows a probit model whose latent
predictor carries signal from the first few features plus AR(1) noise.
Each mechanism appends one leaking predictor.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy import stats
from scipy.signal import lfilter

from .audit import PermutationConfig, perm_gap
from .data import Dataset
from .dlsi import DeltaLsiResult, DeltaVector, delta_from_vector
from .learners import LearnerSpec
from .preprocess import PreprocSpec
from .resample import aggregate_repeats, default_workers, fit_resample
from .splits import make_split_plan

MECHANISMS = ("none", "subject_overlap", "batch_confounded", "peek_norm", "lookahead")
SPLIT_MODES = ("subject_grouped", "batch_blocked", "study_loocv", "time_series")
LEAK_COLUMN = {
    "subject_overlap": "leak_subject_mean_y",
    "batch_confounded": "leak_batch_mean_y",
    "peek_norm": "leak_peek",
    "lookahead": "leak_future_biomarker",
}


@dataclass(frozen=True)
class SimConfig:
    mechanism: str = "none"
    n: int = 250
    p: int = 10
    s: float = 0.0
    seed: int = 1
    rows_per_subject: int = 6
    n_batches: int = 6
    n_studies: int = 5
    ar_rho: float = 0.9
    peek_var: float = 0.09
    k_signal: int = 5
    batch_offset: float = 1.0
    biomarker_sd: float = 1.0

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}")
        if self.n < 2 * self.rows_per_subject or self.p < 1 or self.s < 0:
            raise ValueError("need n >= 2 subjects' rows, p >= 1 and s >= 0")
        if not -1 < self.ar_rho < 1:
            raise ValueError("ar_rho must lie in (-1, 1)")
        if self.n_batches < 2 or self.n_studies < 2:
            raise ValueError("need at least 2 batches and 2 studies")


@dataclass
class SimDataset:
    dataset: Dataset
    config: SimConfig
    leak_columns: tuple[str, ...]
    beta: np.ndarray
    eta: np.ndarray = field(repr=False)


def ar1(n: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Stationary AR(1) series with unit marginal variance."""
    e = rng.normal(size=n) * np.sqrt(1.0 - rho * rho)
    e[0] = rng.normal()
    return lfilter([1.0], [1.0, -rho], e)


def _group_mean(values: np.ndarray, codes: np.ndarray) -> np.ndarray:
    sums = np.bincount(codes, weights=values)
    counts = np.bincount(codes)
    return (sums / counts)[codes]


def simulate(cfg: SimConfig) -> SimDataset:
    """Draw one dataset; all leaking columns are computed on every row."""
    # independent streams so the shared part is identical across mechanisms
    r_x, r_noise, r_y, r_meta, r_leak = (np.random.default_rng([cfg.seed, k]) for k in range(5))
    n, p = cfg.n, cfg.p
    X = r_x.normal(size=(n, p))
    k = min(cfg.k_signal, p)
    beta = np.zeros(p)
    noise = ar1(n, cfg.ar_rho, r_noise)
    if cfg.s > 0:
        beta[:k] = cfg.s
        eta = X @ beta + noise
    else:
        eta = np.zeros(n)
    y = (r_y.uniform(size=n) < stats.norm.cdf(eta)).astype(float)

    subject = np.arange(n) // cfg.rows_per_subject
    n_subj = subject.max() + 1
    study = (subject * cfg.n_studies) // n_subj
    if cfg.mechanism == "batch_confounded":
        # outcome tilts rows toward the first half of the batches
        high = r_meta.uniform(size=n) < 1.0 / (1.0 + np.exp(-cfg.batch_offset * (2 * y - 1)))
        half = cfg.n_batches // 2
        batch = np.where(high, r_meta.integers(0, half, n), r_meta.integers(half, cfg.n_batches, n))
    else:
        batch = r_meta.integers(0, cfg.n_batches, n)

    data = {f"x{j + 1}": X[:, j] for j in range(p)}
    leak = ()
    m = cfg.mechanism
    if m == "subject_overlap":
        data[LEAK_COLUMN[m]] = _group_mean(y, subject)
    elif m == "batch_confounded":
        data[LEAK_COLUMN[m]] = _group_mean(y, batch)
    elif m == "peek_norm":
        data[LEAK_COLUMN[m]] = y + r_leak.normal(scale=np.sqrt(cfg.peek_var), size=n)
    elif m == "lookahead":
        bio = eta + r_leak.normal(scale=cfg.biomarker_sd, size=n)
        nxt = np.arange(1, n + 1)
        last = (nxt >= n) | (subject[np.minimum(nxt, n - 1)] != subject)
        data[LEAK_COLUMN[m]] = np.where(last, bio, bio[np.minimum(nxt, n - 1)])
    if m != "none":
        leak = (LEAK_COLUMN[m],)
    predictors = list(data)
    data.update(
        y=y,
        subject=np.array([f"S{i + 1}" for i in subject]),
        batch=np.array([f"B{i + 1}" for i in batch]),
        study=np.array([f"ST{i + 1}" for i in study]),
        time=np.arange(n, dtype=float),
    )
    ds = Dataset.from_arrays(
        data, outcome="y", predictors=predictors, positive_class="1",
        subject="subject", batch="batch", study="study", time="time",
    )
    return SimDataset(ds, cfg, leak, beta, eta)


# -- grid experiments ---------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    learner: LearnerSpec = LearnerSpec("logistic_elastic_net", alpha=0.9)
    preprocess: str = "impute=median,normalize=zscore"
    v: int = 5
    B: int = 200
    metric: str = "auc"
    split_mode: str = "subject_grouped"
    stratify: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["learner"] = self.learner.to_dict()
        return d


def task_seed(base: int, n: int, p: int, s: float, replicate: int) -> int:
    """Seed shared by every mechanism of one (n, p, s, replicate) cell."""
    key = f"{base}|{n}|{p}|{s:.6g}|{replicate}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")


def run_task(mechanism: str, n: int, p: int, s: float, replicate: int, pipe: PipelineConfig,
             base_seed: int = 1, sim_overrides: dict | None = None) -> dict:
    seed = task_seed(base_seed, n, p, s, replicate)
    rec = {"mechanism": mechanism, "n": n, "p": p, "s": s, "replicate": replicate, "seed": seed,
           "split_mode": pipe.split_mode}
    try:
        sd = simulate(SimConfig(mechanism=mechanism, n=n, p=p, s=s, seed=seed, **(sim_overrides or {})))
        plan = make_split_plan(sd.dataset, pipe.split_mode, v=pipe.v, seed=seed, stratify=pipe.stratify)
        fr = fit_resample(sd.dataset, plan, pipe.learner, pipe.preprocess, metrics=[pipe.metric],
                          seed=seed, store_refit_data=False, n_jobs=1)
        pg = perm_gap(fr, PermutationConfig(B=pipe.B, perm_refit=False, return_perm=False,
                                            metric=pipe.metric, seed=seed), ds=sd.dataset)
        rec.update(status="ok", auc=pg.observed, perm_mean=pg.perm_mean, gap=pg.gap, p_value=pg.p_value)
    except Exception as exc:  # a failed task is recorded and excluded from its cell
        rec.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return rec


def wilson_interval(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    if n == 0:
        return float("nan"), float("nan")
    ci = stats.binomtest(k, n).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def _task_key(t: tuple) -> str:
    mech, n, p, s, rep, mode = t
    return f"{mode}_{mech}_n{n}_p{p}_s{s:g}_r{rep}"


def _atomic_write(path: Path, obj: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh)
    os.replace(tmp, path)


def summarize_cells(records: Iterable[dict], alpha: float = 0.05) -> list[dict]:
    """Per-cell rejection rate (Wilson interval, binomial SE), mean AUC and gap."""
    cells: dict[tuple, list[dict]] = {}
    for r in records:
        cells.setdefault((r["split_mode"], r["mechanism"], r["n"], r["p"], r["s"]), []).append(r)
    out = []
    for (mode, mech, n, p, s), rs in sorted(cells.items(), key=lambda kv: tuple(map(str, kv[0]))):
        ok = [r for r in rs if r["status"] == "ok"]
        k = sum(r["p_value"] < alpha for r in ok)
        m = len(ok)
        rate = k / m if m else float("nan")
        lo, hi = wilson_interval(k, m)
        out.append({
            "split_mode": mode, "mechanism": mech, "n": n, "p": p, "s": s,
            "n_ok": m, "n_failed": len(rs) - m, "rejections": k, "rejection_rate": rate,
            "se": float(np.sqrt(rate * (1 - rate) / m)) if m else float("nan"),
            "wilson_lo": lo, "wilson_hi": hi,
            "mean_auc": float(np.mean([r["auc"] for r in ok])) if m else float("nan"),
            "mean_gap": float(np.mean([r["gap"] for r in ok])) if m else float("nan"),
        })
    return out


def run_grid(
    mechanisms: Sequence[str] = MECHANISMS,
    ns: Sequence[int] = (250,),
    ps: Sequence[int] = (10,),
    ss: Sequence[float] = (0.0,),
    seeds: int = 50,
    pipe: PipelineConfig = PipelineConfig(),
    base_seed: int = 1,
    alpha: float = 0.05,
    checkpoint_dir: str | Path | None = None,
    n_jobs: int | None = None,
    split_modes: Sequence[str] | None = None,
    sim_overrides: dict | None = None,
) -> tuple[list[dict], list[dict]]:
    """Run every (mode, mechanism, n, p, s, replicate) task; returns (cells, tasks).

    With ``checkpoint_dir`` each finished task is written to its own JSON
    file and reused on the next call, so an interrupted grid resumes.
    """
    modes = list(split_modes or [pipe.split_mode])
    tasks = [(m, n, p, s, r, mode) for mode in modes for m in mechanisms for n in ns for p in ps
             for s in ss for r in range(1, seeds + 1)]
    ckpt = Path(checkpoint_dir) if checkpoint_dir else None
    done: dict[str, dict] = {}
    todo = []
    for t in tasks:
        f = ckpt / f"{_task_key(t)}.json" if ckpt else None
        if f is not None and f.exists():
            done[_task_key(t)] = json.loads(f.read_text())
        else:
            todo.append(t)

    def one(t):
        mech, n, p, s, rep, mode = t
        rec = run_task(mech, n, p, s, rep, _with_mode(pipe, mode), base_seed, sim_overrides)
        if ckpt is not None:
            _atomic_write(ckpt / f"{_task_key(t)}.json", rec)
        return rec

    n_jobs = default_workers() if n_jobs is None else n_jobs
    if n_jobs > 1:
        new = Parallel(n_jobs=n_jobs)(delayed(one)(t) for t in todo)
    else:
        new = [one(t) for t in todo]
    for t, rec in zip(todo, new):
        done[_task_key(t)] = rec
    records = [done[_task_key(t)] for t in tasks]
    return summarize_cells(records, alpha), records


def _with_mode(pipe: PipelineConfig, mode: str) -> PipelineConfig:
    from dataclasses import replace

    return replace(pipe, split_mode=mode)


def run_split_mode_grid(
    modes: Sequence[str] = SPLIT_MODES,
    mechanisms: Sequence[str] = MECHANISMS,
    n: int = 500,
    p: int = 20,
    seeds: int = 30,
    pipe: PipelineConfig = PipelineConfig(),
    base_seed: int = 1,
    checkpoint_dir: str | Path | None = None,
    n_jobs: int | None = None,
) -> tuple[list[dict], list[dict]]:
    """Rejection rates per split mode at s = 0.

    The number of batches equals the fold count so a batch-blocked fold
    holds out exactly one batch.
    """
    return run_grid(mechanisms, (n,), (p,), (0.0,), seeds, pipe, base_seed,
                    checkpoint_dir=checkpoint_dir, n_jobs=n_jobs, split_modes=modes,
                    sim_overrides={"n_batches": pipe.v})


def write_table_csv(cells: list[dict], path: str | Path):
    import csv

    cols = ["split_mode", "mechanism", "n", "p", "s", "n_ok", "n_failed", "rejections", "rejection_rate",
            "se", "wilson_lo", "wilson_hi", "mean_auc", "mean_gap"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for c in cells:
            w.writerow({k: c[k] for k in cols})


# -- Delta-LSI experiments ----------------------------------------------------


def dlsi_power_replicate(
    seed: int,
    n: int = 200,
    p: int = 20,
    s: float = 0.5,
    peek_sd: float = 0.3,
    repeats: int = 20,
    v: int = 5,
    learner: LearnerSpec = LearnerSpec("logistic_elastic_net"),
    M_boot: int = 2000,
    M_flip: int = 10000,
) -> DeltaLsiResult:
    """Leaky arm = data plus a noisy copy of the outcome; guarded arm = data alone.

    Both arms share one repeated subject-grouped plan.
    """
    sd = simulate(SimConfig("peek_norm", n=n, p=p, s=s, seed=seed, peek_var=peek_sd ** 2))
    leaky = sd.dataset
    guarded = leaky.with_predictors([c for c in leaky.predictors if c not in sd.leak_columns])
    plan = make_split_plan(leaky, "subject_grouped", v=v, repeats=repeats, seed=seed)
    fl = fit_resample(leaky, plan, learner, "normalize=zscore", seed=seed, store_refit_data=False)
    fg = fit_resample(guarded, plan, learner, "normalize=zscore", seed=seed, store_refit_data=False,
                      check_data=False)
    from .dlsi import pair_fits

    return delta_from_vector(pair_fits(fl, fg, "auc"), M_boot, M_flip, seed=seed)


def dlsi_null_replicate(
    seed: int,
    n: int = 200,
    p: int = 20,
    s: float = 0.35,
    repeats: int = 20,
    v: int = 5,
    learner: LearnerSpec = LearnerSpec("logistic_glm"),
    M_flip: int = 10000,
) -> DeltaLsiResult:
    """Two exchangeable arms: each adds its own pure-noise feature.

    Every repeat draws a fresh dataset from the same population, so repeat
    deltas are independent and symmetric about zero under the null.
    """
    la, ga, rep_ids = [], [], []
    for r in range(1, repeats + 1):
        rs = int(np.random.default_rng([seed, r]).integers(2**31))
        sd = simulate(SimConfig("none", n=n, p=p, s=s, seed=rs))
        rng = np.random.default_rng([rs, 99])
        base = sd.dataset
        noise_a, noise_b = rng.normal(size=(2, n))
        da = Dataset.from_arrays({**_columns(base), "noise_arm": noise_a}, outcome="y",
                                 predictors=list(base.predictors) + ["noise_arm"], positive_class="1",
                                 subject="subject", batch="batch", study="study", time="time")
        db = Dataset.from_arrays({**_columns(base), "noise_arm": noise_b}, outcome="y",
                                 predictors=list(base.predictors) + ["noise_arm"], positive_class="1",
                                 subject="subject", batch="batch", study="study", time="time")
        plan = make_split_plan(da, "subject_grouped", v=v, seed=rs)
        fa = fit_resample(da, plan, learner, "normalize=zscore", seed=rs, store_refit_data=False)
        fb = fit_resample(db, plan, learner, "normalize=zscore", seed=rs, store_refit_data=False,
                          check_data=False)
        ra, rb = aggregate_repeats(fa, "auc"), aggregate_repeats(fb, "auc")
        if ra.values.size and rb.values.size:
            la.append(ra.values[0])
            ga.append(rb.values[0])
            rep_ids.append(r)
    a, b = np.array(la), np.array(ga)
    dv = DeltaVector(a - b, True, np.array(rep_ids), True, a, b, "auc")
    return delta_from_vector(dv, M_flip=M_flip, seed=seed)


def _columns(ds: Dataset) -> dict:
    out = {}
    for name, col in ds.columns.items():
        out[name] = col.values if col.kind == "numeric" else np.array(col.as_strings(), dtype=object)
    return out


# -- four-arm decomposition -----------------------------------------------------


FOUR_ARMS = ("guarded", "guarded_nofs", "naive", "leaky")


def four_arm_run(
    seed: int = 1,
    n_studies: int = 4,
    n_per_study: int = 60,
    p: int = 400,
    n_signal: int = 40,
    effect: float = 0.25,
    k_select: int = 5,
    leak_sd: float = 1.0,
) -> dict:
    """Four pipelines on synthetic multi-study data under leave-one-study-out.

    guarded: t-test selection inside each training fold; guarded_nofs: no
    selection; naive: selection on all rows before splitting; leaky: naive
    plus a noisy copy of the outcome as a predictor. Signal is spread thinly
    over many features so in-fold selection of a few features loses some of it.
    """
    rng = np.random.default_rng([seed, 4])
    n = n_studies * n_per_study
    X = rng.normal(size=(n, p))
    study = np.repeat(np.arange(n_studies), n_per_study)
    X += rng.normal(scale=0.3, size=(n_studies, p))[study]
    beta = np.zeros(p)
    beta[:n_signal] = effect
    y = (rng.uniform(size=n) < stats.norm.cdf(X @ beta - (X @ beta).mean())).astype(float)
    leak = y + rng.normal(scale=leak_sd, size=n)
    data = {f"g{j + 1}": X[:, j] for j in range(p)}
    data.update(y=y, study=np.array([f"ST{i + 1}" for i in study]))
    genes = [f"g{j + 1}" for j in range(p)]
    ds = Dataset.from_arrays(data, outcome="y", predictors=genes, positive_class="1", study="study")
    plan = make_split_plan(ds, "study_loocv", seed=seed)
    learner = LearnerSpec("logistic_elastic_net")
    fs = f"normalize=zscore,select=ttest:{k_select}"
    out = {}
    out["guarded"] = fit_resample(ds, plan, learner, fs, seed=seed, store_refit_data=False)
    out["guarded_nofs"] = fit_resample(ds, plan, learner, "normalize=zscore", seed=seed, store_refit_data=False)
    out["naive"] = fit_resample(ds, plan, learner, fs, seed=seed, guarded=False, store_refit_data=False)
    data["leak_global_y"] = leak
    ds_l = Dataset.from_arrays(data, outcome="y", predictors=genes + ["leak_global_y"], positive_class="1",
                               study="study")
    plan_l = make_split_plan(ds_l, "study_loocv", seed=seed)
    fs_l = f"normalize=zscore,select=ttest:{k_select + 1}"
    out["leaky"] = fit_resample(ds_l, plan_l, learner, fs_l, seed=seed, guarded=False, store_refit_data=False)
    return {arm: fr.aggregate()["auc"]["mean"] for arm, fr in out.items()}
