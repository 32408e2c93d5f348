"""Paired leaky-versus-guarded performance inflation.

Repeat-level deltas between two fits on the same folds are summarized by
their mean and a Huber M-estimate, with BCa bootstrap intervals and a
sign-flip randomization test. How much inference is reported depends on
the number of paired repeats.
"""
from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .metrics import HIGHER_IS_BETTER, canonical_metric
from .resample import FitResult, aggregate_repeats

log = logging.getLogger(__name__)

MAD_SCALE = 1.4826
EXACT_MAX_R = 15
EXCHANGEABILITY = ("iid", "blocked_time", "by_group", "within_batch")

TIER_D = "D_insufficient"
TIER_C = "C_signflip"
TIER_B = "B_signflip_ci"
TIER_A = "A_full_inference"


class DeltaError(ValueError):
    pass


@dataclass(frozen=True)
class HuberConfig:
    k: float = 1.345
    scale_factor: float = MAD_SCALE
    max_iter: int = 100
    tol: float = 1e-10

    def __post_init__(self):
        if self.k <= 0:
            raise DeltaError("Huber k must be positive")


def mad_scale(x, factor: float = MAD_SCALE) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(factor * np.median(np.abs(x - np.median(x))))


def huber_location(deltas, cfg: HuberConfig = HuberConfig()) -> float:
    """Huber M-estimate of location with the scale fixed at 1.4826 * MAD.

    Solved by IRLS from the median; returns the median when MAD is zero.
    """
    x = np.asarray(deltas, dtype=np.float64)
    if x.size == 0:
        raise DeltaError("no deltas")
    mu = float(np.median(x))
    s = mad_scale(x, cfg.scale_factor)
    if s == 0:
        return mu
    c = cfg.k * s
    for _ in range(cfg.max_iter):
        r = np.abs(x - mu)
        w = np.where(r <= c, 1.0, c / np.maximum(r, 1e-300))
        new = float(np.sum(w * x) / np.sum(w))
        if abs(new - mu) < cfg.tol:
            return new
        mu = new
    return mu


def huber_rows(D: np.ndarray, cfg: HuberConfig = HuberConfig()) -> np.ndarray:
    """:func:`huber_location` applied to every row of ``D`` at once."""
    D = np.asarray(D, dtype=np.float64)
    med = np.median(D, axis=1)
    s = cfg.scale_factor * np.median(np.abs(D - med[:, None]), axis=1)
    mu = med.copy()
    live = s > 0
    c = (cfg.k * s)[:, None]
    for _ in range(cfg.max_iter):
        if not live.any():
            break
        r = np.abs(D[live] - mu[live, None])
        w = np.where(r <= c[live], 1.0, c[live] / np.maximum(r, 1e-300))
        new = np.sum(w * D[live], axis=1) / np.sum(w, axis=1)
        done = np.abs(new - mu[live]) < cfg.tol
        mu[live] = new
        idx = np.flatnonzero(live)
        live[idx[done]] = False
    return mu


def _estimator(name: str, cfg: HuberConfig):
    if name == "mean":
        return lambda x: float(np.mean(x)), lambda D: D.mean(axis=1)
    if name == "huber":
        return lambda x: huber_location(x, cfg), lambda D: huber_rows(D, cfg)
    raise DeltaError(f"unknown estimator {name!r}")


def bca_interval(
    deltas,
    estimator: str = "mean",
    M_boot: int = 2000,
    level: float = 0.95,
    seed: int = 1,
    cfg: HuberConfig = HuberConfig(),
) -> tuple[float, float]:
    """Bias-corrected and accelerated bootstrap interval.

    The interval is widened if needed so it always contains the point
    estimate.
    """
    x = np.asarray(deltas, dtype=np.float64)
    R = x.size
    if R < 2:
        raise DeltaError("BCa needs at least 2 values")
    one, many = _estimator(estimator, cfg)
    theta = one(x)
    rng = np.random.default_rng([seed, 2718])
    boot = many(x[rng.integers(0, R, size=(M_boot, R))])
    if np.ptp(boot) == 0:
        return theta, theta
    prop = np.mean(boot < theta) + 0.5 * np.mean(boot == theta)
    prop = min(max(prop, 1.0 / (M_boot + 1)), M_boot / (M_boot + 1.0))
    z0 = norm.ppf(prop)
    jack = many(np.stack([np.delete(x, i) for i in range(R)]))
    d = jack.mean() - jack
    den = 6.0 * np.sum(d * d) ** 1.5
    a = float(np.sum(d ** 3) / den) if den > 0 else 0.0
    zs = norm.ppf([(1 - level) / 2, (1 + level) / 2])
    adj = norm.cdf(z0 + (z0 + zs) / (1 - a * (z0 + zs)))
    lo, hi = np.quantile(boot, adj)
    return float(min(lo, theta)), float(max(hi, theta))


@dataclass
class SignFlipResult:
    T_observed: float
    p_value: float
    method: str
    M_flip: int
    exchangeability: str
    block_length: int | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _blocks(R: int, length: int) -> np.ndarray:
    return np.arange(R) // length


def sign_flip_test(
    deltas,
    exchangeability: str = "iid",
    M_flip: int = 10000,
    seed: int = 1,
    block_length: int | None = None,
) -> SignFlipResult:
    """One-sided test of ``mean(delta) > 0`` by randomizing signs.

    Up to 15 exchangeable units all sign patterns are enumerated and the
    observed pattern counts toward the p-value; beyond that ``M_flip``
    random patterns give ``(b + 1) / (M_flip + 1)``. ``blocked_time`` flips
    contiguous blocks of ``ceil(sqrt(R))`` repeats together.
    """
    x = np.asarray(deltas, dtype=np.float64)
    R = x.size
    if R == 0:
        raise DeltaError("no deltas")
    if exchangeability not in EXCHANGEABILITY:
        raise DeltaError(f"exchangeability must be one of {EXCHANGEABILITY}")
    notes = []
    scheme = exchangeability
    if exchangeability in ("by_group", "within_batch"):
        msg = f"{exchangeability} exchangeability is not implemented; using iid sign flips"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
        scheme = "iid"
    if scheme == "blocked_time":
        L = block_length or math.ceil(math.sqrt(R))
        unit = _blocks(R, L)
    else:
        L = None
        unit = np.arange(R)
    n_units = int(unit.max()) + 1
    sums = np.bincount(unit, weights=x, minlength=n_units)
    T = float(x.mean())
    eps = 1e-12 * max(1.0, abs(T))
    if n_units <= EXACT_MAX_R:
        S = np.array(list(itertools.product((1.0, -1.0), repeat=n_units)))
        Tp = S @ sums / R
        p = float(np.mean(Tp >= T - eps))
        return SignFlipResult(T, p, "exact" if scheme == "iid" else "block", 2 ** n_units, exchangeability, L, notes)
    rng = np.random.default_rng([seed, 31337])
    b = 0
    done = 0
    while done < M_flip:
        m = min(50000, M_flip - done)
        S = rng.choice((-1.0, 1.0), size=(m, n_units))
        b += int(np.sum(S @ sums / R >= T - eps))
        done += m
    p = (b + 1.0) / (M_flip + 1.0)
    return SignFlipResult(T, p, "monte_carlo" if scheme == "iid" else "block", M_flip, exchangeability, L, notes)


def assign_tier(R_eff: int, paired: bool) -> str:
    if not paired or R_eff < 5:
        return TIER_D
    if R_eff < 10:
        return TIER_C
    if R_eff < 20:
        return TIER_B
    return TIER_A


@dataclass
class DeltaVector:
    deltas: np.ndarray
    paired: bool
    repeats: np.ndarray
    higher_is_better: bool
    leaky: np.ndarray
    guarded: np.ndarray
    metric: str

    @property
    def R_eff(self) -> int:
        return int(self.deltas.size) if self.paired else 0


def pair_fits(fit_leaky: FitResult, fit_guarded: FitResult, metric: str | None = None,
              higher_is_better: bool | None = None) -> DeltaVector:
    """Repeat-level deltas (positive = inflation); paired only on identical folds."""
    metric = canonical_metric(metric or fit_leaky.metric_names[0])
    for name, fr in (("leaky", fit_leaky), ("guarded", fit_guarded)):
        if metric not in fr.metric_names:
            raise DeltaError(f"metric {metric!r} missing from the {name} fit")
    hib = HIGHER_IS_BETTER[metric] if higher_is_better is None else higher_is_better
    sign = 1.0 if hib else -1.0
    a = aggregate_repeats(fit_leaky, metric)
    b = aggregate_repeats(fit_guarded, metric)
    paired = fit_leaky.plan_hash == fit_guarded.plan_hash
    if paired:
        common = np.intersect1d(a.repeats, b.repeats)
        va = a.values[np.searchsorted(a.repeats, common)]
        vb = b.values[np.searchsorted(b.repeats, common)]
        return DeltaVector(sign * (va - vb), True, common, hib, va, vb, metric)
    return DeltaVector(np.zeros(0), False, np.zeros(0, dtype=np.int64), hib, a.values, b.values, metric)


@dataclass
class DeltaLsiResult:
    metric: str
    delta_metric: float
    delta_lsi: float
    ci_metric: tuple[float, float] | None
    ci_lsi: tuple[float, float] | None
    p_signflip: float | None
    tier: str
    inference_ok: bool
    R_eff: int
    paired: bool
    leaky_mean: float
    guarded_mean: float
    exchangeability: str
    deltas: np.ndarray
    signflip: SignFlipResult | None = None
    notes: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "delta_metric": self.delta_metric,
            "delta_lsi": self.delta_lsi,
            "ci_metric": None if self.ci_metric is None else list(self.ci_metric),
            "ci_lsi": None if self.ci_lsi is None else list(self.ci_lsi),
            "p_signflip": self.p_signflip,
            "tier": self.tier,
            "inference_ok": self.inference_ok,
            "R_eff": self.R_eff,
            "paired": self.paired,
            "leaky_mean": self.leaky_mean,
            "guarded_mean": self.guarded_mean,
            "exchangeability": self.exchangeability,
            "deltas": self.deltas.tolist(),
            "signflip": None if self.signflip is None else self.signflip.to_dict(),
            "notes": self.notes,
            "config": self.config,
        }

    def summary(self) -> str:
        def ci(c):
            return "n/a" if c is None else f"[{c[0]:.4f}, {c[1]:.4f}]"

        lines = [
            f"Delta-LSI ({self.metric}) | R_eff = {self.R_eff} | paired = {self.paired}",
            f"  leaky mean {self.leaky_mean:.4f}, guarded mean {self.guarded_mean:.4f}",
            f"  delta_metric {self.delta_metric:.4f} {ci(self.ci_metric)}",
            f"  delta_lsi    {self.delta_lsi:.4f} {ci(self.ci_lsi)}",
            f"  sign-flip p: {'n/a' if self.p_signflip is None else f'{self.p_signflip:.4g}'}",
            f"  inference tier: {self.tier}",
        ]
        if self.tier == TIER_D:
            lines.append("  inference suppressed (unpaired/insufficient repeats)")
        return "\n".join(lines)


def delta_from_vector(
    dv: DeltaVector,
    M_boot: int = 2000,
    M_flip: int = 10000,
    exchangeability: str = "iid",
    seed: int = 1,
    cfg: HuberConfig = HuberConfig(),
    block_length: int | None = None,
) -> DeltaLsiResult:
    notes = []
    if dv.paired:
        d = dv.deltas
        dm = float(d.mean()) if d.size else float("nan")
        dl = huber_location(d, cfg) if d.size else float("nan")
        if d.size and mad_scale(d, cfg.scale_factor) == 0:
            notes.append("MAD of deltas is zero; Huber estimate is the median")
    else:
        notes.append("fits do not share fold membership; point estimates only")
        sign = 1.0 if dv.higher_is_better else -1.0
        dm = float(sign * (dv.leaky.mean() - dv.guarded.mean()))
        dl = float(sign * (huber_location(dv.leaky, cfg) - huber_location(dv.guarded, cfg)))
    R = dv.R_eff
    tier = assign_tier(R, dv.paired)
    p = ci_m = ci_l = None
    sf = None
    if tier != TIER_D:
        sf = sign_flip_test(dv.deltas, exchangeability, M_flip, seed, block_length)
        p = sf.p_value
        notes.extend(sf.notes)
    if tier in (TIER_B, TIER_A):
        ci_m = bca_interval(dv.deltas, "mean", M_boot, seed=seed, cfg=cfg)
        ci_l = bca_interval(dv.deltas, "huber", M_boot, seed=seed, cfg=cfg)
    ok = tier == TIER_A and all(np.isfinite(v) for v in (dm, dl, p, *ci_m, *ci_l))
    sign = 1.0 if dv.higher_is_better else -1.0
    return DeltaLsiResult(
        metric=dv.metric,
        delta_metric=dm,
        delta_lsi=dl,
        ci_metric=ci_m,
        ci_lsi=ci_l,
        p_signflip=p,
        tier=tier,
        inference_ok=bool(ok),
        R_eff=R,
        paired=dv.paired,
        leaky_mean=float(dv.leaky.mean()) if dv.leaky.size else float("nan"),
        guarded_mean=float(dv.guarded.mean()) if dv.guarded.size else float("nan"),
        exchangeability=exchangeability,
        deltas=dv.deltas,
        signflip=sf,
        notes=notes,
        config={"M_boot": M_boot, "M_flip": M_flip, "seed": seed, "huber_k": cfg.k,
                "sign": sign, "block_length": block_length},
    )


def delta_lsi(
    fit_leaky: FitResult,
    fit_guarded: FitResult,
    metric: str | None = None,
    M_boot: int = 2000,
    M_flip: int = 10000,
    exchangeability: str = "iid",
    seed: int = 1,
    cfg: HuberConfig = HuberConfig(),
    block_length: int | None = None,
) -> DeltaLsiResult:
    """Inflation of ``fit_leaky`` over ``fit_guarded`` with tiered inference."""
    dv = pair_fits(fit_leaky, fit_guarded, metric)
    res = delta_from_vector(dv, M_boot, M_flip, exchangeability, seed, cfg, block_length)
    if dv.paired:
        every = {f.repeat for f in fit_leaky.folds} | {f.repeat for f in fit_guarded.folds}
        dropped = sorted(every - set(dv.repeats.tolist()))
        if dropped:
            res.notes.append(f"repeats without a value in both arms were dropped: {dropped}")
    return res
