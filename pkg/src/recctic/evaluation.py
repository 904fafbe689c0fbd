"""Held-out metrics: NLL, cross-entropy of final infections, infector recovery.

Each metric can be conditioned on the start of the test episodes: only the
infections before ``tau`` are given, and the metric scores the rest.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .episodes import Cascade, Episode, censor
from .generator import simulate_infections
from .grad import UsageError
from .inference import infector_probabilities, log_importance_weights, logsumexp_mean
from .kernels import NEG_INF
from .models import CascadeModel

LEVEL1_EPS = 1e-9
CE_CLAMP = 1e-6
METRICS = ("nll", "ce", "inf")


@dataclass
class MetricsReport:
    """One metric at one conditioning level.

    ``stderr`` is the Monte-Carlo standard error of ``value`` (zero when the
    metric is computed exactly); ``episode_stderr`` is the spread across
    test episodes.
    """

    metric: str
    value: float
    stderr: float
    tau: float
    level: int | None = None
    n_episodes: int = 0
    samples: int | None = None
    n_sims: int | None = None
    excluded: int = 0
    episode_stderr: float = float("nan")
    wall_ms: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def resolve_condition_level(
    level: int, max_t: float, level2_divisor: float = 10.0, level3_divisor: float = 20.0
) -> float:
    """Censoring time for a conditioning level.

    0: nothing observed; 1: just after the first timestamp;
    2: ``max_t / level2_divisor``; 3: ``max_t / level3_divisor``.
    """
    if max_t <= 0:
        raise UsageError("max_t must be positive")
    if level == 0:
        return 0.0
    if level == 1:
        return 1.0 + LEVEL1_EPS
    if level == 2:
        return max_t / level2_divisor
    if level == 3:
        return max_t / level3_divisor
    raise UsageError(f"unknown conditioning level {level!r}")


def _stderr(values: np.ndarray) -> float:
    if len(values) < 2:
        return float("nan")
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def nll(
    model: CascadeModel,
    episodes: Sequence[Episode],
    samples: int = 100,
    tau: float | None = None,
    seed: int = 0,
    level: int | None = None,
) -> MetricsReport:
    """Mean negative (conditional) log-likelihood of test episodes.

    Episodes whose every sampled trajectory has zero probability are
    excluded and counted.
    """
    t0 = time.perf_counter()
    w = log_importance_weights(model, episodes, samples, tau, seed)
    logp = logsumexp_mean(w)
    ok = np.isfinite(logp) & (logp > NEG_INF / 2)
    vals = -logp[ok]
    S = w.shape[1]
    mc_var = 0.0
    if S > 1 and ok.any():
        # delta method: var(log mean w) ~ var(w) / (S mean(w)^2)
        scaled = np.exp(w[ok] - w[ok].max(axis=1, keepdims=True))
        mc_var = float(np.sum(scaled.var(axis=1, ddof=1) / (S * scaled.mean(axis=1) ** 2)))
    n = int(ok.sum())
    return MetricsReport(
        metric="nll",
        value=float(vals.mean()) if n else float("nan"),
        stderr=math.sqrt(mc_var) / n if n else float("nan"),
        tau=float(tau or 0.0),
        level=level,
        n_episodes=n,
        samples=S,
        excluded=int((~ok).sum()),
        episode_stderr=_stderr(vals),
        wall_ms=1000 * (time.perf_counter() - t0),
    )


def episode_cross_entropy(probs: np.ndarray, infected: np.ndarray) -> float:
    p = np.clip(probs, CE_CLAMP, 1.0 - CE_CLAMP)
    return float(-np.mean(np.where(infected, np.log(p), np.log1p(-p))))


def _ce_gradient(probs: np.ndarray, infected: np.ndarray) -> np.ndarray:
    """Derivative of the episode cross-entropy w.r.t. each node's probability."""
    inside = (probs > CE_CLAMP) & (probs < 1.0 - CE_CLAMP)
    p = np.clip(probs, CE_CLAMP, 1.0 - CE_CLAMP)
    g = -np.where(infected, 1.0 / p, -1.0 / (1.0 - p)) / len(probs)
    return np.where(inside, g, 0.0)


def cross_entropy(
    model: CascadeModel,
    episodes: Sequence[Episode],
    n_sims: int = 1000,
    tau: float | None = None,
    seed: int = 0,
    level: int | None = None,
) -> MetricsReport:
    """Cross-entropy between simulated infection marginals and observed infections.

    Marginals for identical prefixes are simulated once and shared.  The
    Monte-Carlo error linearizes the metric in the per-simulation infection
    indicators.
    """
    t0 = time.perf_counter()
    tau = float(tau or 0.0)
    groups: dict[tuple, list[int]] = {}
    prefixes = {}
    for i, ep in enumerate(episodes):
        prefix = censor(ep, tau)
        key = (tuple(prefix.nodes.tolist()), tuple(prefix.times.tolist()))
        groups.setdefault(key, []).append(i)
        prefixes.setdefault(key, (i, prefix))
    vals = np.empty(len(episodes))
    mc_var = 0.0
    for key, members in groups.items():
        first, prefix = prefixes[key]
        if tau == 0.0:
            hits = simulate_infections(model, n_sims, seed=seed)
        else:
            hits = simulate_infections(model, n_sims, prefix=prefix, tau=tau, seed=[seed, first])
        probs = hits.mean(axis=0)
        grad = np.zeros(model.n_nodes)
        for i in members:
            infected = episodes[i].infected_mask(model.n_nodes)
            vals[i] = episode_cross_entropy(probs, infected)
            grad += _ce_gradient(probs, infected)
        if n_sims > 1:
            mc_var += float(np.var(hits @ grad, ddof=1)) / n_sims
    return MetricsReport(
        metric="ce",
        value=float(vals.mean()),
        stderr=math.sqrt(mc_var) / len(episodes),
        tau=tau,
        level=level,
        n_episodes=len(episodes),
        n_sims=n_sims,
        episode_stderr=_stderr(vals),
        wall_ms=1000 * (time.perf_counter() - t0),
    )


def infector_recovery(
    model: CascadeModel,
    cascades: Sequence[Cascade],
    samples: int = 100,
    tau: float | None = None,
    seed: int = 0,
    level: int | None = None,
) -> MetricsReport:
    """Expected rate of true infectors, over positions infected at or after ``tau``."""
    if any(not isinstance(c, Cascade) for c in cascades):
        raise UsageError("infector recovery needs ground-truth cascades")
    t0 = time.perf_counter()
    mass, counts = infector_probabilities(model, cascades, samples, tau, seed)
    sums = mass.mean(axis=1)
    total = counts.sum()
    value = float(sums.sum() / total) if total else float("nan")
    S = mass.shape[1]
    stderr = 0.0 if total else float("nan")
    if S > 1 and total:
        stderr = float(math.sqrt(np.sum(mass.var(axis=1, ddof=1) / S)) / total)
    n = len(cascades)
    spread = float("nan")
    if n > 1 and total:
        resid = sums - value * counts
        spread = float(math.sqrt((resid**2).sum() / (n * (n - 1))) / counts.mean())
    return MetricsReport(
        metric="inf",
        value=value,
        stderr=stderr,
        tau=float(tau or 0.0),
        level=level,
        n_episodes=n,
        samples=S,
        episode_stderr=spread,
        wall_ms=1000 * (time.perf_counter() - t0),
    )


def evaluate(
    model: CascadeModel,
    episodes: Sequence[Episode],
    metrics: Sequence[str] = METRICS,
    levels: Sequence[int] = (0,),
    cascades: Sequence[Cascade] | None = None,
    samples: int = 100,
    n_sims: int = 1000,
    tau: float | None = None,
    max_t: float | None = None,
    seed: int = 0,
) -> list[MetricsReport]:
    """One report per (metric, level).  ``tau`` overrides every level's censoring time."""
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise UsageError(f"unknown metric(s) {sorted(unknown)}")
    if "inf" in metrics and cascades is None:
        raise UsageError("the inf metric needs a ground-truth file")
    if max_t is None:
        max_t = max(ep.max_time for ep in episodes)
    reports = []
    for metric in metrics:
        for level in levels:
            t = tau if tau is not None else resolve_condition_level(level, max_t)
            if metric == "nll":
                reports.append(nll(model, episodes, samples, t, seed, level))
            elif metric == "ce":
                reports.append(cross_entropy(model, episodes, n_sims, t, seed, level))
            else:
                reports.append(infector_recovery(model, cascades, samples, t, seed, level))
    return reports

