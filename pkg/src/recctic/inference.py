"""Latent-ancestor inference, likelihood evaluation and training.

Everything is built on :func:`rollout`, which walks a padded batch of
episodes position by position.  At each infection it forms the filtering
distribution over earlier infected nodes (logits ``log a - log b``),
draws (or is given) an ancestor, accumulates the joint log-probability of
the infection together with its ancestor, and computes the state of the
new node.  The never-infected terms are added at the end.

For state-free families the per-row quantity ``ll - logq`` does not depend
on the sampled ancestors and is the exact log-likelihood.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import kernels
from .episodes import Bin, Cascade, Episode, make_bin, make_bins
from .grad import DTYPE, Adam, UsageError, clamp_prob
from .models import CascadeModel, build_model

logger = logging.getLogger(__name__)

# rows * width^2 * d above which a batch is split into sub-chunks
CHUNK_BUDGET = 4e7


@dataclass
class Rollout:
    """Per-row results of one pass over a batch (``B`` rows, width ``L``)."""

    ll: torch.Tensor
    logq: torch.Tensor
    log_h: torch.Tensor
    log_g: torch.Tensor
    ancestors: torch.Tensor
    log_pi: torch.Tensor
    joint_terms: torch.Tensor
    h_terms: torch.Tensor
    g_terms: torch.Tensor
    scored: torch.Tensor
    true_prob: torch.Tensor | None = None
    states: torch.Tensor | None = None

    @property
    def log_weight(self) -> torch.Tensor:
        """``log p(D, I) - log q(I)``: the importance weight of the trajectory."""
        return self.log_h + self.log_g


def _as_batch(inf, times, not_inf):
    inf = torch.as_tensor(inf, dtype=torch.long)
    times = torch.as_tensor(times, dtype=DTYPE)
    not_inf = torch.as_tensor(not_inf).to(torch.bool)
    return inf, times, not_inf


def rollout(
    model: CascadeModel,
    inf,
    times,
    not_inf,
    *,
    uniforms=None,
    ancestors=None,
    tau=None,
    true_ancestors=None,
    keep_states: bool = False,
) -> Rollout:
    """Sequential filtering pass over a padded batch.

    ``uniforms`` (B, L) drive inverse-CDF ancestor draws; ``ancestors``
    forces a trajectory instead; with neither, every ancestor is the world
    node (only meaningful for state-free models).  ``tau`` (B,) conditions
    on the prefix infected before it: only positions with ``t >= tau`` are
    scored and sources infected before ``tau`` use the censored kernels.
    """
    inf, times, not_inf = _as_batch(inf, times, not_inf)
    B, L = inf.shape
    valid = inf >= 0
    lengths = valid.sum(1)
    nodes = inf.clamp_min(0)
    tt = torch.where(valid, times, torch.zeros_like(times))
    if tau is None:
        tau = torch.zeros(B, dtype=DTYPE)
    tau = torch.as_tensor(tau, dtype=DTYPE).expand(B)
    conditional = bool(torch.any(tau > 0))
    if uniforms is not None:
        uniforms = torch.as_tensor(uniforms, dtype=DTYPE)
    if ancestors is not None:
        ancestors = torch.as_tensor(ancestors, dtype=torch.long).clamp_min(0)
    if true_ancestors is not None:
        true_ancestors = torch.as_tensor(true_ancestors, dtype=torch.long).clamp_min(0)

    rows = torch.arange(B)
    zero = torch.zeros(B, dtype=DTYPE)
    states = [model.initial_state(B)] if model.stateful else None
    anc_cols = [torch.zeros(B, dtype=torch.long)]
    lp_cols, joint_cols, h_cols = [zero], [zero], [zero]
    true_cols = [torch.ones(B, dtype=DTYPE)]
    scored_cols = [torch.zeros(B, dtype=torch.bool)]

    for t in range(1, L):
        act = lengths > t
        v = nodes[:, t : t + 1]
        src = nodes[:, :t]
        zp = torch.stack(states, 1) if states is not None else None
        k = clamp_prob(torch.sigmoid(model.k_logits(src, v, zp)))
        r = torch.exp(model.log_rates(src, v))
        dt = torch.where(act[:, None], tt[:, t : t + 1] - tt[:, :t], torch.ones_like(k))
        la = kernels.log_a(k, r, dt)
        lb = kernels.log_b(k, r, dt)
        if conditional:
            den = kernels.log_censor_denominator(k, r, tt[:, :t], tau[:, None])
            la, lb = la - den, lb - den
        logits = la - lb
        log_pi = torch.log_softmax(logits, dim=-1)

        if ancestors is not None:
            u = ancestors[:, t].clamp_max(t - 1)
        elif uniforms is not None:
            cdf = torch.cumsum(log_pi.detach().exp(), dim=-1)
            u = (cdf < uniforms[:, t : t + 1]).sum(-1).clamp_max(t - 1)
        else:
            u = torch.zeros(B, dtype=torch.long)
        u = torch.where(act, u, torch.zeros_like(u))

        lb_sum = lb.sum(-1)
        scored = act & (tt[:, t] >= tau)
        lp_u = log_pi[rows, u]
        joint = la[rows, u] - lb[rows, u] + lb_sum
        logh = lb_sum + torch.logsumexp(logits, dim=-1)
        anc_cols.append(u)
        scored_cols.append(scored)
        lp_cols.append(torch.where(scored, lp_u, zero))
        joint_cols.append(torch.where(scored, joint, zero))
        h_cols.append(torch.where(scored, logh, zero))
        if true_ancestors is not None:
            tu = true_ancestors[:, t].clamp_max(t - 1)
            true_cols.append(torch.where(act, log_pi[rows, tu].exp(), zero))
        if states is not None:
            states.append(model.update_state(zp[rows, u], nodes[:, t]))

    zs = torch.stack(states, 1) if states is not None else None
    k_rows = clamp_prob(torch.sigmoid(model.k_logit_rows(nodes, zs)))
    lg = kernels._sat(torch.log1p(-k_rows))
    if conditional:
        r_rows = torch.exp(model.log_rate_rows(nodes))
        lg = lg - kernels.log_censor_denominator(
            k_rows, r_rows, tt[:, :, None], tau[:, None, None]
        )
    mask = (valid[:, :, None] & not_inf[:, None, :]).to(DTYPE)
    g_terms = (lg * mask).sum(-1)

    log_pi_m = torch.stack(lp_cols, 1)
    joint_m = torch.stack(joint_cols, 1)
    h_m = torch.stack(h_cols, 1)
    log_g = g_terms.sum(-1)
    return Rollout(
        ll=joint_m.sum(1) + log_g,
        logq=log_pi_m.sum(1),
        log_h=h_m.sum(1),
        log_g=log_g,
        ancestors=torch.stack(anc_cols, 1),
        log_pi=log_pi_m,
        joint_terms=joint_m,
        h_terms=h_m,
        g_terms=g_terms,
        scored=torch.stack(scored_cols, 1),
        true_prob=torch.stack(true_cols, 1) if true_ancestors is not None else None,
        states=zs if keep_states else None,
    )


def _bin_tensors(b: Bin):
    return b.inf, b.times, b.not_inf


def _episode_batch(episodes: Sequence[Episode], node_count: int):
    b = make_bin(episodes, node_count)
    return b.inf, b.times, b.not_inf


def chunk_rows(width: int, d: int, rows: int) -> int:
    per_row = max(1, width) ** 2 * max(1, d)
    return max(1, min(rows, int(CHUNK_BUDGET // per_row)))


def trajectory_uniforms(seed: int, keys: Sequence, lengths: Sequence[int], width: int, samples: int = 1) -> np.ndarray:
    """Uniform draws for ancestor sampling, one RNG stream per key.

    Row ``i * samples + s`` holds sample ``s`` of key ``keys[i]``.  A key's
    draws depend only on ``(seed, key)`` and the episode length, never on
    batch composition.
    """
    out = np.ones((len(keys) * samples, width))
    for i, (key, n) in enumerate(zip(keys, lengths)):
        key = key if isinstance(key, (tuple, list)) else (key,)
        rng = np.random.default_rng([seed, *key])
        out[i * samples : (i + 1) * samples, :n] = rng.random((samples, n))
    return out


# -- single-episode views ----------------------------------------------------


@dataclass
class AncestorDistribution:
    """Filtering distribution over the infector of one position."""

    logits: torch.Tensor
    log_probs: torch.Tensor

    @property
    def probs(self) -> torch.Tensor:
        return self.log_probs.exp()


def ancestor_posterior(
    model: CascadeModel, episode: Episode, position: int, states=None, tau: float = 0.0
) -> AncestorDistribution:
    """Distribution of the infector of ``position`` given earlier nodes and states."""
    if not 1 <= position < len(episode):
        raise UsageError("position must be in [1, len(episode))")
    nodes = torch.as_tensor(episode.nodes[:position])
    times = torch.as_tensor(episode.times[:position], dtype=DTYPE)
    v = torch.as_tensor(episode.nodes[position])
    if model.stateful:
        if states is None:
            raise UsageError("stateful model needs the states of earlier positions")
        states = torch.as_tensor(states, dtype=DTYPE)[:position]
    k = clamp_prob(torch.sigmoid(model.k_logits(nodes, v, states)))
    r = torch.exp(model.log_rates(nodes, v))
    dt = float(episode.times[position]) - times
    la = kernels.log_a(k, r, dt)
    lb = kernels.log_b(k, r, dt)
    logits = la - lb
    return AncestorDistribution(logits, torch.log_softmax(logits, -1))


def sample_trajectory(model: CascadeModel, episode: Episode, seed: int):
    """Draw an ancestor vector from the filtering distribution.

    Returns ``(cascade, log_q, states)``; ``states`` is ``None`` for
    state-free models.
    """
    inf, times, not_inf = _episode_batch([episode], model.n_nodes)
    u = np.random.default_rng(seed).random((1, len(episode)))
    with torch.no_grad():
        res = rollout(model, inf, times, not_inf, uniforms=u, keep_states=True)
    cascade = Cascade(episode, res.ancestors[0].numpy())
    states = res.states[0] if res.states is not None else None
    return cascade, float(res.logq[0]), states


def joint_log_prob(model: CascadeModel, cascade: Cascade, tau: float | None = None):
    """``log p(D, I)`` of a cascade (differentiable) and its rollout decomposition."""
    inf, times, not_inf = _episode_batch([cascade.episode], model.n_nodes)
    res = rollout(
        model,
        inf,
        times,
        not_inf,
        ancestors=cascade.ancestors[None, :],
        tau=None if tau is None else torch.tensor([tau], dtype=DTYPE),
    )
    return res.ll[0], res


def exact_log_likelihood(model: CascadeModel, episodes: Sequence[Episode], tau: float | None = None) -> torch.Tensor:
    """Exact per-episode ``log p(D)`` (or ``log p(D | D^tau)``) for state-free models."""
    if model.stateful:
        raise UsageError("exact likelihood needs marginalization for stateful models")
    inf, times, not_inf = _episode_batch(episodes, model.n_nodes)
    tau_t = None if tau is None else torch.full((len(episodes),), float(tau), dtype=DTYPE)
    return rollout(model, inf, times, not_inf, tau=tau_t).log_weight


# -- importance-sampled evaluation --------------------------------------------


def _sorted_chunks(episodes: Sequence[Episode], d: int, samples: int):
    order = sorted(range(len(episodes)), key=lambda i: -len(episodes[i]))
    start = 0
    while start < len(order):
        width = len(episodes[order[start]])
        n = max(1, chunk_rows(width, d, len(order) * samples) // samples)
        yield order[start : start + n]
        start += n


def log_importance_weights(
    model: CascadeModel,
    episodes: Sequence[Episode],
    samples: int = 100,
    tau: float | Sequence[float] | None = None,
    seed: int = 0,
) -> np.ndarray:
    """``log p(D, I_s) - log q(I_s)`` for ``samples`` filtering trajectories per episode.

    Shape ``(len(episodes), S)``; state-free models use ``S = 1`` since
    every trajectory gives the exact likelihood.
    """
    S = samples if model.stateful else 1
    if S < 1:
        raise UsageError("samples must be >= 1")
    taus = _per_episode_tau(tau, len(episodes))
    out = np.empty((len(episodes), S))
    with torch.no_grad():
        for idx in _sorted_chunks(episodes, model.d, S):
            eps = [episodes[i] for i in idx]
            inf, times, not_inf = _episode_batch(eps, model.n_nodes)
            inf, times, not_inf = (np.repeat(a, S, axis=0) for a in (inf, times, not_inf))
            tau_rows = torch.as_tensor(np.repeat(taus[idx], S), dtype=DTYPE)
            u = None
            if model.stateful:
                u = trajectory_uniforms(seed, idx, [len(e) for e in eps], inf.shape[1], S)
            res = rollout(model, inf, times, not_inf, uniforms=u, tau=tau_rows)
            out[idx] = res.log_weight.reshape(len(idx), S).numpy()
    return out


def importance_log_likelihood(
    model: CascadeModel,
    episodes: Sequence[Episode],
    samples: int = 100,
    tau: float | Sequence[float] | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Per-episode ``log p(D)`` (or ``log p(D | D^tau)``) estimates.

    For stateful models this is ``log mean_s exp(log p(D, I_s) - log q(I_s))``
    over ``samples`` filtering trajectories; state-free models are exact.
    """
    w = log_importance_weights(model, episodes, samples, tau, seed)
    return logsumexp_mean(w)


def logsumexp_mean(w: np.ndarray) -> np.ndarray:
    top = np.max(w, axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    return (top[:, 0] + np.log(np.mean(np.exp(w - top), axis=1)))


def infector_probabilities(
    model: CascadeModel,
    cascades: Sequence[Cascade],
    samples: int = 100,
    tau: float | Sequence[float] | None = None,
    seed: int = 0,
):
    """Posterior mass on the true infector, per scored position.

    Returns ``(mass, counts)``: ``mass[i, s]`` sums, over the positions of
    cascade ``i`` with ``t >= tau`` (position 0 excluded), the probability
    that the filtering distribution along sampled past ``s`` gives to the
    true infector; ``counts[i]`` is the number of such positions.
    State-free models use a single sample.
    """
    S = samples if model.stateful else 1
    if S < 1:
        raise UsageError("samples must be >= 1")
    episodes = [c.episode for c in cascades]
    taus = _per_episode_tau(tau, len(episodes))
    mass = np.zeros((len(cascades), S))
    counts = np.zeros(len(cascades), dtype=np.int64)
    with torch.no_grad():
        for idx in _sorted_chunks(episodes, model.d, S):
            eps = [episodes[i] for i in idx]
            inf, times, not_inf = _episode_batch(eps, model.n_nodes)
            true = np.zeros_like(inf)
            for row, i in enumerate(idx):
                true[row, : len(eps[row])] = cascades[i].ancestors
            inf, times, not_inf, true = (np.repeat(a, S, axis=0) for a in (inf, times, not_inf, true))
            tau_rows = torch.as_tensor(np.repeat(taus[idx], S), dtype=DTYPE)
            u = None
            if model.stateful:
                u = trajectory_uniforms(seed, idx, [len(e) for e in eps], inf.shape[1], S)
            res = rollout(
                model, inf, times, not_inf, uniforms=u, tau=tau_rows, true_ancestors=true
            )
            mass[idx] = (res.true_prob * res.scored).sum(1).reshape(len(idx), S).numpy()
            counts[idx] = res.scored.reshape(len(idx), S, -1)[:, 0].sum(1).numpy()
    return mass, counts


def _per_episode_tau(tau, n: int) -> np.ndarray:
    if tau is None:
        return np.zeros(n)
    arr = np.asarray(tau, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(n, float(arr))
    if np.any(arr < 0):
        raise UsageError("tau must be non-negative")
    return arr


# -- training ----------------------------------------------------------------


class BaselineBuffer:
    """Moving average of ``ll - logq - 1`` per episode over past epochs."""

    def __init__(self, length: int = 100):
        if length < 1:
            raise ValueError("baseline window must be >= 1")
        self.length = length
        self._bins: dict[int, deque] = {}

    def value(self, ibin: int, rows: int) -> np.ndarray:
        buf = self._bins.get(ibin)
        if not buf:
            return np.zeros(rows)
        return np.mean(np.stack(buf), axis=0)

    def push(self, ibin: int, values: np.ndarray) -> None:
        buf = self._bins.setdefault(ibin, deque(maxlen=self.length))
        buf.append(np.asarray(values, dtype=np.float64).copy())

    def __len__(self) -> int:
        return sum(len(b) for b in self._bins.values())


@dataclass
class BinStep:
    """What one bin contributed to an epoch."""

    objective: float
    per_episode: np.ndarray
    grads: dict
    finite: bool = True


def elbo_and_gradient(
    model: CascadeModel,
    b: Bin,
    baseline: np.ndarray | float = 0.0,
    samples: int = 1,
    seed: int = 0,
    epoch: int = 0,
    params: dict | None = None,
) -> BinStep:
    """Score-function estimate of the bin's mean ELBO and its gradient.

    Per row the surrogate is ``stop_grad(ll - logq - 1 - b) * logq + ll``;
    its gradient is an unbiased estimate of the ELBO gradient.  ``grads``
    holds gradients of the *negative* surrogate averaged over rows (ready
    for a minimizing optimizer); ``per_episode`` holds ``ll - logq - 1``
    averaged over samples (the baseline update).
    """
    params = params if params is not None else model.param_groups()
    names = list(params)
    rows, width = b.inf.shape
    K = samples
    lengths = b.lengths
    keys = [(epoch, int(i)) for i in b.index]
    base = np.broadcast_to(np.asarray(baseline, dtype=np.float64), (rows,))
    grads = {n: torch.zeros_like(p) for n, p in params.items()}
    elbo = np.zeros(rows)
    step = chunk_rows(width, model.d, rows * K)
    step = max(1, step // K)
    for start in range(0, rows, step):
        sl = slice(start, start + step)
        n = len(lengths[sl])
        w = int(lengths[sl].max())
        inf, times, not_inf = (np.repeat(a[sl], K, axis=0) for a in (b.inf, b.times, b.not_inf))
        inf, times = inf[:, :w], times[:, :w]
        u = trajectory_uniforms(seed, keys[sl], lengths[sl], w, K)
        res = rollout(model, inf, times, not_inf, uniforms=u)
        signal = (res.ll - res.logq - 1.0).detach()
        weight = signal - torch.as_tensor(np.repeat(base[sl], K), dtype=DTYPE)
        surrogate = weight * res.logq + res.ll
        loss = -surrogate.sum() / (rows * K)
        if not torch.isfinite(loss):
            return BinStep(float("nan"), np.full(rows, np.nan), grads, finite=False)
        part = torch.autograd.grad(loss, [params[m] for m in names], allow_unused=True)
        for m, g in zip(names, part):
            if g is not None:
                grads[m] += g
        elbo[sl] = res.log_weight.detach().reshape(n, K).mean(1).numpy()
    return BinStep(float(elbo.mean()), elbo - 1.0, grads)


def loglik_and_gradient(model: CascadeModel, b: Bin, params: dict | None = None) -> BinStep:
    """Exact mean log-likelihood of a bin and the gradient of its negative."""
    params = params if params is not None else model.param_groups()
    names = list(params)
    rows, width = b.inf.shape
    lengths = b.lengths
    grads = {n: torch.zeros_like(p) for n, p in params.items()}
    ll = np.zeros(rows)
    step = chunk_rows(width, model.d, rows)
    for start in range(0, rows, step):
        sl = slice(start, start + step)
        w = int(lengths[sl].max())
        res = rollout(model, b.inf[sl, :w], b.times[sl, :w], b.not_inf[sl])
        loss = -res.log_weight.sum() / rows
        if not torch.isfinite(loss):
            return BinStep(float("nan"), np.full(rows, np.nan), grads, finite=False)
        part = torch.autograd.grad(loss, [params[m] for m in names], allow_unused=True)
        for m, g in zip(names, part):
            if g is not None:
                grads[m] += g
        ll[sl] = res.log_weight.detach().numpy()
    return BinStep(float(ll.mean()), ll, grads)


@dataclass
class TrainConfig:
    d: int = 50
    batch_size: int = 512
    samples: int = 1
    epochs: int = 100
    lr: float = 1e-2
    seed: int = 0
    cell: str = "gru"
    b_length: int = 100
    val_samples: int = 20
    val_every: int = 1

    def __post_init__(self):
        for name in ("d", "batch_size", "samples", "b_length", "val_samples", "val_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.lr <= 0:
            raise ValueError("epochs must be >= 0 and lr > 0")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, model: CascadeModel, epoch: int):
        super().__init__(message)
        self.model = model
        self.epoch = epoch


@dataclass
class TrainResult:
    model: CascadeModel
    trace: list[dict] = field(default_factory=list)
    epoch: int = 0
    best_epoch: int | None = None
    skipped_bins: int = 0
    optimizer: dict | None = None


def train(
    family: str | CascadeModel,
    episodes: Sequence[Episode],
    config: TrainConfig,
    node_count: int | None = None,
    validation: Sequence[Episode] | None = None,
    start_epoch: int = 0,
    optimizer_state: dict | None = None,
    on_step: Callable[[dict], None] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Fit a model by minibatch ADAM.

    ``recctic`` follows the score-function ELBO procedure with a per-episode
    moving-average baseline; ``ctic``/``embctic`` ascend the exact
    log-likelihood.  With ``validation`` episodes the best-scoring
    parameters are kept.  ``on_step`` is called before each update with the
    current (pre-update) model and the bin objective.
    """
    if not episodes:
        raise UsageError("training needs at least one episode")
    if isinstance(family, CascadeModel):
        model = family
    else:
        if node_count is None:
            raise UsageError("node_count is required to build a new model")
        model = build_model(family, node_count, config.d, config.cell, config.seed)
    params = model.param_groups()
    opt = Adam(params, lr=config.lr)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    bins = make_bins(episodes, config.batch_size, model.n_nodes)
    baseline = BaselineBuffer(config.b_length)
    result = TrainResult(model, epoch=start_epoch)
    best_val = math.inf
    best_state = None
    last_good = copy.deepcopy(model.state_dict())

    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for ibin, b in enumerate(bins):
            if model.stateful:
                step = elbo_and_gradient(
                    model,
                    b,
                    baseline.value(ibin, len(b)),
                    config.samples,
                    config.seed,
                    epoch,
                    params,
                )
            else:
                step = loglik_and_gradient(model, b, params)
            if not step.finite:
                result.skipped_bins += 1
                continue
            if on_step is not None:
                on_step({"epoch": epoch, "bin": ibin, "objective": step.objective, "model": model})
            if not opt.step(step.grads):
                result.skipped_bins += 1
                continue
            if model.stateful:
                baseline.push(ibin, step.per_episode)
            total += step.objective * len(b)
            count += len(b)

        if not all(torch.isfinite(p).all() for p in params.values()):
            model.load_state_dict(last_good)
            raise TrainingDiverged(f"non-finite parameters at epoch {epoch}", model, epoch)
        last_good = copy.deepcopy(model.state_dict())

        row = {"epoch": epoch, "elbo": total / count if count else float("nan"), "val_nll": None}
        if validation and (epoch + 1) % config.val_every == 0:
            val = -importance_log_likelihood(
                model, validation, config.val_samples, seed=config.seed
            ).mean()
            row["val_nll"] = float(val)
            if val < best_val:
                best_val = val
                best_state = copy.deepcopy(model.state_dict())
                result.best_epoch = epoch
        row["wall_ms"] = round(1000 * (time.perf_counter() - t0), 3)
        result.trace.append(row)
        result.epoch = epoch + 1
        logger.info("epoch %d objective %.4f val_nll %s", epoch, row["elbo"], row["val_nll"])
        if on_epoch is not None:
            on_epoch({**row, "model": model, "optimizer": opt.state_dict()})

    if best_state is not None:
        model.load_state_dict(best_state)
    result.optimizer = opt.state_dict()
    return result


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
