"""Event-driven cascade simulation.

The infectious node with the smallest tentative time is popped, records
its infector, then makes one Bernoulli attempt on every node whose current
tentative time is later than its own; a success draws an exponential delay
and keeps it if it beats the target's current time (the target's state is
then recomputed from the new infector).  The priority queue uses lazy
re-insertion with staleness checks.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .episodes import WORLD, Cascade, Episode
from .grad import UsageError
from .models import CascadeModel, Simulator


@dataclass
class SimulationConfig:
    seed: int | None = 0
    max_infected: int | None = None

    def __post_init__(self):
        if self.max_infected is not None and self.max_infected < 1:
            raise ValueError("max_infected must be >= 1")


@dataclass
class Prefix:
    """A right-censored start: episode ``D^tau``, its ancestors and node states."""

    episode: Episode
    ancestors: np.ndarray
    states: np.ndarray | None = None


def _as_simulator(model) -> Simulator:
    return model if isinstance(model, Simulator) else model.simulator()


def simulate(
    sim: Simulator,
    rng: np.random.Generator,
    prefix: Prefix | None = None,
    tau: float = 0.0,
    cap: int | None = None,
) -> Cascade:
    N = sim.n_nodes
    cap = 4 * N if cap is None else cap
    t = np.full(N, math.inf)
    done = np.zeros(N, dtype=bool)
    fixed = np.zeros(N, dtype=bool)
    frm = np.zeros(N, dtype=np.int64)
    state: dict[int, np.ndarray | None] = {}
    heap: list[tuple[float, int]] = []

    if prefix is None:
        t[WORLD] = 0.0
        state[WORLD] = sim.z0
        heap.append((0.0, WORLD))
    else:
        ep = prefix.episode
        if len(ep) > 1 and ep.times[-1] >= tau:
            raise UsageError("prefix contains infections at or after tau")
        if len(prefix.ancestors) != len(ep):
            raise UsageError("prefix ancestors do not match the prefix episode")
        if sim.stateful and (prefix.states is None or len(prefix.states) != len(ep)):
            raise UsageError("stateful simulation needs one state per prefix node")
        for j, (u, tu) in enumerate(zip(ep.nodes, ep.times)):
            t[u] = tu
            fixed[u] = True
            frm[u] = prefix.ancestors[j]
            state[int(u)] = prefix.states[j] if sim.stateful else None
            heap.append((float(tu), int(u)))
        heapq.heapify(heap)

    nodes: list[int] = []
    times: list[float] = []
    anc: list[int] = []
    truncated = False
    while heap:
        tu, u = heapq.heappop(heap)
        if done[u] or tu != t[u]:
            continue
        if len(nodes) >= cap:
            truncated = True
            break
        done[u] = True
        pos = len(nodes)
        nodes.append(u)
        times.append(tu)
        anc.append(int(frm[u]))

        k = sim.k_row(u, state[u])
        r = sim.R[u]
        coin = rng.random(N)
        clock = rng.exponential(1.0, size=N)
        cand = (~done) & (~fixed) & (t > tu)
        if tu < tau:
            # censored source: it is known not to have reached anyone before tau
            surv = k * np.exp(-r * (tau - tu))
            k_eff = surv / (surv + 1.0 - k)
            start = tau
        else:
            k_eff = k
            start = tu
        hit = cand & (coin < k_eff)
        if not hit.any():
            continue
        # memoryless clock restarted at tau for censored sources
        arrival = start + clock / r
        better = hit & (arrival < t)
        for v in np.flatnonzero(better):
            t[v] = arrival[v]
            frm[v] = pos
            state[int(v)] = sim.step(state[u], int(v)) if sim.stateful else None
            heapq.heappush(heap, (float(arrival[v]), int(v)))

    episode = Episode(np.asarray(nodes), np.asarray(times))
    return Cascade(episode, np.asarray(anc), truncated=truncated)


def generate(model: CascadeModel | Simulator, config: SimulationConfig | None = None) -> Cascade:
    config = config or SimulationConfig()
    rng = np.random.default_rng(config.seed)
    return simulate(_as_simulator(model), rng, cap=config.max_infected)


def generate_conditioned(
    model: CascadeModel | Simulator,
    prefix: Prefix,
    tau: float,
    config: SimulationConfig | None = None,
) -> Cascade:
    """Continue a censored prefix; no new infection can happen before ``tau``."""
    config = config or SimulationConfig()
    rng = np.random.default_rng(config.seed)
    return simulate(_as_simulator(model), rng, prefix=prefix, tau=tau, cap=config.max_infected)


def sample_prefix(model: CascadeModel, prefix: Episode, seed: int) -> Prefix:
    """Sample ancestors (and states) of a censored episode from the filtering distribution."""
    if not model.stateful:
        anc = np.zeros(len(prefix), dtype=np.int64)
        return Prefix(prefix, anc)
    from .inference import sample_trajectory

    cascade, _, states = sample_trajectory(model, prefix, seed)
    return Prefix(prefix, cascade.ancestors, states.detach().numpy())


def simulate_infections(
    model: CascadeModel,
    n_sims: int = 1000,
    prefix: Episode | None = None,
    tau: float = 0.0,
    seed=0,
    max_infected: int | None = None,
) -> np.ndarray:
    """Boolean ``(n_sims, N)`` matrix: which nodes each simulation infects.

    With a censored ``prefix`` every simulation continues it from ``tau``;
    stateful models draw one prefix trajectory per simulation.
    """
    if n_sims < 1:
        raise UsageError("n_sims must be >= 1")
    sim = _as_simulator(model)
    hits = np.zeros((n_sims, sim.n_nodes), dtype=bool)
    children = np.random.SeedSequence(seed).spawn(n_sims)
    fixed_prefix = None
    if prefix is not None and not getattr(model, "stateful", False):
        fixed_prefix = Prefix(prefix, np.zeros(len(prefix), dtype=np.int64))
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        if prefix is None:
            c = simulate(sim, rng, cap=max_infected)
        else:
            pre = fixed_prefix
            if pre is None:
                pre = sample_prefix(model, prefix, int(rng.integers(2**63)))
            c = simulate(sim, rng, prefix=pre, tau=tau, cap=max_infected)
        hits[i, c.episode.nodes] = True
    return hits


def marginal_infection_probs(
    model: CascadeModel,
    n_sims: int = 1000,
    prefix: Episode | None = None,
    tau: float = 0.0,
    seed=0,
    max_infected: int | None = None,
) -> np.ndarray:
    """Fraction of simulations in which each node ends up infected."""
    return simulate_infections(model, n_sims, prefix, tau, seed, max_infected).mean(axis=0)
