import math

import numpy as np
import pytest
from scipy import stats

from oracles import percolation_marginals
from recctic.episodes import Cascade, Episode
from recctic.generator import (
    Prefix,
    SimulationConfig,
    generate,
    generate_conditioned,
    marginal_infection_probs,
    sample_prefix,
    simulate,
)
from recctic.grad import UsageError
from recctic.models import ClassicCTIC, build_model


def classic(K, r=1.0):
    K = np.asarray(K, dtype=float)
    return ClassicCTIC.from_probabilities(K, np.full(K.shape, r))


def check_cascade(c: Cascade):
    # Episode / Cascade constructors validate ordering and ancestors; check timing
    ep = c.episode
    assert np.all(ep.times[c.ancestors[1:]] < ep.times[1:])


@pytest.mark.parametrize("family", ["ctic", "embctic", "recctic"])
def test_generated_cascades_are_valid(family):
    m = build_model(family, 12, d=4, seed=1)
    for s in range(200):
        check_cascade(generate(m, SimulationConfig(seed=s)))


def test_deterministic_given_seed():
    m = build_model("recctic", 10, d=3)
    a = generate(m, SimulationConfig(seed=5))
    b = generate(m, SimulationConfig(seed=5))
    assert a == b


def test_no_spread_without_edges():
    m = classic(np.zeros((4, 4)))
    c = generate(m)
    assert c.episode.nodes.tolist() == [0]


def test_certain_chain():
    K = np.zeros((4, 4))
    K[0, 1] = K[1, 2] = K[2, 3] = 1.0
    c = generate(classic(K))
    assert c.episode.nodes.tolist() == [0, 1, 2, 3]
    assert c.ancestors.tolist() == [0, 0, 1, 2]


def test_cap_truncates():
    K = np.ones((10, 10)) - np.eye(10)
    c = generate(classic(K), SimulationConfig(seed=0, max_infected=4))
    assert len(c.episode) == 4 and c.truncated
    c = generate(classic(K), SimulationConfig(seed=0))
    assert len(c.episode) == 10 and not c.truncated
    with pytest.raises(ValueError):
        SimulationConfig(max_infected=0)


def test_percolation_marginals():
    K = np.array([[0, 0.6, 0.3], [0, 0, 0.5], [0, 0.2, 0]])
    probs = marginal_infection_probs(classic(K, r=1.7), n_sims=20000, seed=3)
    exact = percolation_marginals(K)
    se = np.sqrt(exact * (1 - exact) / 20000) + 1e-12
    assert np.all(np.abs(probs - exact) <= 4 * se)
    assert probs[0] == 1.0


def test_single_edge_delay_is_exponential():
    K = np.zeros((2, 2))
    K[0, 1] = 1.0
    m = classic(K, r=2.5)
    sim = m.simulator()
    delays = [simulate(sim, np.random.default_rng(s)).episode.times[1] for s in range(3000)]
    assert stats.kstest(delays, "expon", args=(0, 1 / 2.5)).pvalue > 1e-3


def test_conditioned_never_before_tau_and_keeps_prefix():
    m = build_model("embctic", 15, d=3, seed=2)
    base = generate(m, SimulationConfig(seed=1))
    tau = 0.5 * (base.episode.times[1] + base.episode.max_time) if len(base.episode) > 1 else 1.0
    pre_ep = Episode(base.episode.nodes[base.episode.times < tau], base.episode.times[base.episode.times < tau])
    prefix = Prefix(pre_ep, np.zeros(len(pre_ep), dtype=np.int64))
    for s in range(300):
        c = generate_conditioned(m, prefix, tau, SimulationConfig(seed=s))
        check_cascade(c)
        n = len(pre_ep)
        assert np.array_equal(c.episode.nodes[:n], pre_ep.nodes)
        assert np.all(c.episode.times[n:] >= tau)


def test_conditioned_transmission_probability():
    # censored source: P(infects v after tau | not before) = k e^{-r tau} / (k e^{-r tau} + 1 - k)
    k, r, tau = 0.7, 1.3, 0.8
    K = np.zeros((2, 2))
    K[0, 1] = k
    m = classic(K, r=r)
    prefix = Prefix(Episode([0], [0.0]), np.array([0]))
    n = 20000
    hits, delays = 0, []
    for s in range(n):
        c = generate_conditioned(m, prefix, tau, SimulationConfig(seed=s))
        if len(c.episode) == 2:
            hits += 1
            delays.append(c.episode.times[1] - tau)
    surv = k * math.exp(-r * tau)
    p = surv / (surv + 1 - k)
    assert hits / n == pytest.approx(p, abs=4 * math.sqrt(p * (1 - p) / n))
    assert stats.kstest(delays, "expon", args=(0, 1 / r)).pvalue > 1e-3


def test_prefix_validation():
    m = build_model("ctic", 5)
    ep = Episode([0, 2], [0, 1.0])
    with pytest.raises(UsageError):
        generate_conditioned(m, Prefix(ep, np.array([0, 0])), tau=0.5)
    with pytest.raises(UsageError):
        generate_conditioned(m, Prefix(ep, np.array([0])), tau=2.0)
    rec = build_model("recctic", 5, d=2)
    with pytest.raises(UsageError):
        generate_conditioned(rec, Prefix(ep, np.array([0, 0])), tau=2.0)


def test_sample_prefix_stateful():
    m = build_model("recctic", 6, d=3)
    ep = Episode([0, 2, 4], [0, 1.0, 1.5])
    pre = sample_prefix(m, ep, seed=0)
    assert pre.states.shape == (3, 3)
    c = generate_conditioned(m, pre, 2.0, SimulationConfig(seed=0))
    assert c.episode.nodes[:3].tolist() == [0, 2, 4]
    assert sample_prefix(build_model("ctic", 6), ep, 0).states is None


def test_marginals_with_prefix():
    m = build_model("recctic", 6, d=3, seed=1)
    ep = Episode([0, 2], [0, 1.0])
    probs = marginal_infection_probs(m, 200, prefix=ep, tau=1.5, seed=0)
    assert probs[0] == 1.0 and probs[2] == 1.0
    assert np.all((probs >= 0) & (probs <= 1))
    with pytest.raises(UsageError):
        marginal_infection_probs(m, 0)
