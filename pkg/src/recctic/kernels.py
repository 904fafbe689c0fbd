"""Log-domain probability kernels of the continuous-time cascade likelihood.

For a source ``u`` infected at ``t_u`` and a target ``v`` with transmission
probability ``k`` and exponential delay rate ``r``:

* ``a`` : density that ``u`` infects ``v`` at ``t_v``,
          ``k r exp(-r (t_v - t_u))``
* ``b`` : probability that ``u`` has not infected ``v`` by ``t_v``,
          ``k exp(-r (t_v - t_u)) + 1 - k``
* ``h`` : density that ``v`` gets infected at ``t_v`` by one of its candidates
* ``g`` : probability that ``v`` is never infected (long-horizon limit)

The ``*_cond`` variants condition on the right-censored prefix observed
before ``tau``: a source infected before ``tau`` is known not to have
reached ``v`` before ``tau``.  All functions broadcast elementwise over
torch tensors and are differentiable.
"""

from __future__ import annotations

import torch

from .grad import DomainError, UsageError, as_tensor

NEG_INF = -1e30


def _sat(x: torch.Tensor) -> torch.Tensor:
    return x.clamp_min(NEG_INF)


def log_a(k, r, dt) -> torch.Tensor:
    k, r, dt = as_tensor(k), as_tensor(r), as_tensor(dt)
    if torch.any(~(dt > 0)) or torch.any(torch.isinf(dt)):
        raise DomainError("log_a needs a finite positive delay t_v - t_u")
    return _sat(torch.log(k)) + torch.log(r) - r * dt


def log_b(k, r, dt) -> torch.Tensor:
    """``log(1 - k (1 - exp(-r dt)))``; ``dt = inf`` gives ``log(1 - k)``."""
    k, r, dt = as_tensor(k), as_tensor(r), as_tensor(dt)
    if torch.any(dt < 0):
        raise DomainError("log_b needs t_u <= t_v")
    return _sat(torch.log1p(k * torch.expm1(-r * dt)))


def log_h(log_as, log_bs, dim: int = -1) -> torch.Tensor:
    """Product form: ``sum(log b) + logsumexp(log a - log b)`` over candidates."""
    log_as, log_bs = as_tensor(log_as), as_tensor(log_bs)
    if log_as.shape != log_bs.shape:
        raise DomainError("log_as and log_bs must have the same shape")
    if log_as.shape[dim] == 0:
        raise DomainError("an infected node needs at least one candidate infector")
    return log_bs.sum(dim) + torch.logsumexp(log_as - log_bs, dim=dim)


def log_g(ks, dim: int = -1) -> torch.Tensor:
    return _sat(torch.log1p(-as_tensor(ks))).sum(dim)


def log_censor_denominator(k, r, t_u, tau) -> torch.Tensor:
    """``log(k exp(-r (tau - t_u)) + 1 - k)`` for sources with ``t_u < tau``, else 0."""
    k, r, t_u, tau = as_tensor(k), as_tensor(r), as_tensor(t_u), as_tensor(tau)
    before = t_u < tau
    gap = torch.where(before, tau - t_u, torch.zeros_like(t_u))
    return torch.where(before, log_b(k, r, gap), torch.zeros_like(gap))


def _check_future(t_v, tau):
    if torch.any(as_tensor(t_v) < as_tensor(tau)):
        raise UsageError("conditional terms only score targets with t_v >= tau")


def log_a_cond(k, r, t_u, t_v, tau) -> torch.Tensor:
    _check_future(t_v, tau)
    t_u, t_v = as_tensor(t_u), as_tensor(t_v)
    return log_a(k, r, t_v - t_u) - log_censor_denominator(k, r, t_u, tau)


def log_b_cond(k, r, t_u, t_v, tau) -> torch.Tensor:
    """Conditional non-infection; ``t_v = inf`` scores a never-infected target."""
    _check_future(t_v, tau)
    t_u, t_v = as_tensor(t_u), as_tensor(t_v)
    return log_b(k, r, t_v - t_u) - log_censor_denominator(k, r, t_u, tau)


def log_h_cond(log_as_cond, log_bs_cond, dim: int = -1) -> torch.Tensor:
    return log_h(log_as_cond, log_bs_cond, dim)


def log_g_cond(ks, rs, t_us, tau, dim: int = -1) -> torch.Tensor:
    ks = as_tensor(ks)
    inf = torch.full_like(ks, float("inf"))
    return log_b_cond(ks, rs, t_us, inf, tau).sum(dim)
