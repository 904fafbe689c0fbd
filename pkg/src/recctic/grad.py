"""Differentiable primitives, recurrent cells and the optimizer step.

Reverse-mode differentiation is delegated to torch autograd (the graph
torch records during a forward pass plays the role of the tape).  All
computations run in float64.
"""

from __future__ import annotations

import copy
import math
from typing import Mapping

import torch
from torch import nn

DTYPE = torch.float64
K_MIN = 1e-6
K_MAX = 1.0 - 1e-6


class DomainError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


def log(x) -> torch.Tensor:
    x = as_tensor(x)
    if torch.any(x <= 0):
        raise DomainError("log of a non-positive value")
    return torch.log(x)


def sigmoid(x) -> torch.Tensor:
    return torch.sigmoid(as_tensor(x))


def logsumexp(x, dim: int = -1) -> torch.Tensor:
    x = as_tensor(x)
    if x.shape[dim] == 0:
        raise DomainError("logsumexp over an empty axis")
    return torch.logsumexp(x, dim=dim)


def dot(a, b) -> torch.Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DomainError(f"dot of mismatched shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return (a * b).sum(-1)


def clamp_prob(k: torch.Tensor) -> torch.Tensor:
    return k.clamp(K_MIN, K_MAX)


# -- state-update cells: f(z_parent, omega_v) -> z_v ----------------------


class GRUCell(nn.Module):
    """Standard two-gate GRU with the parent state as hidden input."""

    def __init__(self, d: int):
        super().__init__()
        self.cell = nn.GRUCell(d, d, dtype=DTYPE)

    def forward(self, z: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        if z.dim() == 1:
            return self.cell(x.unsqueeze(0), z.unsqueeze(0)).squeeze(0)
        return self.cell(x, z)


class ElmanCell(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.cell = nn.RNNCell(d, d, nonlinearity="tanh", dtype=DTYPE)

    def forward(self, z, x):
        if z.dim() == 1:
            return self.cell(x.unsqueeze(0), z.unsqueeze(0)).squeeze(0)
        return self.cell(x, z)


class MLPCell(nn.Module):
    """One hidden layer over the concatenation [z, x]."""

    def __init__(self, d: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * d
        self.hidden = nn.Linear(2 * d, hidden, dtype=DTYPE)
        self.out = nn.Linear(hidden, d, dtype=DTYPE)

    def forward(self, z, x):
        return self.out(torch.tanh(self.hidden(torch.cat([z, x], dim=-1))))


class IdentityCell(nn.Module):
    """f(z, x) = z.  Degenerate cell used for sanity checks."""

    def forward(self, z, x):
        return z


CELLS = {"gru": GRUCell, "elman": ElmanCell, "mlp": MLPCell, "identity": IdentityCell}


def make_cell(kind: str, d: int) -> nn.Module:
    try:
        cls = CELLS[kind]
    except KeyError:
        raise UsageError(f"unknown cell type {kind!r}; choose from {sorted(CELLS)}") from None
    return cls() if cls is IdentityCell else cls(d)


def uniform_init_(tensors, d: int, generator: torch.Generator | None = None) -> None:
    bound = 1.0 / math.sqrt(d)
    with torch.no_grad():
        for t in tensors:
            t.uniform_(-bound, bound, generator=generator)


# -- gradients and optimizer -----------------------------------------------


def backward(root, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradient of scalar ``root`` w.r.t. every named tensor (zeros if unused)."""
    if not isinstance(root, torch.Tensor) or root.numel() != 1:
        raise UsageError("backward needs a scalar tensor root")
    names = list(params)
    if not root.requires_grad:
        return {n: torch.zeros_like(params[n]) for n in names}
    grads = torch.autograd.grad(
        root.reshape(()), [params[n] for n in names], allow_unused=True
    )
    return {
        n: torch.zeros_like(params[n]) if g is None else g for n, g in zip(names, grads)
    }


class Adam:
    """Bias-corrected ADAM over named parameters, minimizing a loss.

    The training loop passes gradients of the *negative* ELBO (or negative
    log-likelihood), so a step moves parameters uphill on the objective.
    """

    def __init__(
        self,
        params: Mapping[str, torch.Tensor],
        lr: float = 1e-2,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.names = list(params)
        self.params = dict(params)
        self.opt = torch.optim.Adam(
            [self.params[n] for n in self.names], lr=lr, betas=betas, eps=eps
        )
        self.steps = 0
        self.rejected = 0

    def step(self, grads: Mapping[str, torch.Tensor]) -> bool:
        """Apply one update; returns False (and leaves params alone) on non-finite grads."""
        for n in self.names:
            g = grads.get(n)
            if g is not None and not torch.isfinite(g).all():
                self.rejected += 1
                return False
        for n in self.names:
            g = grads.get(n)
            p = self.params[n]
            p.grad = torch.zeros_like(p) if g is None else g.detach().clone()
        self.opt.step()
        self.steps += 1
        return True

    def state_dict(self) -> dict:
        # torch hands out live references to its moment buffers
        return copy.deepcopy(
            {"steps": self.steps, "rejected": self.rejected, "opt": self.opt.state_dict()}
        )

    def load_state_dict(self, state: dict) -> None:
        self.steps = state["steps"]
        self.rejected = state.get("rejected", 0)
        self.opt.load_state_dict(state["opt"])

