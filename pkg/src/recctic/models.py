"""The three cascade model families behind one interface.

Every model answers three questions:

* ``k_logits``  -- logit of the transmission probability from a source to
  a target (the source may carry a state vector),
* ``log_rates`` -- log of the exponential delay rate between two nodes,
* ``update_state`` -- the state a node receives from its infector.

``ctic`` keeps free per-pair tables, ``embctic`` factorizes them with static
node embeddings and ``recctic`` replaces the source embedding by a state
propagated along the diffusion tree through a recurrent cell.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from os import PathLike
from typing import Callable

import numpy as np
import torch
from torch import nn

from .grad import DTYPE, UsageError, clamp_prob, make_cell, uniform_init_

FAMILIES = ("ctic", "embctic", "recctic")
MODEL_FORMAT = "recctic-model"
MODEL_VERSION = 1


class CascadeModel(nn.Module):
    family = ""
    stateful = False

    def __init__(self, n_nodes: int, d: int = 0):
        super().__init__()
        self.n_nodes = n_nodes
        self.d = d

    # elementwise helpers (broadcast over leading dims)
    def k_logits(self, src, dst, states=None) -> torch.Tensor:
        raise NotImplementedError

    def k_logit_rows(self, src, states=None) -> torch.Tensor:
        """Logits from each source to every node, shape ``src.shape + (N,)``."""
        raise NotImplementedError

    def log_rates(self, src, dst) -> torch.Tensor:
        raise NotImplementedError

    def log_rate_rows(self, src) -> torch.Tensor:
        raise NotImplementedError

    def transmit_prob(self, src, dst, state=None) -> torch.Tensor:
        return clamp_prob(torch.sigmoid(self.k_logits(_idx(src), _idx(dst), state)))

    def delay_rate(self, src, dst) -> torch.Tensor:
        src, dst = _idx(src), _idx(dst)
        if torch.any(src == dst):
            raise UsageError("delay rate of a node to itself is undefined")
        return torch.exp(self.log_rates(src, dst))

    def initial_state(self, *batch: int) -> torch.Tensor | None:
        return None

    def update_state(self, z, dst):
        return None

    def param_groups(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    def simulator(self) -> "Simulator":
        raise NotImplementedError

    def config(self) -> dict:
        return {"family": self.family, "n_nodes": self.n_nodes, "d": self.d}


def _idx(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=torch.long)


class ClassicCTIC(CascadeModel):
    """Free ``k`` and ``r`` for each ordered pair, stored unconstrained."""

    family = "ctic"

    def __init__(self, n_nodes: int, k_init: float = 0.05, seed: int | None = 0):
        super().__init__(n_nodes, 0)
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        logit = float(np.log(k_init / (1 - k_init)))
        noise = 0.01 * torch.randn(n_nodes, n_nodes, dtype=DTYPE, generator=gen)
        self.k_logit = nn.Parameter(logit + noise)
        self.log_r = nn.Parameter(torch.zeros(n_nodes, n_nodes, dtype=DTYPE))

    @classmethod
    def from_probabilities(cls, k, r) -> "ClassicCTIC":
        """Fixture constructor; ``k`` may contain exact 0 and 1."""
        k = np.asarray(k, dtype=np.float64)
        r = np.asarray(r, dtype=np.float64)
        model = cls(k.shape[0], seed=None)
        with np.errstate(divide="ignore"):
            logit = np.log(k) - np.log1p(-k)
        with torch.no_grad():
            model.k_logit.copy_(torch.as_tensor(logit))
            model.log_r.copy_(torch.as_tensor(np.log(r)))
        return model

    def k_logits(self, src, dst, states=None):
        return self.k_logit[src, dst]

    def k_logit_rows(self, src, states=None):
        return self.k_logit[src]

    def log_rates(self, src, dst):
        return self.log_r[src, dst]

    def log_rate_rows(self, src):
        return self.log_r[src]

    def simulator(self):
        with torch.no_grad():
            K = torch.sigmoid(self.k_logit).numpy().copy()
            R = torch.exp(self.log_r).numpy().copy()
        return Simulator(R, K=K)


class _EmbeddedRates(CascadeModel):
    """Shared delay parameterization ``r_uv = exp(-|<w1_u, w2_v>|)``."""

    def __init__(self, n_nodes: int, d: int):
        super().__init__(n_nodes, d)
        self.omega_r1 = nn.Parameter(torch.empty(n_nodes, d, dtype=DTYPE))
        self.omega_r2 = nn.Parameter(torch.empty(n_nodes, d, dtype=DTYPE))

    def log_rates(self, src, dst):
        return -torch.abs((self.omega_r1[src] * self.omega_r2[dst]).sum(-1))

    def log_rate_rows(self, src):
        return -torch.abs(self.omega_r1[src] @ self.omega_r2.T)

    def _rate_matrix(self) -> np.ndarray:
        with torch.no_grad():
            return torch.exp(-torch.abs(self.omega_r1 @ self.omega_r2.T)).numpy().copy()


class EmbCTIC(_EmbeddedRates):
    """CTIC with ``k_uv = sigmoid(<ws_u, wk_v>)`` from static embeddings."""

    family = "embctic"

    def __init__(self, n_nodes: int, d: int = 50, seed: int | None = 0):
        super().__init__(n_nodes, d)
        self.omega_ks = nn.Parameter(torch.empty(n_nodes, d, dtype=DTYPE))
        self.omega_k = nn.Parameter(torch.empty(n_nodes, d, dtype=DTYPE))
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        uniform_init_(self.parameters(), d, gen)

    def k_logits(self, src, dst, states=None):
        return (self.omega_ks[src] * self.omega_k[dst]).sum(-1)

    def k_logit_rows(self, src, states=None):
        return self.omega_ks[src] @ self.omega_k.T

    def simulator(self):
        with torch.no_grad():
            K = torch.sigmoid(self.omega_ks @ self.omega_k.T).numpy().copy()
        return Simulator(self._rate_matrix(), K=K)


class RecCTIC(_EmbeddedRates):
    """Recurrent cascade model: ``k_uv(z) = sigmoid(<z_u, wk_v>)``.

    The world node starts from the learned state ``z0``; a node infected by
    ``u`` gets ``z_v = cell(z_u, wf_v)``.
    """

    family = "recctic"
    stateful = True

    def __init__(self, n_nodes: int, d: int = 50, cell: str = "gru", seed: int | None = 0):
        super().__init__(n_nodes, d)
        self.cell_type = cell
        self.z0 = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.omega_f = nn.Parameter(torch.empty(n_nodes, d, dtype=DTYPE))
        self.omega_k = nn.Parameter(torch.empty(n_nodes, d, dtype=DTYPE))
        self.cell = make_cell(cell, d)
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        uniform_init_(
            [p for n, p in self.named_parameters() if n != "z0"], d, gen
        )

    def k_logits(self, src, dst, states=None):
        if states is None:
            raise UsageError("recctic transmission needs the source state")
        return (states * self.omega_k[dst]).sum(-1)

    def k_logit_rows(self, src, states=None):
        if states is None:
            raise UsageError("recctic transmission needs the source state")
        return states @ self.omega_k.T

    def initial_state(self, *batch):
        return self.z0.expand(*batch, self.d)

    def update_state(self, z, dst):
        return self.cell(z, self.omega_f[dst])

    def config(self):
        return {**super().config(), "cell": self.cell_type}

    def simulator(self):
        wk = self.omega_k.detach().numpy().copy()
        z0 = self.z0.detach().numpy().copy()

        def step(z: np.ndarray, v: int) -> np.ndarray:
            with torch.no_grad():
                out = self.update_state(torch.as_tensor(z), torch.tensor(v))
            return out.numpy()

        return Simulator(self._rate_matrix(), wk=wk, z0=z0, step=step)


@dataclass
class Simulator:
    """Frozen numpy view of a model used by the cascade generator.

    Probabilities are not clamped here so fixtures may use exact 0 or 1.
    """

    R: np.ndarray
    K: np.ndarray | None = None
    wk: np.ndarray | None = None
    z0: np.ndarray | None = None
    step: Callable[[np.ndarray, int], np.ndarray] | None = None

    @property
    def n_nodes(self) -> int:
        return self.R.shape[0]

    @property
    def stateful(self) -> bool:
        return self.step is not None

    def k_row(self, u: int, z: np.ndarray | None) -> np.ndarray:
        if self.K is not None:
            return self.K[u]
        x = self.wk @ z
        return 0.5 * (1.0 + np.tanh(0.5 * x))


def build_model(family: str, n_nodes: int, d: int = 50, cell: str = "gru", seed: int = 0) -> CascadeModel:
    if family == "ctic":
        return ClassicCTIC(n_nodes, seed=seed)
    if family == "embctic":
        return EmbCTIC(n_nodes, d, seed=seed)
    if family == "recctic":
        return RecCTIC(n_nodes, d, cell=cell, seed=seed)
    raise UsageError(f"unknown model family {family!r}; choose from {FAMILIES}")


# -- persistence -------------------------------------------------------------


def model_to_dict(model: CascadeModel, meta: dict | None = None) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        **model.config(),
        "params": {n: p.detach().tolist() for n, p in model.named_parameters()},
        "meta": meta or {},
    }


def model_from_dict(data: dict, family: str | None = None) -> CascadeModel:
    if data.get("format") != MODEL_FORMAT:
        raise UsageError("not a model file")
    if data.get("version") != MODEL_VERSION:
        raise UsageError(f"unsupported model file version {data.get('version')!r}")
    if family is not None and data["family"] != family:
        raise UsageError(f"model file holds a {data['family']} model, not {family}")
    model = build_model(
        data["family"], data["n_nodes"], data.get("d", 0), data.get("cell", "gru"), seed=0
    )
    params = dict(model.named_parameters())
    if set(params) != set(data["params"]):
        raise UsageError("model file parameters do not match the model family")
    with torch.no_grad():
        for name, values in data["params"].items():
            params[name].copy_(torch.as_tensor(values, dtype=DTYPE))
    return model


def save_model(path: str | PathLike, model: CascadeModel, meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model, meta), fh)


def load_model(path: str | PathLike, family: str | None = None) -> tuple[CascadeModel, dict]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return model_from_dict(data, family), data.get("meta", {})
