"""Diffusion episodes, cascades and length-ordered minibatches.

An episode is the observable unit: the chronologically ordered list of
infected nodes with their first-infection timestamps.  Position 0 always
holds the world node (index 0) at time 0.  A cascade adds the latent
ancestor vector.

Episode files are JSON Lines, one episode per line::

    {"events": [[node_id, time], ...]}

Nodes absent from a record are not infected.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from os import PathLike
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

WORLD = 0
TIE_EPSILON = 1e-6


class EpisodeError(ValueError):
    """Invalid episode content (bad node id, broken ordering, ...)."""


class EpisodeParseError(EpisodeError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class Episode:
    """Infected nodes in infection order, with their timestamps.

    ``nodes[0]`` is the world node at time 0.  ``shift`` records the offset
    removed at ingestion (raw time = normalized time + shift).
    """

    nodes: np.ndarray
    times: np.ndarray
    shift: float = 0.0

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.int64)
        times = np.asarray(self.times, dtype=np.float64)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "times", times)
        if nodes.ndim != 1 or nodes.shape != times.shape:
            raise EpisodeError("nodes and times must be 1-d arrays of equal length")
        if len(nodes) == 0 or nodes[0] != WORLD or times[0] != 0.0:
            raise EpisodeError("an episode starts with the world node at time 0")
        if np.any(nodes[1:] <= WORLD):
            raise EpisodeError("world node may only appear at position 0")
        if len(np.unique(nodes)) != len(nodes):
            raise EpisodeError("duplicate node in episode")
        if np.any(np.diff(times) <= 0):
            raise EpisodeError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.nodes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.times, other.times)
            and self.shift == other.shift
        )

    def __repr__(self) -> str:
        return f"Episode(nodes={self.nodes.tolist()}, times={self.times.tolist()})"

    def time_of(self, node: int) -> float:
        """Infection time of ``node``, ``inf`` if it was not infected."""
        hit = np.flatnonzero(self.nodes == node)
        return float(self.times[hit[0]]) if len(hit) else math.inf

    def time_map(self) -> dict[int, float]:
        return {int(u): float(t) for u, t in zip(self.nodes, self.times)}

    def infected_mask(self, node_count: int) -> np.ndarray:
        mask = np.zeros(node_count, dtype=bool)
        mask[self.nodes] = True
        return mask

    @property
    def max_time(self) -> float:
        return float(self.times[-1])


@dataclass(frozen=True, eq=False)
class Cascade:
    """An episode together with its ancestor vector.

    ``ancestors[j]`` is the position (not node id) of the infector of
    position ``j``; ``ancestors[0] = ancestors[1] = 0``.
    """

    episode: Episode
    ancestors: np.ndarray
    truncated: bool = False

    def __post_init__(self):
        anc = np.asarray(self.ancestors, dtype=np.int64)
        object.__setattr__(self, "ancestors", anc)
        if anc.shape != self.episode.nodes.shape:
            raise EpisodeError("ancestor vector length must equal episode length")
        if anc[0] != 0 or (len(anc) > 1 and anc[1] != 0):
            raise EpisodeError("the first two ancestors must be the world node")
        if np.any(anc[1:] >= np.arange(1, len(anc))):
            raise EpisodeError("an infector must precede its infectee")

    def __len__(self) -> int:
        return len(self.episode)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Cascade):
            return NotImplemented
        return self.episode == other.episode and np.array_equal(
            self.ancestors, other.ancestors
        )

    @property
    def infector_nodes(self) -> np.ndarray:
        return self.episode.nodes[self.ancestors]


def episode_from_events(
    events: Iterable[Sequence[float]],
    node_count: int | None = None,
    normalize: bool = True,
) -> Episode | None:
    """Build a normalized episode from raw ``(node, time)`` pairs.

    Returns ``None`` for an empty record.  Times are shifted so that the
    earliest infection happens at 1; duplicated nodes keep their earliest
    time; exact ties are broken by node id, the r-th tied node receiving
    ``r * TIE_EPSILON`` extra delay.
    """
    first: dict[int, float] = {}
    for ev in events:
        if len(ev) != 2:
            raise EpisodeError(f"event must be a [node, time] pair, got {ev!r}")
        node, t = ev
        if isinstance(node, bool) or int(node) != node:
            raise EpisodeError(f"node id must be an integer, got {node!r}")
        node, t = int(node), float(t)
        if node < 1:
            raise EpisodeError(f"node id {node} is reserved or negative")
        if node_count is not None and node >= node_count:
            raise EpisodeError(f"node id {node} out of range for {node_count} nodes")
        if not math.isfinite(t) or t < 0:
            raise EpisodeError(f"invalid timestamp {t!r}")
        if node not in first or t < first[node]:
            first[node] = t
    if not first:
        return None

    ordered = sorted(first.items(), key=lambda kv: (kv[1], kv[0]))
    nodes = np.array([u for u, _ in ordered], dtype=np.int64)
    times = np.array([t for _, t in ordered], dtype=np.float64)
    shift = 0.0
    if normalize:
        shift = float(times[0]) - 1.0
        times = times - shift
        times[times == times[0]] = 1.0
    times = _break_ties(times)
    return Episode(
        np.concatenate([[WORLD], nodes]), np.concatenate([[0.0], times]), shift
    )


def _break_ties(times: np.ndarray) -> np.ndarray:
    out = times.copy()
    rank = 0
    for j in range(1, len(times)):
        rank = rank + 1 if times[j] == times[j - 1] else 0
        out[j] = times[j] + rank * TIE_EPSILON
    # jitter may catch up with the next distinct time
    for j in range(1, len(out)):
        if out[j] <= out[j - 1]:
            out[j] = out[j - 1] + TIE_EPSILON
    return out


def load_episodes(path: str | PathLike, node_count: int) -> list[Episode]:
    """Read and normalize an episode file.

    Empty records are skipped; their count is reported with a warning.
    """
    episodes = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                events = record["events"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise EpisodeParseError(f"malformed record ({exc})", lineno) from None
            try:
                ep = episode_from_events(events, node_count)
            except EpisodeError as exc:
                raise EpisodeParseError(str(exc), lineno) from None
            except (TypeError, ValueError) as exc:
                raise EpisodeParseError(f"malformed event ({exc})", lineno) from None
            if ep is None:
                skipped += 1
                continue
            if "shift" in record:
                ep = Episode(ep.nodes, ep.times, ep.shift + float(record["shift"]))
            episodes.append(ep)
    if skipped:
        warnings.warn(f"{path}: skipped {skipped} empty episode(s)", stacklevel=2)
    return episodes


def episode_record(episode: Episode, ancestors: np.ndarray | None = None, **extra) -> dict:
    rec: dict = {
        "events": [[int(u), float(t)] for u, t in zip(episode.nodes[1:], episode.times[1:])]
    }
    if episode.shift:
        rec["shift"] = episode.shift
    if ancestors is not None:
        rec["ancestors"] = [int(a) for a in ancestors]
    rec.update(extra)
    return rec


def save_episodes(path: str | PathLike, episodes: Iterable[Episode]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_record(ep)) + "\n")


def load_cascades(path: str | PathLike, node_count: int) -> list[Cascade]:
    """Read a ground-truth file (episode records with an ``ancestors`` field).

    Times are taken as stored; only files whose events are already
    normalized and tie-free round-trip exactly.
    """
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                ep = episode_from_events(record["events"], node_count, normalize=False)
                anc = record["ancestors"]
                if ep is None:
                    ep = Episode([WORLD], [0.0])
                if "shift" in record:
                    ep = Episode(ep.nodes, ep.times, float(record["shift"]))
                out.append(Cascade(ep, anc))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise EpisodeParseError(f"malformed record ({exc})", lineno) from None
            except EpisodeError as exc:
                raise EpisodeParseError(str(exc), lineno) from None
    return out


@dataclass
class Bin:
    """A padded minibatch of episodes of non-increasing length.

    ``inf`` and ``times`` use -1 padding; ``not_inf[i, v]`` is 1 when node
    ``v`` is not infected in row ``i``.  ``index`` maps rows back to the
    position of each episode in the list given to :func:`make_bins`.
    """

    inf: np.ndarray
    times: np.ndarray
    not_inf: np.ndarray
    index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def lengths(self) -> np.ndarray:
        return (self.inf >= 0).sum(axis=1)

    def __len__(self) -> int:
        return self.inf.shape[0]

    def episodes(self) -> list[Episode]:
        out = []
        for row, n in enumerate(self.lengths):
            out.append(Episode(self.inf[row, :n], self.times[row, :n]))
        return out


def make_bin(episodes: Sequence[Episode], node_count: int, index=None) -> Bin:
    width = max(len(ep) for ep in episodes)
    rows = len(episodes)
    inf = np.full((rows, width), -1, dtype=np.int64)
    times = np.full((rows, width), -1.0)
    not_inf = np.ones((rows, node_count), dtype=np.uint8)
    for i, ep in enumerate(episodes):
        n = len(ep)
        inf[i, :n] = ep.nodes
        times[i, :n] = ep.times
        not_inf[i, ep.nodes] = 0
    if index is None:
        index = np.arange(rows)
    return Bin(inf, times, not_inf, np.asarray(index, dtype=np.int64))


def make_bins(episodes: Sequence[Episode], batch_size: int, node_count: int) -> list[Bin]:
    """Sort by decreasing length (stable) and cut into bins of ``batch_size``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not episodes:
        return []
    order = sorted(range(len(episodes)), key=lambda i: -len(episodes[i]))
    bins = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        bins.append(make_bin([episodes[i] for i in idx], node_count, idx))
    return bins


def max_horizon(episodes: Sequence[Episode]) -> float:
    if not episodes:
        raise EpisodeError("max_horizon of an empty corpus")
    return max(ep.max_time for ep in episodes)


def censor(episode: Episode, tau: float) -> Episode:
    """Right-censor: keep nodes infected strictly before ``tau`` (world always kept)."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    keep = max(1, int(np.searchsorted(episode.times, tau, side="left")))
    return Episode(episode.nodes[:keep], episode.times[:keep], episode.shift)
