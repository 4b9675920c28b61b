"""Zero-shot scene retrieval and embodied localization over frozen embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError

DEFAULT_K = 3
_DEGENERATE_NORM = 1e-9


def scene_embedding(view_embeddings: np.ndarray) -> tuple[np.ndarray, bool]:
    """L2-normalised mean of view embeddings, plus a flag set when the mean vanishes."""
    v = np.asarray(view_embeddings, dtype=np.float64)
    if v.ndim != 2 or len(v) == 0:
        raise InvalidArgumentError("scene_embedding needs at least one view vector")
    mean = v.mean(axis=0)
    n = np.linalg.norm(mean)
    if n < _DEGENERATE_NORM:
        return np.zeros_like(mean), True
    return mean / n, False


@dataclass
class SceneEntry:
    scene_id: str
    views: np.ndarray  # (V, d) unit vectors
    pooled: np.ndarray  # (d,)
    degenerate: bool = False


@dataclass
class SceneIndex:
    dim: int
    entries: list[SceneEntry] = field(default_factory=list)

    def add(self, scene_id: str, view_embeddings: np.ndarray) -> SceneEntry:
        views = np.asarray(view_embeddings, dtype=np.float64)
        if views.ndim != 2 or views.shape[1] != self.dim:
            raise InvalidArgumentError(f"expected (V, {self.dim}) view embeddings, got {views.shape}")
        if any(e.scene_id == scene_id for e in self.entries):
            raise InvalidArgumentError(f"duplicate scene id {scene_id!r}")
        pooled, degenerate = scene_embedding(views)
        entry = SceneEntry(scene_id, views, pooled, degenerate)
        self.entries.append(entry)
        return entry

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, scene_id: str) -> SceneEntry:
        for e in self.entries:
            if e.scene_id == scene_id:
                return e
        raise KeyError(scene_id)

    @property
    def ids(self) -> list[str]:
        return [e.scene_id for e in self.entries]


def _unit(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    return q / n if n > 0 else q


def scores(query: np.ndarray, index: SceneIndex) -> dict[str, float]:
    q = _unit(query)
    return {e.scene_id: 0.0 if e.degenerate else float(e.pooled @ q) for e in index.entries}


def retrieve(query: np.ndarray, index: SceneIndex, top_n: int) -> list[tuple[str, float]]:
    """Top-N scene ids by cosine similarity; ties fall back to id order."""
    if len(index) == 0:
        raise InvalidArgumentError("cannot retrieve from an empty index")
    if top_n < 1:
        raise InvalidArgumentError("N must be >= 1")
    s = scores(query, index)
    ranked = sorted(s.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:top_n]


@dataclass
class RetrievalQuery:
    texts: list[str]
    embedding: np.ndarray
    scene_id: str

    @property
    def m(self) -> int:
        return len(self.texts)


def compose_query(texts: Sequence[str], embed, mode: str = "concat") -> np.ndarray:
    """Embed M referring texts either as one concatenated string or as a mean of embeddings."""
    if len(texts) < 1:
        raise InvalidArgumentError("a query needs at least one referring text")
    if mode == "concat":
        return embed(" ".join(texts))
    if mode == "mean":
        return _unit(np.mean([embed(t) for t in texts], axis=0))
    raise InvalidArgumentError(f"unknown query mode {mode!r}")


def recall_at(queries: Iterable[RetrievalQuery], index: SceneIndex, m: Optional[int], n: int) -> float:
    """Fraction of queries whose ground-truth scene is in the top N (queries filtered to M texts)."""
    hits = total = 0
    for q in queries:
        if m is not None and q.m != m:
            continue
        total += 1
        hits += any(sid == q.scene_id for sid, _ in retrieve(q.embedding, index, n))
    return hits / total if total else 0.0


def localize(view_embeddings: np.ndarray, situation: np.ndarray, k: int = DEFAULT_K
             ) -> list[tuple[int, float]]:
    """Top-K views of one scene by cosine similarity to a situation text; ties by index."""
    views = np.asarray(view_embeddings, dtype=np.float64)
    if views.ndim != 2 or len(views) == 0:
        raise InvalidArgumentError("scene has no views")
    if k < 1:
        raise InvalidArgumentError("K must be >= 1")
    s = views @ _unit(situation)
    order = sorted(range(len(s)), key=lambda i: (-s[i], i))
    return [(i, float(s[i])) for i in order[:k]]
