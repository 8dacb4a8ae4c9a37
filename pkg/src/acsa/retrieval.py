"""Corpus scoring, top-k evaluation and neighbourhood re-ranking."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .alignment import AttentionConfig, batch_scores
from .corpus import ImageEntity, TextEntity
from .model import Params, encode_corpus
from .numerics import UsageError

log = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10)


@dataclass
class SimilarityMatrix:
    scores: np.ndarray  # (n_query, n_gallery)
    direction: str  # "i2t" | "t2i" | "fused" | "reranked"
    query_ids: list[str]
    gallery_ids: list[str]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.query_ids), len(self.gallery_ids)):
            raise UsageError(
                f"scores {self.scores.shape} do not match "
                f"{len(self.query_ids)} queries x {len(self.gallery_ids)} gallery items"
            )
        if not np.all(np.isfinite(self.scores)):
            raise UsageError("similarity matrix has non-finite entries")

    def to_table(self) -> str:
        """One ``query_id<TAB>gallery_id<TAB>score`` line per entry."""
        lines = [f"# direction={self.direction}"]
        for q, qid in enumerate(self.query_ids):
            for g, gid in enumerate(self.gallery_ids):
                lines.append(f"{qid}\t{gid}\t{float(self.scores[q, g])!r}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_table())

    @classmethod
    def from_table(cls, text: str) -> "SimilarityMatrix":
        direction = "fused"
        entries = []
        for raw in text.splitlines():
            if raw.startswith("# direction="):
                direction = raw.split("=", 1)[1].strip()
                continue
            if not raw.strip() or raw.startswith("#"):
                continue
            parts = raw.split("\t")
            if len(parts) != 3:
                raise UsageError(f"bad similarity line: {raw!r}")
            entries.append((parts[0], parts[1], float(parts[2])))
        q_ids = list(dict.fromkeys(e[0] for e in entries))
        g_ids = list(dict.fromkeys(e[1] for e in entries))
        qi = {k: i for i, k in enumerate(q_ids)}
        gi = {k: i for i, k in enumerate(g_ids)}
        scores = np.full((len(q_ids), len(g_ids)), np.nan)
        for q, g, s in entries:
            scores[qi[q], gi[g]] = s
        if np.isnan(scores).any():
            raise UsageError("similarity table is missing entries")
        return cls(scores, direction, q_ids, g_ids)

    @classmethod
    def load(cls, path) -> "SimilarityMatrix":
        return cls.from_table(Path(path).read_text())


@dataclass
class TopKReport:
    accuracy: dict[int, float]
    first_rank: list[int | None]  # 1-based; None for queries without a positive
    n_excluded: int = 0

    def metrics(self) -> dict[str, float]:
        out = {f"top{k}": v for k, v in sorted(self.accuracy.items())}
        out["queries"] = len(self.first_rank) - self.n_excluded
        out["excluded"] = self.n_excluded
        return out


def score_corpus(
    texts: Sequence[TextEntity],
    images: Sequence[ImageEntity],
    cfg: AttentionConfig = AttentionConfig(),
    beta: float = 0.5,
    params: Params | None = None,
    chunk: int = 64,
) -> SimilarityMatrix:
    """Text-query x image-gallery scores ``beta * i2t + (1 - beta) * t2i``."""
    if not texts or not images:
        raise UsageError("need at least one query and one gallery item")
    if not 0.0 <= beta <= 1.0:
        raise UsageError("beta must lie in [0, 1]")
    ents, _, phrases, mask = encode_corpus(images, texts, params, cfg)
    out = np.empty((len(texts), len(images)))
    # chunks over queries bound the (G, Q, K, d) intermediates
    for lo in range(0, len(texts), chunk):
        hi = min(lo + chunk, len(texts))
        i2t, t2i = batch_scores(ents, phrases[lo:hi], mask[lo:hi], cfg)
        out[lo:hi] = (beta * i2t + (1.0 - beta) * t2i).T
    direction = "i2t" if beta == 1.0 else "t2i" if beta == 0.0 else "fused"
    return SimilarityMatrix(out, direction, [t.id for t in texts], [im.id for im in images])


def positives_from_ids(query_identities, gallery_identities) -> np.ndarray:
    return np.asarray(query_identities)[:, None] == np.asarray(gallery_identities)[None, :]


def ranking(scores: np.ndarray, gallery_ids: Sequence[str]) -> np.ndarray:
    """Per-row gallery order: descending score, ties by ascending gallery id."""
    id_rank = np.argsort(np.asarray(gallery_ids, dtype=object), kind="stable")
    tie = np.empty(len(gallery_ids), dtype=np.int64)
    tie[id_rank] = np.arange(len(gallery_ids))
    s = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.broadcast_to(tie, s.shape), -s), axis=-1)


def topk_eval(sim: SimilarityMatrix, positives, ks: Sequence[int] = DEFAULT_KS) -> TopKReport:
    """Fraction of queries whose first positive ranks within each ``k``.

    ``positives`` is a boolean (n_query, n_gallery) matrix.  Queries with no
    positive are excluded from the averages and counted separately.
    """
    pos = np.asarray(positives, dtype=bool)
    if pos.shape != sim.scores.shape:
        raise UsageError(f"labels {pos.shape} do not match scores {sim.scores.shape}")
    order = ranking(sim.scores, sim.gallery_ids)
    hits = np.take_along_axis(pos, order, axis=1)
    valid = hits.any(axis=1)
    first = np.where(valid, hits.argmax(axis=1) + 1, 0)
    n_valid = int(valid.sum())
    acc = {}
    for k in ks:
        acc[int(k)] = float(np.sum(valid & (first <= k)) / n_valid) if n_valid else 0.0
    ranks = [int(r) if v else None for r, v in zip(first, valid)]
    return TopKReport(acc, ranks, int((~valid).sum()))


def gallery_cosine(images: Sequence[ImageEntity]) -> np.ndarray:
    """Image-image cosine matrix over global embeddings."""
    g = np.stack([im.global_emb for im in images])
    n = np.linalg.norm(g, axis=1, keepdims=True)
    u = np.divide(g, n, out=np.zeros_like(g), where=n > 0)
    return u @ u.T


def rerank(sim: SimilarityMatrix, gallery_sim: np.ndarray, j: int = 5, w: float = 0.3) -> SimilarityMatrix:
    """Blend each score with the gallery item's mean similarity to the
    query's ``j`` best-scoring gallery items."""
    s_gg = np.asarray(gallery_sim, dtype=np.float64)
    n_g = sim.scores.shape[1]
    if s_gg.shape != (n_g, n_g):
        raise UsageError(f"gallery similarity must be {n_g}x{n_g}, got {s_gg.shape}")
    if j < 1:
        raise UsageError("j must be >= 1")
    if not 0.0 <= w <= 1.0:
        raise UsageError("w must lie in [0, 1]")
    if j > n_g:
        log.warning("j=%d exceeds gallery size %d; clamping", j, n_g)
        j = n_g
    if w == 0.0:
        return SimilarityMatrix(sim.scores.copy(), sim.direction, list(sim.query_ids), list(sim.gallery_ids))
    top = ranking(sim.scores, sim.gallery_ids)[:, :j]  # (Q, j)
    context = s_gg[:, top].mean(axis=2).T  # (Q, G)
    refined = (1.0 - w) * sim.scores + w * context
    return SimilarityMatrix(refined, "reranked", list(sim.query_ids), list(sim.gallery_ids))
