"""Asymmetric cross-attention similarity between visual entities and phrases.

Image -> text: every visual entity (global image vector and the four body
regions) attends over the caption's noun phrases and is compared with its
attended phrase mixture.  Text -> image: every phrase attends over the
visual entities.  The two directions are normalised along different axes,
so the scores generally differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .corpus import ImageEntity, TextEntity
from .numerics import UsageError

ENTITY_SETS = {
    # rows of the (5, d) entity stack that take part in attention
    "all": slice(0, 5),
    "global": slice(0, 1),
    "regions": slice(1, 5),
}


@dataclass(frozen=True)
class AttentionConfig:
    lambda1: float = 20.0
    lambda1_prime: float = 20.0
    eps_norm: float = 1e-12
    entities: str = "all"

    def __post_init__(self):
        if self.lambda1 <= 0 or self.lambda1_prime <= 0:
            raise UsageError("inverse temperatures must be positive")
        if not 0 < self.eps_norm <= 1e-6:
            raise UsageError("eps_norm must lie in (0, 1e-6]")
        if self.entities not in ENTITY_SETS:
            raise UsageError(f"entities must be one of {sorted(ENTITY_SETS)}")


@dataclass(frozen=True)
class PairSimilarity:
    i2t: float
    t2i: float
    entity_terms: np.ndarray
    phrase_terms: np.ndarray


def _entities(img, cfg: AttentionConfig) -> np.ndarray:
    if isinstance(img, ImageEntity):
        return img.entities[ENTITY_SETS[cfg.entities]]
    v = np.atleast_2d(np.asarray(img, dtype=np.float64))
    if v.shape[0] < 1:
        raise UsageError("need at least one visual entity")
    return v


def _phrases(txt) -> np.ndarray:
    p = txt.phrases if isinstance(txt, TextEntity) else np.atleast_2d(np.asarray(txt, dtype=np.float64))
    if p.shape[0] < 1:
        raise UsageError("need at least one phrase")
    return p


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def raw_similarity(v, t) -> float:
    """Cosine between one visual entity and one phrase."""
    return nx.cosine(nx.as_vec(v), nx.as_vec(t))


def _clamped_sims(v: np.ndarray, p: np.ndarray) -> np.ndarray:
    if v.shape[1] != p.shape[1]:
        raise UsageError(f"dimension mismatch: {v.shape[1]} vs {p.shape[1]}")
    return np.maximum(_unit_rows(v) @ _unit_rows(p).T, 0.0)


def score_i2t(img, txt, cfg: AttentionConfig = AttentionConfig()) -> tuple[float, np.ndarray]:
    """Mean over visual entities of cos(v_i, attended phrase mixture)."""
    v, p = _entities(img, cfg), _phrases(txt)
    s = _clamped_sims(v, p)  # (K, M)
    s_norm = s / np.sqrt(np.sum(s * s, axis=0, keepdims=True) + cfg.eps_norm)
    att = nx.masked_softmax(cfg.lambda1 * s_norm, axis=1)
    attended = att @ p  # (K, d)
    terms = np.sum(_unit_rows(v) * _unit_rows(attended), axis=1)
    return float(terms.mean()), terms


def score_t2i(img, txt, cfg: AttentionConfig = AttentionConfig()) -> tuple[float, np.ndarray]:
    """Mean over phrases of cos(t_j, attended visual mixture)."""
    v, p = _entities(img, cfg), _phrases(txt)
    s = _clamped_sims(v, p)
    s_norm = s / np.sqrt(np.sum(s * s, axis=1, keepdims=True) + cfg.eps_norm)
    att = nx.masked_softmax(cfg.lambda1_prime * s_norm, axis=0)  # over entities
    attended = att.T @ v  # (M, d)
    terms = np.sum(_unit_rows(p) * _unit_rows(attended), axis=1)
    return float(terms.mean()), terms


def score_pair(img, txt, cfg: AttentionConfig = AttentionConfig()) -> PairSimilarity:
    i2t, ent_terms = score_i2t(img, txt, cfg)
    t2i, phr_terms = score_t2i(img, txt, cfg)
    return PairSimilarity(i2t, t2i, ent_terms, phr_terms)


# ---------------------------------------------------------------------------
# Batched form (works on plain arrays or tape Vars)
# ---------------------------------------------------------------------------


def pad_phrases(texts, m: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack ragged phrase sets into ``(B, M, d)`` plus a ``(B, M)`` mask."""
    sets = [_phrases(t) for t in texts]
    m = m or max(len(s) for s in sets)
    d = sets[0].shape[1]
    out = np.zeros((len(sets), m, d))
    mask = np.zeros((len(sets), m), dtype=bool)
    for b, s in enumerate(sets):
        out[b, : len(s)] = s
        mask[b, : len(s)] = True
    return out, mask


def batch_scores(entities, phrases, mask, cfg: AttentionConfig = AttentionConfig()):
    """All-pairs similarities for ``A`` images and ``B`` texts.

    entities: (A, K, d); phrases: (B, M, d) zero-padded; mask: (B, M) bool.
    Returns ``(i2t, t2i)``, each (A, B).  Inputs may be tape Vars.
    """
    mask = np.asarray(mask, dtype=bool)
    a_n, k_n = nx._val(entities).shape[:2]
    b_n, m_n, d = nx._val(phrases).shape
    counts = mask.sum(axis=1).astype(np.float64)
    if np.any(counts == 0):
        raise UsageError("every text needs at least one phrase")

    ent_u = nx.normalize(entities)
    phr_u = nx.normalize(phrases)
    sims = nx.relu(nx.einsum("aid,bjd->abij", ent_u, phr_u))  # (A, B, K, M)
    sq = sims * sims

    # image -> text: normalise across entities, attend across phrases
    s_norm = sims / nx.sqrt(nx.reduce_sum(sq, axis=2, keepdims=True) + cfg.eps_norm)
    att = nx.masked_softmax(s_norm * cfg.lambda1, axis=3, mask=mask[None, :, None, :])
    attended = nx.einsum("abij,bjd->abid", att, phrases)
    ent_b = nx.reshape(ent_u, (a_n, 1, k_n, d))
    ent_terms = nx.reduce_sum(ent_b * nx.normalize(attended), axis=3)  # (A, B, K)
    i2t = nx.reduce_mean(ent_terms, axis=2)

    # text -> image: normalise across phrases, attend across entities
    s_norm_t = sims / nx.sqrt(nx.reduce_sum(sq, axis=3, keepdims=True) + cfg.eps_norm)
    att_t = nx.masked_softmax(s_norm_t * cfg.lambda1_prime, axis=2)
    attended_t = nx.einsum("abij,aid->abjd", att_t, entities)
    phr_b = nx.reshape(phr_u, (1, b_n, m_n, d))
    phr_terms = nx.reduce_sum(phr_b * nx.normalize(attended_t), axis=3)  # (A, B, M)
    t2i = nx.reduce_sum(phr_terms * mask[None].astype(np.float64), axis=2) / counts[None, :]
    return i2t, t2i


def stack_entities(images, cfg: AttentionConfig = AttentionConfig()) -> np.ndarray:
    return np.stack([_entities(im, cfg) for im in images])
