"""Training objectives.

* projection matching (CMPM): KL between the softmax of cross-modal
  projections and the label distribution, both query directions summed;
* projection classification (CMPC): identity cross-entropy of each feature
  projected onto its partner's direction, with L2-normalised class columns;
* cross-scale matching (ACSA): KL between clamped attention similarities,
  normalised per query, and the label distribution;
* the weighted total ``cmpm + mu * cmpc + gamma * (acsa_i2t + acsa_t2i)``.

Every function accepts numpy arrays or tape Vars, so the same code computes
plain values and differentiable ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .alignment import AttentionConfig, batch_scores
from .corpus import MatchLabels
from .model import Batch, Params, encode_images, encode_texts
from .numerics import Tape, UsageError


class DegeneracyError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LossWeights:
    mu: float = 4.0
    gamma: float = 0.1
    eps_kl: float = 1e-8
    # scale on the projection logits of the matching loss; 1 is the plain form
    lambda2: float = 1.0

    def __post_init__(self):
        if self.mu < 0 or self.gamma < 0:
            raise UsageError("loss weights must be non-negative")
        if not 0 < self.eps_kl <= 1e-6:
            raise UsageError("eps_kl must lie in (0, 1e-6]")
        if self.lambda2 <= 0:
            raise UsageError("lambda2 must be positive")


@dataclass
class LossReport:
    cmpm: float
    cmpc: float
    acsa_i2t: float
    acsa_t2i: float
    total: float
    degenerate_rows: int = 0
    grads: dict[str, np.ndarray] | None = field(default=None, repr=False)

    @property
    def acsa(self) -> float:
        return self.acsa_i2t + self.acsa_t2i

    def metrics(self) -> dict[str, float]:
        return {
            "cmpm": self.cmpm,
            "cmpc": self.cmpc,
            "acsa_i2t": self.acsa_i2t,
            "acsa_t2i": self.acsa_t2i,
            "acsa": self.acsa,
            "total": self.total,
        }


def weighted_total(cmpm, cmpc, acsa_i2t, acsa_t2i, w: LossWeights):
    return cmpm + w.mu * cmpc + w.gamma * (acsa_i2t + acsa_t2i)


def _scalar(x) -> float:
    return float(nx._val(x))


def _kl_mean(p, q: np.ndarray, eps: float):
    """(1/N) sum_a sum_b p log(p / (q + eps))."""
    return nx.reduce_sum(nx.kl_terms(p, np.log(q + eps))) / q.shape[0]


def cmpm_loss(img_globals, txt_globals, labels: MatchLabels, eps_kl: float = 1e-8, lambda2: float = 1.0):
    """Projection matching loss summed over the image->text and text->image views."""
    for x in (img_globals, txt_globals):
        if np.any(np.linalg.norm(nx._val(x), axis=1) == 0):
            raise DegeneracyError("zero-norm global embedding in batch")
    if nx._val(img_globals).shape[0] != nx._val(txt_globals).shape[0]:
        raise UsageError("image and text batches differ in size")
    logits_i = nx.matmul(img_globals, nx.transpose(nx.normalize(txt_globals))) * lambda2
    logits_t = nx.matmul(txt_globals, nx.transpose(nx.normalize(img_globals))) * lambda2
    p_i = nx.exp(nx.log_softmax(logits_i, axis=1))
    p_t = nx.exp(nx.log_softmax(logits_t, axis=1))
    return _kl_mean(p_i, labels.q, eps_kl) + _kl_mean(p_t, labels.q_t2i, eps_kl)


def cmpc_loss(img_globals, txt_globals, identities, class_weights):
    """Projection classification loss, both directions summed.

    ``class_weights`` is (d, n_classes); columns are L2-normalised before use.
    """
    ids = np.asarray(identities)
    n_cls = nx._val(class_weights).shape[1]
    if ids.size and (ids.min() < 0 or ids.max() >= n_cls):
        raise UsageError(f"identity outside [0, {n_cls})")
    w_unit = nx.transpose(nx.normalize(nx.transpose(class_weights)))
    onehot = np.eye(n_cls)[ids]

    def one_way(u, partner):
        pu = nx.normalize(partner)
        proj = nx.reduce_sum(u * pu, axis=1, keepdims=True) * pu
        logp = nx.log_softmax(nx.matmul(proj, w_unit), axis=1)
        return -nx.reduce_sum(logp * onehot) / len(ids)

    return one_way(img_globals, txt_globals) + one_way(txt_globals, img_globals)


def _match_probs(sims, eps: float):
    """Clamp, normalise each row; rows with no positive mass become uniform."""
    clamped = nx.relu(sims)
    mass = nx._val(clamped).sum(axis=1, keepdims=True)
    dead = mass == 0.0
    p = clamped / (nx.reduce_sum(clamped, axis=1, keepdims=True) + eps)
    n = nx._val(sims).shape[1]
    if np.any(dead):
        p = nx.where_rows(dead, np.full(nx._val(sims).shape, 1.0 / n), p)
    return p, int(dead.sum())


def acsa_terms(s_i2t, s_t2i, labels: MatchLabels, eps_kl: float = 1e-8):
    """``(loss_i2t, loss_t2i, degenerate_rows)``; both score matrices are
    indexed ``[image, text]``."""
    p_i, dead_i = _match_probs(s_i2t, eps_kl)
    p_t, dead_t = _match_probs(nx.transpose(s_t2i), eps_kl)
    return _kl_mean(p_i, labels.q, eps_kl), _kl_mean(p_t, labels.q_t2i, eps_kl), dead_i + dead_t


def acsa_loss(s_i2t, s_t2i, labels: MatchLabels, eps_kl: float = 1e-8):
    l_i2t, l_t2i, _ = acsa_terms(s_i2t, s_t2i, labels, eps_kl)
    return l_i2t + l_t2i


def total_loss(
    batch: Batch,
    cfg: AttentionConfig,
    w: LossWeights,
    params: Params,
    *,
    grad: bool = False,
) -> LossReport:
    """Evaluate the weighted objective on one batch; optionally its gradient
    with respect to every array in ``params``."""
    tape = Tape() if grad else None
    arrays = params.arrays()
    leaves = {k: tape.leaf(v) for k, v in arrays.items()} if grad else arrays

    proj_w = leaves["proj_weights"] if (grad and params.proj.enabled) else None
    proj_b = leaves["proj_bias"] if (grad and params.proj.enabled) else None
    ents = encode_images(batch.img_globals, batch.region_means, params, cfg, proj_w, proj_b)
    adapter = leaves.get("text_adapter")
    txt_g, phrases = encode_texts(batch.txt_globals, batch.phrases, params, adapter)
    img_g = batch.img_globals
    if grad:
        img_g = tape.const(img_g)

    labels = batch.labels
    cmpm = cmpm_loss(img_g, txt_g, labels, w.eps_kl, w.lambda2)
    cmpc = cmpc_loss(img_g, txt_g, batch.img_ids, leaves["class_weights"])
    s_i2t, s_t2i = batch_scores(ents, phrases, batch.mask, cfg)
    l_i2t, l_t2i, dead = acsa_terms(s_i2t, s_t2i, labels, w.eps_kl)
    total = weighted_total(cmpm, cmpc, l_i2t, l_t2i, w)

    report = LossReport(_scalar(cmpm), _scalar(cmpc), _scalar(l_i2t), _scalar(l_t2i), _scalar(total), dead)
    if grad:
        g = tape.backward(total)
        report.grads = {k: g[v] for k, v in leaves.items()}
    return report
