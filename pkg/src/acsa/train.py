"""Plain gradient-descent training on a small corpus."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .alignment import AttentionConfig
from .corpus import Corpus
from .losses import LossWeights, total_loss
from .model import Batch, Params
from .numerics import UsageError
from .retrieval import positives_from_ids, score_corpus, topk_eval

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochStats:
    epoch: int
    loss: float
    top1: float


@dataclass
class TrainResult:
    params: Params
    trace: list[EpochStats] = field(default_factory=list)

    @property
    def final_top1(self) -> float:
        return self.trace[-1].top1 if self.trace else float("nan")


def split_holdout(corpus: Corpus) -> tuple[Corpus, Corpus]:
    """Hold out the last image and last text of every identity that has at
    least two of each; everything else is training data."""
    by_id: dict[int, tuple[list, list]] = {}
    for im in corpus.images:
        by_id.setdefault(im.identity, ([], []))[0].append(im)
    for t in corpus.texts:
        by_id.setdefault(t.identity, ([], []))[1].append(t)
    train_i, train_t, test_i, test_t = [], [], [], []
    for ident in sorted(by_id):
        ims, ts = by_id[ident]
        if len(ims) >= 2 and len(ts) >= 2:
            test_i.append(ims[-1])
            test_t.append(ts[-1])
            ims, ts = ims[:-1], ts[:-1]
        train_i += ims
        train_t += ts
    return corpus.subset(train_i, train_t), corpus.subset(test_i, test_t)


def evaluate_top1(corpus: Corpus, params: Params | None, cfg: AttentionConfig, beta: float = 0.5) -> float:
    sim = score_corpus(corpus.texts, corpus.images, cfg, beta, params)
    pos = positives_from_ids([t.identity for t in corpus.texts], [im.identity for im in corpus.images])
    return topk_eval(sim, pos, (1,)).accuracy[1]


def _pairs(train: Corpus, rng: np.random.Generator) -> list[tuple]:
    texts_by_id: dict[int, list] = {}
    for t in train.texts:
        texts_by_id.setdefault(t.identity, []).append(t)
    pairs = []
    for i in rng.permutation(len(train.images)):
        im = train.images[i]
        cands = texts_by_id.get(im.identity)
        if cands:
            pairs.append((im, cands[int(rng.integers(len(cands)))]))
    return pairs


def train_toy(
    corpus: Corpus,
    epochs: int = 30,
    lr: float = 0.05,
    w: LossWeights = LossWeights(),
    cfg: AttentionConfig = AttentionConfig(),
    seed: int = 0,
    batch_size: int = 8,
    beta: float = 0.5,
    holdout: Corpus | None = None,
) -> TrainResult:
    """Gradient descent on region projections, class weights and the text
    adapter.  ``holdout`` (default: split off from ``corpus``) is scored after
    every epoch."""
    if len({im.identity for im in corpus.images}) < 2:
        raise UsageError("training needs at least two identities")
    if holdout is None:
        train, holdout = split_holdout(corpus)
    else:
        train = corpus
    n_classes = 1 + max(x.identity for x in corpus.images + corpus.texts)
    params = Params.init(corpus.manifest.dim, n_classes, seed)
    rng = np.random.default_rng(seed)
    result = TrainResult(params)
    for epoch in range(1, epochs + 1):
        pairs = _pairs(train, rng)
        losses = []
        for lo in range(0, len(pairs), batch_size):
            chunk = pairs[lo : lo + batch_size]
            batch = Batch.from_pairs([p[0] for p in chunk], [p[1] for p in chunk])
            report = total_loss(batch, cfg, w, params, grad=True)
            if not math.isfinite(report.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {report.metrics()}")
            losses.append(report.total)
            if lr:
                params = params.replace(**{k: v - lr * report.grads[k] for k, v in params.arrays().items()})
        top1 = evaluate_top1(holdout, params, cfg, beta) if holdout.texts and holdout.images else float("nan")
        stats = EpochStats(epoch, float(np.mean(losses)), top1)
        log.info("epoch %d loss=%.6f top1=%.4f", epoch, stats.loss, stats.top1)
        result.trace.append(stats)
    result.params = params
    return result
