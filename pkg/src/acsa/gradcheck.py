"""Central finite-difference verification of the objective's gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import AttentionConfig
from .corpus import generate_synthetic
from .losses import LossWeights, total_loss
from .model import Batch, Params


@dataclass
class GradCheckResult:
    seed: int
    max_rel_err: float
    n_checked: int
    worst: str

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err <= tol


def rel_err(analytic, numeric) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def toy_problem(seed: int, n: int | None = None, d: int | None = None) -> tuple[Batch, Params]:
    """A small random batch (N <= 6, d <= 8) and randomly perturbed parameters."""
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(2, 7))
    d = d or int(rng.integers(4, 9))
    n_ids = int(rng.integers(1, n + 1))
    corpus = generate_synthetic(n_ids, 2, 2, d, 0.5, seed, map_strength=0.5)
    by_id = {}
    for im in corpus.images:
        by_id.setdefault(im.identity, [[], []])[0].append(im)
    for t in corpus.texts:
        by_id[t.identity][1].append(t)
    imgs, txts = [], []
    for i in range(n):
        ims, ts = by_id[int(rng.integers(n_ids))]
        imgs.append(ims[int(rng.integers(len(ims)))])
        txts.append(ts[int(rng.integers(len(ts)))])
    params = Params.init(d, n_ids, seed)
    params = params.replace(
        proj_weights=params.proj.weights + 0.2 * rng.standard_normal(params.proj.weights.shape),
        proj_bias=0.1 * rng.standard_normal(params.proj.bias.shape),
        text_adapter=params.text_adapter + 0.2 * rng.standard_normal((d, d)),
    )
    return Batch.from_pairs(imgs, txts), params


def check_gradients(
    batch: Batch,
    params: Params,
    cfg: AttentionConfig = AttentionConfig(),
    w: LossWeights = LossWeights(),
    h: float = 1e-5,
    seed: int = -1,
) -> GradCheckResult:
    """Compare every parameter gradient entry with a central difference."""
    analytic = total_loss(batch, cfg, w, params, grad=True).grads
    worst, worst_name, count = 0.0, "", 0
    for name, arr in params.arrays().items():
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            up, down = arr.copy(), arr.copy()
            up[idx] += h
            down[idx] -= h
            f_up = total_loss(batch, cfg, w, params.replace(**{name: up})).total
            f_down = total_loss(batch, cfg, w, params.replace(**{name: down})).total
            numeric[idx] = (f_up - f_down) / (2 * h)
        err = rel_err(analytic[name], numeric)
        count += err.size
        if err.max() > worst:
            worst = float(err.max())
            worst_name = f"{name}{tuple(int(i) for i in np.unravel_index(err.argmax(), err.shape))}"
    return GradCheckResult(seed, worst, count, worst_name)


def run_gradcheck(seeds, cfg: AttentionConfig = AttentionConfig(), w: LossWeights = LossWeights(), h: float = 1e-5):
    return [check_gradients(*toy_problem(s), cfg, w, h, seed=s) for s in seeds]
