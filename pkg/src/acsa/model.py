"""Trainable parameters, mini-batches, and the encoders that apply them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .alignment import ENTITY_SETS, AttentionConfig, pad_phrases
from .corpus import ImageEntity, TextEntity, labels_from_ids, MatchLabels
from .partition import RegionProjection, band_means, project_regions


@dataclass
class Params:
    """Region projections, identity classifier columns and the text adapter."""

    proj: RegionProjection
    class_weights: np.ndarray  # (d, n_classes)
    text_adapter: np.ndarray | None = None  # (d, d), applied to text globals and phrases

    @classmethod
    def init(cls, dim: int, n_classes: int, seed: int = 0, *, adapter: bool = True) -> "Params":
        rng = np.random.default_rng(seed)
        return cls(
            RegionProjection.identity(dim),
            rng.standard_normal((dim, n_classes)),
            np.eye(dim) if adapter else None,
        )

    @property
    def dim(self) -> int:
        return self.class_weights.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {
            "proj_weights": self.proj.weights,
            "proj_bias": self.proj.bias,
            "class_weights": self.class_weights,
        }
        if self.text_adapter is not None:
            out["text_adapter"] = self.text_adapter
        return out

    def replace(self, **arrays) -> "Params":
        a = {**self.arrays(), **arrays}
        return Params(
            RegionProjection(a["proj_weights"], a["proj_bias"], self.proj.enabled),
            a["class_weights"],
            a.get("text_adapter"),
        )

    def copy(self) -> "Params":
        return self.replace(**{k: v.copy() for k, v in self.arrays().items()})

    def save(self, path) -> None:
        np.savez(path, enabled=self.proj.enabled, **self.arrays())

    @classmethod
    def load(cls, path) -> "Params":
        with np.load(path) as z:
            return cls(
                RegionProjection(z["proj_weights"], z["proj_bias"], bool(z["enabled"])),
                z["class_weights"],
                z["text_adapter"] if "text_adapter" in z else None,
            )


@dataclass
class Batch:
    """N aligned (image, text) pairs; row ``a`` of each side belongs together."""

    img_globals: np.ndarray  # (N, d)
    region_means: np.ndarray  # (N, 4, d), un-projected
    img_ids: np.ndarray
    txt_globals: np.ndarray  # (N, d)
    phrases: np.ndarray  # (N, M, d)
    mask: np.ndarray  # (N, M)
    txt_ids: np.ndarray

    @classmethod
    def from_pairs(cls, images: list[ImageEntity], texts: list[TextEntity]) -> "Batch":
        phrases, mask = pad_phrases(texts)
        return cls(
            np.stack([im.global_emb for im in images]),
            band_means(np.stack([im.slices for im in images])),
            np.array([im.identity for im in images]),
            np.stack([t.global_emb for t in texts]),
            phrases,
            mask,
            np.array([t.identity for t in texts]),
        )

    @property
    def size(self) -> int:
        return len(self.img_ids)

    @property
    def labels(self) -> MatchLabels:
        return labels_from_ids(self.img_ids, self.txt_ids)


def encode_images(img_globals, region_means, params: Params | None, cfg: AttentionConfig, proj_w=None, proj_b=None):
    """(N, K, d) visual entities after the region projection.

    ``proj_w``/``proj_b`` may be tape Vars replacing the params' arrays.
    """
    n, _, d = np.shape(region_means)
    if params is None or (not params.proj.enabled and proj_w is None):
        regions = region_means
    else:
        regions = project_regions(region_means, params.proj, proj_w, proj_b)
    ents = nx.concat([np.reshape(img_globals, (n, 1, d)), regions], axis=1)
    sel = ENTITY_SETS[cfg.entities]
    if sel == slice(0, 5):
        return ents
    return nx.getitem(ents, (slice(None), sel))


def encode_texts(txt_globals, phrases, params: Params | None, adapter=None):
    """Apply the text adapter (if any) to text globals and padded phrases."""
    a = adapter if adapter is not None else (None if params is None else params.text_adapter)
    if a is None:
        return txt_globals, phrases
    return nx.matmul(txt_globals, nx.transpose(a)), nx.einsum("bme,de->bmd", phrases, a)


def encode_corpus(images, texts, params: Params | None, cfg: AttentionConfig):
    """Numpy arrays ready for :func:`acsa.alignment.batch_scores`."""
    ents = encode_images(
        np.stack([im.global_emb for im in images]),
        band_means(np.stack([im.slices for im in images])),
        params,
        cfg,
    )
    phrases, mask = pad_phrases(texts)
    tg, ph = encode_texts(np.stack([t.global_emb for t in texts]), phrases, params)
    return ents, tg, ph, mask
