"""Multi-scale embedding corpora: entities, the JSONL file format, labels and
a synthetic generator.

File layout, one JSON object per line::

    {"type": "manifest", "dim": d, "k": 4, "m_max": M, "version": 1}
    {"type": "image", "id": ..., "identity": ..., "global": [d], "slices": [6][d]}
    {"type": "text",  "id": ..., "identity": ..., "global": [d], "phrases": [p][d]}

Region vectors are never stored; they are rebuilt from the slices on load.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import expm

from .partition import N_REGIONS, N_SLICES, partition

FORMAT_VERSION = 1

_IMAGE_KEYS = {"type", "id", "identity", "global", "slices"}
_TEXT_KEYS = {"type", "id", "identity", "global", "phrases"}
_MANIFEST_KEYS = {"type", "dim", "k", "m_max", "version"}


class CorpusFormatError(ValueError):
    def __init__(self, message: str, record_id: str | None = None, line: int | None = None):
        where = []
        if record_id is not None:
            where.append(f"record {record_id!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.record_id = record_id
        self.line = line


class LabelError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CorpusManifest:
    dim: int
    k: int = N_REGIONS
    m_max: int = 10
    version: int = FORMAT_VERSION

    def to_record(self) -> dict:
        return {"type": "manifest", "dim": self.dim, "k": self.k, "m_max": self.m_max, "version": self.version}


@dataclass(frozen=True, eq=False)
class ImageEntity:
    id: str
    identity: int
    global_emb: np.ndarray
    slices: np.ndarray  # (6, d)
    regions: np.ndarray = None  # (4, d), derived

    def __post_init__(self):
        object.__setattr__(self, "global_emb", _frozen(self.global_emb))
        object.__setattr__(self, "slices", _frozen(self.slices))
        if self.regions is None:
            object.__setattr__(self, "regions", _frozen(partition(self.slices)))

    @property
    def dim(self) -> int:
        return self.global_emb.shape[0]

    @property
    def entities(self) -> np.ndarray:
        """(5, d): the global vector followed by the four regions."""
        return np.vstack([self.global_emb[None], self.regions])


@dataclass(frozen=True, eq=False)
class TextEntity:
    id: str
    identity: int
    global_emb: np.ndarray
    phrases: np.ndarray  # (p, d)

    def __post_init__(self):
        object.__setattr__(self, "global_emb", _frozen(self.global_emb))
        object.__setattr__(self, "phrases", _frozen(self.phrases))

    @property
    def dim(self) -> int:
        return self.global_emb.shape[0]


@dataclass
class Corpus:
    manifest: CorpusManifest
    images: list[ImageEntity]
    texts: list[TextEntity]
    # ground-truth image->text space map; only set for generated corpora
    text_map: np.ndarray | None = field(default=None, repr=False)

    def __iter__(self):
        return iter((self.manifest, self.images, self.texts))

    def subset(self, images: Iterable[ImageEntity], texts: Iterable[TextEntity]) -> "Corpus":
        return Corpus(self.manifest, list(images), list(texts), self.text_map)


@dataclass(frozen=True)
class MatchLabels:
    """``y[a, b] = 1`` iff image ``a`` and text ``b`` share an identity."""

    y: np.ndarray

    @property
    def q(self) -> np.ndarray:
        """Row-normalised ``y``; raises if some row has no positive."""
        return _row_normalize(self.y)

    @property
    def q_t2i(self) -> np.ndarray:
        return _row_normalize(self.y.T)


def _row_normalize(y: np.ndarray) -> np.ndarray:
    s = y.sum(axis=1, keepdims=True)
    if np.any(s == 0):
        bad = np.flatnonzero(s[:, 0] == 0).tolist()
        raise LabelError(f"rows without a positive: {bad}")
    return y / s


def labels_from_ids(img_ids: Sequence[int], txt_ids: Sequence[int]) -> MatchLabels:
    a = np.asarray(img_ids)
    b = np.asarray(txt_ids)
    if a.size == 0 or b.size == 0:
        raise LabelError("empty batch")
    return MatchLabels((a[:, None] == b[None, :]).astype(np.float64))


def build_labels(images: Sequence[ImageEntity], texts: Sequence[TextEntity]) -> MatchLabels:
    return labels_from_ids([im.identity for im in images], [t.identity for t in texts])


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _vec_list(v: np.ndarray) -> list:
    # float(repr) round-trips exactly through json
    return [float(x) for x in v]


def image_record(im: ImageEntity) -> dict:
    return {
        "type": "image",
        "id": im.id,
        "identity": im.identity,
        "global": _vec_list(im.global_emb),
        "slices": [_vec_list(s) for s in im.slices],
    }


def text_record(t: TextEntity) -> dict:
    return {
        "type": "text",
        "id": t.id,
        "identity": t.identity,
        "global": _vec_list(t.global_emb),
        "phrases": [_vec_list(p) for p in t.phrases],
    }


def dumps_corpus(corpus: Corpus) -> str:
    lines = [json.dumps(corpus.manifest.to_record())]
    lines += [json.dumps(image_record(im)) for im in corpus.images]
    lines += [json.dumps(text_record(t)) for t in corpus.texts]
    return "\n".join(lines) + "\n"


def save_corpus(path, corpus: Corpus) -> None:
    Path(path).write_text(dumps_corpus(corpus))


def _check_vector(v, dim: int, what: str, rid, line):
    if not isinstance(v, list) or len(v) != dim:
        n = len(v) if isinstance(v, list) else type(v).__name__
        raise CorpusFormatError(f"{what} must have {dim} entries, got {n}", rid, line)
    for x in v:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise CorpusFormatError(f"{what} has a non-finite or non-numeric entry", rid, line)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def parse_manifest(rec, line: int = 1) -> CorpusManifest:
    if not isinstance(rec, dict) or rec.get("type") != "manifest":
        raise CorpusFormatError("first record must be the manifest", line=line)
    if set(rec) != _MANIFEST_KEYS:
        raise CorpusFormatError(f"manifest keys must be {sorted(_MANIFEST_KEYS)}", "manifest", line)
    dim, k, m_max, version = rec["dim"], rec["k"], rec["m_max"], rec["version"]
    if not all(_is_int(x) for x in (dim, k, m_max, version)):
        raise CorpusFormatError("manifest fields must be integers", "manifest", line)
    if dim < 2 or k != N_REGIONS or m_max < 1 or version != FORMAT_VERSION:
        raise CorpusFormatError(
            f"manifest out of range (dim>=2, k=={N_REGIONS}, m_max>=1, version=={FORMAT_VERSION})",
            "manifest",
            line,
        )
    return CorpusManifest(dim, k, m_max, version)


def parse_record(rec, manifest: CorpusManifest, line: int | None = None):
    """Validate one entity record against the manifest and build the entity."""
    if not isinstance(rec, dict):
        raise CorpusFormatError("record is not an object", line=line)
    rid = rec.get("id")
    if not isinstance(rid, str) or not rid:
        raise CorpusFormatError("missing or empty id", None, line)
    kind = rec.get("type")
    if kind == "image":
        keys = _IMAGE_KEYS
    elif kind == "text":
        keys = _TEXT_KEYS
    else:
        raise CorpusFormatError(f"unknown record type {kind!r}", rid, line)
    if set(rec) != keys:
        raise CorpusFormatError(f"{kind} record keys must be {sorted(keys)}", rid, line)
    ident = rec["identity"]
    if not _is_int(ident) or ident < 0:
        raise CorpusFormatError("identity must be a non-negative integer", rid, line)
    d = manifest.dim
    _check_vector(rec["global"], d, "global", rid, line)
    if kind == "image":
        slices = rec["slices"]
        if not isinstance(slices, list) or len(slices) != N_SLICES:
            n = len(slices) if isinstance(slices, list) else "none"
            raise CorpusFormatError(f"expected {N_SLICES} slices, got {n}", rid, line)
        for i, s in enumerate(slices):
            _check_vector(s, d, f"slice {i}", rid, line)
        return ImageEntity(rid, ident, rec["global"], slices)
    phrases = rec["phrases"]
    if not isinstance(phrases, list) or not 1 <= len(phrases) <= manifest.m_max:
        n = len(phrases) if isinstance(phrases, list) else "none"
        raise CorpusFormatError(f"phrase count must be in [1, {manifest.m_max}], got {n}", rid, line)
    for i, p in enumerate(phrases):
        _check_vector(p, d, f"phrase {i}", rid, line)
    return TextEntity(rid, ident, rec["global"], phrases)


def loads_corpus(text: str) -> Corpus:
    manifest = None
    images: list[ImageEntity] = []
    texts: list[TextEntity] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"invalid JSON ({exc.msg})", line=lineno) from None
        if manifest is None:
            manifest = parse_manifest(rec, lineno)
            continue
        ent = parse_record(rec, manifest, lineno)
        if ent.id in seen:
            raise CorpusFormatError("duplicate id", ent.id, lineno)
        seen.add(ent.id)
        (images if isinstance(ent, ImageEntity) else texts).append(ent)
    if manifest is None:
        raise CorpusFormatError("missing manifest")
    return Corpus(manifest, images, texts)


def load_corpus(path) -> Corpus:
    return loads_corpus(Path(path).read_text())


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


def random_rotation(d: int, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal ``expm(strength * A)`` for a random skew-symmetric ``A``.

    ``strength=0`` gives the identity; larger values rotate further.
    """
    g = rng.standard_normal((d, d)) / math.sqrt(d)
    return expm(strength * (g - g.T) / math.sqrt(2.0))


def generate_synthetic(
    n_identities: int,
    imgs_per_id: int,
    txts_per_id: int,
    d: int,
    sigma: float,
    seed: int,
    *,
    m_max: int = 10,
    phrases_range: tuple[int, int] = (2, 6),
    global_phrase_frac: float = 0.3,
    map_strength: float = 1.0,
) -> Corpus:
    """Identity-clustered corpus with a known image->text linear map.

    Each identity has a global prototype ``g`` and four region prototypes.
    Images carry ``g`` plus noise and six bands built from the region
    prototypes (band 2 straddles head and upper body).  Texts live in the
    rotated space ``R @ x``: the global is ``R g`` and each phrase is either
    ``R g`` (global scope) or ``R r_c`` for a random region ``c``.  Every
    vector gets i.i.d. ``N(0, sigma^2)`` noise per coordinate.
    """
    if min(n_identities, imgs_per_id, txts_per_id) < 1:
        raise ValueError("all counts must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if d < 4:
        raise ValueError("d must be >= 4")
    lo, hi = phrases_range
    lo, hi = max(1, min(lo, m_max)), max(1, min(hi, m_max))

    rng = np.random.default_rng(seed)
    rot = random_rotation(d, map_strength, rng)
    images, texts = [], []
    for ident in range(n_identities):
        g = rng.standard_normal(d)
        regions = rng.standard_normal((N_REGIONS, d))
        head, upper, lower, foot = regions
        bands = np.stack([head, 0.5 * (head + upper), upper, lower, lower, foot])
        for _ in range(imgs_per_id):
            images.append(
                ImageEntity(
                    f"img{len(images):05d}",
                    ident,
                    g + sigma * rng.standard_normal(d),
                    bands + sigma * rng.standard_normal(bands.shape),
                )
            )
        for _ in range(txts_per_id):
            n_p = int(rng.integers(lo, hi + 1))
            src = []
            for _ in range(n_p):
                if rng.random() < global_phrase_frac:
                    src.append(g)
                else:
                    src.append(regions[rng.integers(N_REGIONS)])
            phrases = np.stack(src) @ rot.T + sigma * rng.standard_normal((n_p, d))
            texts.append(
                TextEntity(f"txt{len(texts):05d}", ident, rot @ g + sigma * rng.standard_normal(d), phrases)
            )
    return Corpus(CorpusManifest(d, N_REGIONS, m_max, FORMAT_VERSION), images, texts, rot)
