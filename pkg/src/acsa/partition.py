"""Six horizontal bands -> four overlapping body regions.

Bands are numbered top to bottom.  Head uses bands 1-2, upper body 2-3,
lower body 4-5 and feet band 6, so band 2 feeds both head and upper body.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import UsageError, Var, einsum

N_SLICES = 6
N_REGIONS = 4
REGION_NAMES = ("head", "upper", "lower", "foot")

# zero-based band indices per region
BANDS = ((0, 1), (1, 2), (3, 4), (5,))

# (4, 6) averaging matrix; row r is the mean over BANDS[r]
BAND_WEIGHTS = np.zeros((N_REGIONS, N_SLICES))
for _r, _bands in enumerate(BANDS):
    BAND_WEIGHTS[_r, list(_bands)] = 1.0 / len(_bands)


@dataclass
class RegionProjection:
    """Per-region affine map ``W_r x + b_r``; identity when disabled."""

    weights: np.ndarray  # (4, d, d)
    bias: np.ndarray  # (4, d)
    enabled: bool = True

    @classmethod
    def identity(cls, dim: int, enabled: bool = True) -> "RegionProjection":
        w = np.broadcast_to(np.eye(dim), (N_REGIONS, dim, dim)).copy()
        return cls(w, np.zeros((N_REGIONS, dim)), enabled)

    @property
    def dim(self) -> int:
        return self.weights.shape[-1]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        d = self.weights.shape[-1]
        if self.weights.shape != (N_REGIONS, d, d) or self.bias.shape != (N_REGIONS, d):
            raise UsageError(
                f"region projection must be (4,d,d)+(4,d), got {self.weights.shape}+{self.bias.shape}"
            )

    def copy(self) -> "RegionProjection":
        return RegionProjection(self.weights.copy(), self.bias.copy(), self.enabled)


def band_means(slices) -> np.ndarray:
    """(..., 6, d) slices -> (..., 4, d) un-projected region vectors."""
    s = np.asarray(slices, dtype=np.float64)
    if s.ndim < 2 or s.shape[-2] != N_SLICES:
        raise UsageError(f"expected {N_SLICES} slices, got shape {s.shape}")
    return np.einsum("rs,...sd->...rd", BAND_WEIGHTS, s)


def project_regions(means, proj: RegionProjection | None, weights=None, bias=None):
    """Apply the per-region projection to (N, 4, d) region means.

    ``weights``/``bias`` may be tape Vars standing in for ``proj``'s arrays,
    which is how training differentiates through this step.
    """
    if proj is not None and not proj.enabled and weights is None:
        return means
    w = proj.weights if weights is None else weights
    b = proj.bias if bias is None else bias
    out = einsum("rde,nre->nrd", w, means)
    if isinstance(out, Var) or isinstance(b, Var):
        return out + b
    return out + b[None]


def partition(slices, proj: RegionProjection | None = None) -> np.ndarray:
    """Four region vectors (head, upper, lower, foot) from six band vectors."""
    s = np.asarray(slices, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != N_SLICES:
        raise UsageError(f"partition needs exactly {N_SLICES} slices, got {s.shape[0] if s.ndim else 0}")
    means = band_means(s)
    if proj is None or not proj.enabled:
        return means
    if proj.dim != s.shape[1]:
        raise UsageError("projection dim does not match slice dim")
    return project_regions(means[None], proj)[0]


def pool_rows(grid) -> np.ndarray:
    """Average an H-row feature grid (H >= 6) into six horizontal bands.

    Band ``r`` covers rows ``[floor(r*H/6), floor((r+1)*H/6))``.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise UsageError("grid must be (H, d)")
    return np.stack([g[lo:hi].mean(axis=0) for lo, hi in band_edges(g.shape[0])])


def band_edges(h: int) -> list[tuple[int, int]]:
    if h < N_SLICES:
        raise UsageError(f"need at least {N_SLICES} rows, got {h}")
    return [((r * h) // N_SLICES, ((r + 1) * h) // N_SLICES) for r in range(N_SLICES)]
