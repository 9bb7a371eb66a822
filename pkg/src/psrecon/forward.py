"""Closed-form forward simulation of structured-illumination thermograms.

For one illumination ``p`` the simulated rise is

    T(t) = Phi_t * (p + zeta * D . (Phi_ref * p)) + T_0 + noise

where ``*`` is a zero-padded spatial convolution, ``.`` is element-wise
and ``Phi_ref`` is the end-of-pulse PSF frame scaled to unit sum, so that
a fully lit neighbourhood couples into a defect with weight 1 and
``zeta`` keeps its meaning as a contrast fraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._conv import SpectralKernel
from .field import Field2D, GridSpec, ThermogramStack, require_same_plane
from .psf import PsfStack


@dataclass(frozen=True)
class DefectMap(Field2D):
    """Non-negative defect indicator (binary for ground truth)."""

    def __post_init__(self):
        super().__post_init__()
        if np.any(self.values < 0):
            raise ValueError("defect map values must be >= 0")

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0) | (self.values == 1)))


@dataclass(frozen=True)
class ForwardSpec:
    zeta: float = 0.494
    noise_sigma: float = 0.025
    t0: Field2D | float = 0.0
    seed: int = 0
    pre_frames: int = 0

    def __post_init__(self):
        if not 0 <= self.zeta < 1:
            raise ValueError(f"zeta must lie in [0, 1), got {self.zeta!r}")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.pre_frames < 0:
            raise ValueError("pre_frames must be >= 0")


# ---------------------------------------------------------------------------
# defect geometry


def square_defect(grid: GridSpec, centre: tuple[float, float], size: float, angle: float = 0.0) -> np.ndarray:
    """Boolean mask of pixel centres inside a ``size`` square rotated by
    ``angle`` radians about ``centre`` (metres)."""
    x = grid.x_centres()[None, :] - centre[0]
    y = grid.y_centres()[:, None] - centre[1]
    c, s = math.cos(angle), math.sin(angle)
    u = x * c + y * s
    v = -x * s + y * c
    h = size / 2
    return (np.abs(u) < h) & (np.abs(v) < h)


def defect_pair_centres(centre, size, spacing, angle=0.0):
    """Centres of two ``size`` squares with edge gap ``spacing`` placed
    along direction ``angle``."""
    off = (size + spacing) / 2
    dx, dy = off * math.cos(angle), off * math.sin(angle)
    return [(centre[0] - dx, centre[1] - dy), (centre[0] + dx, centre[1] + dy)]


def defect_layout(grid: GridSpec, defects: Sequence[dict]) -> tuple[DefectMap, list[np.ndarray]]:
    """Rasterize ``[{"centre": (x, y), "size": s, "angle_deg": a}, ...]``.

    Returns the binary map and one mask per defect.
    """
    masks = []
    for d in defects:
        masks.append(square_defect(grid, tuple(d["centre"]), d["size"], math.radians(d.get("angle_deg", 0.0))))
    values = np.zeros(grid.shape)
    for m in masks:
        values[m] = 1.0
    return DefectMap(grid.with_nt(1), values), masks


# ---------------------------------------------------------------------------
# simulation


class ForwardOperator:
    """Precomputed spectra for repeated simulations with one PSF."""

    def __init__(self, psf: PsfStack, workers: int | None = None):
        self.psf = psf
        self.outer = SpectralKernel(psf.kernel, psf.centre_index, workers)
        ref = psf.frames[psf.ref_index]
        total = ref.sum()
        if not total > 0:
            raise ValueError("reference PSF frame is identically zero")
        self.inner = SpectralKernel(ref / total, psf.centre_index, workers)

    def coupling(self, pattern: np.ndarray) -> np.ndarray:
        """``Phi_ref * pattern``: local heating seen by a defect."""
        return self.inner(pattern)

    def source(self, pattern: np.ndarray, defects: np.ndarray, zeta: float) -> np.ndarray:
        return pattern + zeta * defects * self.coupling(pattern)

    def response(self, source: np.ndarray) -> np.ndarray:
        """Time-resolved temperature rise ``Phi_t * source``, shape (nt, ny, nx)."""
        return self.outer(source)

    def pristine(self, pattern: np.ndarray) -> np.ndarray:
        return self.response(pattern)

    def defect_excess(self, pattern: np.ndarray, defects: np.ndarray) -> np.ndarray:
        """Response to the defect term at ``zeta = 1``."""
        return self.response(defects * self.coupling(pattern))


def _check_inputs(pattern_field: Field2D, defects: Field2D, psf: PsfStack):
    require_same_plane(pattern_field.grid, defects.grid, psf.grid, what="pattern, defects and PSF")


def _t0_values(t0, grid: GridSpec) -> np.ndarray:
    if isinstance(t0, Field2D):
        require_same_plane(t0.grid, grid, what="T_0 and PSF")
        return t0.values
    return np.full(grid.shape, float(t0))


def simulate_measurement(
    pattern_field: Field2D,
    defects: DefectMap,
    psf: PsfStack,
    spec: ForwardSpec,
    rng: np.random.Generator | None = None,
    op: ForwardOperator | None = None,
) -> ThermogramStack:
    """Synthesize one measurement.

    With ``spec.pre_frames > 0`` the stack starts with that many
    pre-trigger frames holding ``T_0`` plus noise. Noise is i.i.d.
    Gaussian per pixel and frame, drawn from ``rng`` (default: a generator
    seeded with ``spec.seed``).
    """
    _check_inputs(pattern_field, defects, psf)
    op = op or ForwardOperator(psf)
    src = op.source(pattern_field.values, defects.values, spec.zeta)
    rise = op.response(src)
    t0 = _t0_values(spec.t0, psf.grid)
    frames = np.concatenate([np.zeros((spec.pre_frames,) + psf.grid.shape), rise]) + t0
    if spec.noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(spec.seed)
        frames = frames + rng.normal(0.0, spec.noise_sigma, frames.shape)
    grid = psf.grid.with_nt(frames.shape[0])
    return ThermogramStack(grid, frames, t0_frames=spec.pre_frames, pulse_length=psf.spec.pulse_length)


def measurement_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-measurement noise streams derived from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def simulate_set(
    pattern_fields: Sequence[Field2D], defects: DefectMap, psf: PsfStack, spec: ForwardSpec
) -> list[ThermogramStack]:
    op = ForwardOperator(psf)
    rngs = measurement_rngs(spec.seed, len(pattern_fields))
    return [simulate_measurement(p, defects, psf, spec, rng=r, op=op) for p, r in zip(pattern_fields, rngs)]


# ---------------------------------------------------------------------------
# fitting


def r_squared(prediction, measured) -> float:
    """Coefficient of determination over all pixels and frames."""
    y_hat = np.asarray(getattr(prediction, "frames", prediction), dtype=np.float64)
    y = np.asarray(getattr(measured, "frames", measured), dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ValueError(f"shape mismatch {y_hat.shape} vs {y.shape}")
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise ValueError("measured data has zero variance")
    return float(1.0 - np.sum((y - y_hat) ** 2) / ss_tot)


def fit_zeta(
    measured: ThermogramStack,
    pattern_field: Field2D,
    defects: DefectMap,
    psf: PsfStack,
    t0: Field2D | float = 0.0,
) -> tuple[float, float]:
    """Least-squares defect contrast and the R^2 of the fitted model.

    The model is affine in ``zeta``, so the optimum is the projection of
    the residual after the pristine response onto the defect response.
    Only post-trigger frames are compared.
    """
    _check_inputs(pattern_field, defects, psf)
    require_same_plane(measured.grid, psf.grid, what="measurement and PSF")
    y = measured.post_frames
    if y.shape[0] != psf.grid.nt:
        raise ValueError(f"measurement has {y.shape[0]} post-trigger frames, PSF has {psf.grid.nt}")
    op = ForwardOperator(psf)
    base = op.pristine(pattern_field.values) + _t0_values(t0, psf.grid)
    g = op.defect_excess(pattern_field.values, defects.values)
    gg = float(np.sum(g * g))
    if gg == 0:
        raise ValueError("defect response is identically zero; zeta is not identifiable")
    zeta = float(np.sum(g * (y - base)) / gg)
    return zeta, r_squared(base + zeta * g, y)
