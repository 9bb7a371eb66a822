"""Reconstruction scores against a known defect map.

The cost of a reconstruction is its NMSE against the binary truth plus
the l2 norm of whatever signal lies outside a PSF-blurred copy of the
truth, which penalizes false positives far from any defect.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._conv import SpectralKernel
from .field import Field2D, GridSpec, require_same_plane
from .forward import DefectMap
from .psf import PsfStack


def _values(f) -> np.ndarray:
    return np.asarray(f.values if isinstance(f, Field2D) else f, dtype=np.float64)


def nmse(truth, rec) -> float:
    """``||truth - rec||^2 / ||truth - mean(truth)||^2``."""
    if isinstance(truth, Field2D) and isinstance(rec, Field2D):
        require_same_plane(truth.grid, rec.grid, what="truth and reconstruction")
    x, y = _values(truth), _values(rec)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    den = float(np.sum((x - x.mean()) ** 2))
    if den == 0:
        raise ValueError("truth is constant; NMSE is undefined")
    return float(np.sum((x - y) ** 2)) / den


@dataclass(frozen=True)
class PenaltyMask:
    grid: GridSpec
    eta: np.ndarray
    eta_norm: np.ndarray


def penalty_mask(defects: DefectMap, psf: PsfStack) -> PenaltyMask:
    """Defect map blurred by the end-of-pulse PSF frame, scaled to unit max."""
    require_same_plane(defects.grid, psf.grid, what="defects and PSF")
    if not np.any(defects.values):
        raise ValueError("penalty mask needs a non-zero defect map")
    frame = psf.frames[psf.ref_index]
    eta = SpectralKernel(frame, psf.centre_index)(defects.values)
    eta = np.maximum(eta, 0.0)
    peak = eta.max()
    if not peak > 0:
        raise ValueError("blurred defect map is identically zero")
    return PenaltyMask(defects.grid, eta, np.clip(eta / peak, 0.0, 1.0))


def unit_max(rec) -> np.ndarray:
    a = _values(rec)
    peak = a.max(initial=0.0)
    return a / peak if peak > 0 else np.zeros_like(a)


def cost_terms(rec, truth: DefectMap, psf: PsfStack, mask: PenaltyMask | None = None) -> dict:
    """NMSE and penalty parts of the cost, with ``rec`` scaled to unit max."""
    if isinstance(rec, Field2D):
        require_same_plane(rec.grid, truth.grid, what="reconstruction and truth")
    mask = mask or penalty_mask(truth, psf)
    a = unit_max(rec)
    e = nmse(truth, a)
    p = float(np.linalg.norm((1.0 - mask.eta_norm) * a))
    return {"nmse": e, "penalty": p, "cost": e + p}


def reconstruction_cost(rec, truth: DefectMap, psf: PsfStack, mask: PenaltyMask | None = None) -> float:
    """Location-penalized cost ``NMSE(D, a) + ||(1 - eta_norm) . a||_2``.

    ``rec`` is scaled to unit maximum first, so the cost ignores the
    overall amplitude of the reconstruction. An all-zero ``rec`` is
    allowed and scores ``NMSE(D, 0)``.
    """
    return cost_terms(rec, truth, psf, mask)["cost"]


SCORE_COLUMNS = ("run_id", "lambda_21", "lambda_2", "cost", "nmse", "penalty")


def write_scores(rows, path) -> Path:
    """CSV results table, one row per scored reconstruction."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SCORE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k != "run_id" else r[k]) for k in SCORE_COLUMNS})
    return path
