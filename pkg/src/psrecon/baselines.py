"""Conventional single-illumination evaluations for comparison.

PPT phases are referenced to the trigger: post-trigger frame ``k``
belongs to ``t = (k + 1) dt``, and the DFT is taken with that time
origin so a cosine starting at the trigger has phase zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import fft as sfft

from .field import Field2D, ThermogramStack


@dataclass(frozen=True)
class PptResult:
    frequency: float
    bin: int
    amplitude: Field2D
    phase: Field2D


def frame_index(stack: ThermogramStack, t_eval: float) -> int:
    """Post-trigger frame nearest to ``t_eval``; ties go to the earlier frame."""
    dt = stack.grid.dt
    n = stack.n_post
    if n < 1:
        raise ValueError("stack has no post-trigger frames")
    if not (0.5 * dt - 1e-12 <= t_eval <= (n + 0.5) * dt + 1e-12):
        raise ValueError(f"t_eval={t_eval!r} s outside the recorded range [{dt:g}, {n * dt:g}] s")
    u = round(t_eval / dt - 1.0, 9)
    return min(max(math.ceil(u - 0.5), 0), n - 1)


def difference_thermogram(stack: ThermogramStack, t_eval: float) -> Field2D:
    k = frame_index(stack, t_eval)
    return Field2D(stack.grid.with_nt(1), stack.post_frames[k])


def pristine_subtracted(stack: ThermogramStack, pristine_region, t_eval: float) -> Field2D:
    """Difference thermogram minus its mean over ``(x0, y0, w, h)``."""
    x0, y0, w, h = (int(v) for v in pristine_region)
    if w < 1 or h < 1:
        raise ValueError("pristine region is empty")
    g = stack.grid
    if x0 < 0 or y0 < 0 or x0 + w > g.nx or y0 + h > g.ny:
        raise ValueError(f"pristine region {pristine_region} exceeds the {g.nx}x{g.ny} grid")
    frame = difference_thermogram(stack, t_eval).values
    ref = frame[y0:y0 + h, x0:x0 + w].mean()
    return Field2D(g.with_nt(1), frame - ref)


def _windowed(stack: ThermogramStack, window: str | None) -> np.ndarray:
    y = stack.post_frames
    if y.shape[0] < 2:
        raise ValueError("PPT needs at least two post-trigger frames")
    if window == "hann":
        return y * np.hanning(y.shape[0])[:, None, None]
    if window is not None:
        raise ValueError(f"window must be None or 'hann', got {window!r}")
    return y


def ppt_spectrum(stack: ThermogramStack, window: str | None = None):
    """Per-pixel DFT over post-trigger frames.

    Returns ``(freqs, spectrum)`` with ``spectrum`` of shape (nt, ny, nx)
    covering all bins, phase-referenced to the trigger.
    """
    y = _windowed(stack, window)
    nt = y.shape[0]
    j = np.arange(nt)
    spec = sfft.fft(y, axis=0) * np.exp(-2j * np.pi * j / nt)[:, None, None]
    return sfft.fftfreq(nt, stack.grid.dt), spec


def ppt(stack: ThermogramStack, f: float, window: str | None = None) -> PptResult:
    """Amplitude and phase images at the DFT bin nearest to ``f``.

    The reported ``frequency`` is that bin's exact frequency
    ``j / (nt dt)``.
    """
    nt, dt = stack.n_post, stack.grid.dt
    nyquist = 0.5 / dt
    if not 0 <= f <= nyquist * (1 + 1e-12):
        raise ValueError(f"f={f!r} Hz outside [0, {nyquist:g}] Hz")
    y = _windowed(stack, window)
    j = min(int(math.floor(f * nt * dt + 0.5)), nt // 2)
    c = sfft.rfft(y, axis=0)[j] * np.exp(-2j * np.pi * j / nt)
    g = stack.grid.with_nt(1)
    phase = np.angle(c)
    phase = np.where(phase <= -np.pi, phase + 2 * np.pi, phase)
    return PptResult(j / (nt * dt), j, Field2D(g, np.abs(c)), Field2D(g, phase))


def export_pgm(values, path, vmin: float | None = None, vmax: float | None = None) -> dict:
    """8-bit binary PGM with linear min/max scaling; returns the scaling."""
    a = np.asarray(getattr(values, "values", values), dtype=np.float64)
    lo = float(a.min()) if vmin is None else float(vmin)
    hi = float(a.max()) if vmax is None else float(vmax)
    span = hi - lo
    if span > 0:
        img = np.clip(np.round((a - lo) / span * 255.0), 0, 255).astype(np.uint8)
    else:
        img = np.zeros(a.shape, dtype=np.uint8)
    h, w = img.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    return {"min": lo, "max": hi}
