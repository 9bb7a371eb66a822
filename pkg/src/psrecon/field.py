"""Grids, 2D fields, thermogram stacks and the TGS container format.

A TGS file is a single UTF-8 JSON header line followed by the raw frame
data as little-endian float32, row-major within a frame and frames in time
order. Values are promoted to float64 on load.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Union

import numpy as np

TGS_VERSION = 1
_DTYPE_FILE = np.dtype("<f4")

#: Frame rate of the reference camera (Hz).
F_CAM = 160.0


class TGSFormatError(ValueError):
    """Raised for malformed or inconsistent TGS containers."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GridSpec:
    """Pixel grid plus frame timing.

    ``nx``/``ny`` are pixel counts, ``dx``/``dy`` the pitches in metres,
    ``nt`` the number of frames and ``dt`` the frame interval in seconds.
    """

    nx: int
    ny: int
    dx: float = 1e-4
    dy: float = 1e-4
    nt: int = 1
    dt: float = 1.0 / F_CAM

    def __post_init__(self):
        for name in ("nx", "ny", "nt"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"GridSpec.{name} must be an integer >= 1, got {v!r}")
            object.__setattr__(self, name, int(v))
        for name in ("dx", "dy", "dt"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"GridSpec.{name} must be finite and > 0, got {v!r}")
            object.__setattr__(self, name, v)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    def with_nt(self, nt: int) -> "GridSpec":
        return replace(self, nt=nt)

    def same_plane(self, other: "GridSpec") -> bool:
        """True if both grids share pixel counts and pitches."""
        return (self.nx, self.ny, self.dx, self.dy) == (other.nx, other.ny, other.dx, other.dy)

    def x_centres(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.dx

    def y_centres(self) -> np.ndarray:
        return (np.arange(self.ny) + 0.5) * self.dy


def require_same_plane(*grids: GridSpec, what: str = "inputs") -> None:
    g0 = grids[0]
    for g in grids[1:]:
        if not g0.same_plane(g):
            raise ValueError(f"grid mismatch between {what}: {g0} vs {g}")


@dataclass(frozen=True)
class Field2D:
    """A real scalar per pixel on ``grid`` (the grid's ``nt`` is ignored)."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = _readonly(self.values)
        if v.shape != self.grid.shape:
            raise ValueError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field contains non-finite values")
        object.__setattr__(self, "values", v)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True)
class ThermogramStack:
    """Time-ordered temperature frames.

    The first ``t0_frames`` frames are the pre-trigger segment. Post-trigger
    frame ``k`` was recorded at ``t = (k + 1) * dt`` after the trigger.
    ``grid.nt`` counts all frames, pre-trigger ones included.
    """

    grid: GridSpec
    frames: np.ndarray
    t0_frames: int = 0
    pulse_length: float = 0.5

    def __post_init__(self):
        f = _readonly(self.frames)
        if f.ndim != 3 or f.shape != (self.grid.nt,) + self.grid.shape:
            raise ValueError(
                f"frames shape {f.shape} does not match grid (nt, ny, nx) = "
                f"{(self.grid.nt,) + self.grid.shape}"
            )
        bad = ~np.isfinite(f).all(axis=(1, 2))
        if bad.any():
            raise ValueError(f"frame {int(np.argmax(bad))} contains non-finite values")
        if self.t0_frames < 0 or self.t0_frames > self.grid.nt:
            raise ValueError(f"t0_frames={self.t0_frames} outside [0, nt={self.grid.nt}]")
        if not self.pulse_length >= 0:
            raise ValueError("pulse_length must be >= 0")
        object.__setattr__(self, "frames", f)
        object.__setattr__(self, "t0_frames", int(self.t0_frames))
        object.__setattr__(self, "pulse_length", float(self.pulse_length))

    @property
    def post_frames(self) -> np.ndarray:
        return self.frames[self.t0_frames:]

    @property
    def n_post(self) -> int:
        return self.grid.nt - self.t0_frames

    @property
    def times(self) -> np.ndarray:
        """Trigger-relative time of every post-trigger frame."""
        return (np.arange(self.n_post) + 1) * self.grid.dt

    def frame(self, k: int) -> Field2D:
        return Field2D(self.grid, self.frames[k])

    @classmethod
    def from_field(cls, f: Field2D) -> "ThermogramStack":
        return cls(f.grid.with_nt(1), f.values[None], t0_frames=0, pulse_length=0.0)


@dataclass(frozen=True)
class MaterialSpec:
    """Thermal and geometric properties of a plate-like specimen."""

    alpha: float
    rho: float
    cp: float
    L: float
    R: float = 1.0
    k: float | None = None

    def __post_init__(self):
        for name in ("alpha", "rho", "cp", "L"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"MaterialSpec.{name} must be > 0, got {v!r}")
        if not 0.0 <= self.R <= 1.0:
            raise ValueError(f"MaterialSpec.R must lie in [0, 1], got {self.R!r}")
        if self.k is not None:
            if not self.k > 0:
                raise ValueError(f"MaterialSpec.k must be > 0, got {self.k!r}")
            mismatch = abs(self.k / (self.rho * self.cp) - self.alpha) / self.alpha
            if mismatch > 0.02:
                raise ValueError(
                    f"k/(rho*cp) = {self.k / (self.rho * self.cp):.4g} disagrees with "
                    f"alpha = {self.alpha:.4g} by {mismatch:.1%} (> 2%)"
                )

    @property
    def volumetric_heat(self) -> float:
        return self.rho * self.cp


# 316L stainless steel plate from the reference experiment.
STEEL_316L = MaterialSpec(alpha=3.76e-6, rho=7950.0, cp=502.0, L=4.5e-3, R=1.0, k=15.0)


# ---------------------------------------------------------------------------
# TGS container


def _header(stack: ThermogramStack) -> dict:
    g = stack.grid
    return {
        "format": "TGS",
        "version": TGS_VERSION,
        "nx": g.nx,
        "ny": g.ny,
        "nt": g.nt,
        "dx_m": g.dx,
        "dy_m": g.dy,
        "dt_s": g.dt,
        "t0_frames": stack.t0_frames,
        "pulse_s": stack.pulse_length,
    }


def save_stack(stack: Union[ThermogramStack, Field2D], path) -> Path:
    """Write ``stack`` (or a single field as a one-frame stack) to ``path``."""
    if isinstance(stack, Field2D):
        stack = ThermogramStack.from_field(stack)
    path = Path(path)
    header = json.dumps(_header(stack), sort_keys=True).encode("utf-8") + b"\n"
    data = np.ascontiguousarray(stack.frames, dtype=_DTYPE_FILE)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())
    return path


def load_stack(path) -> ThermogramStack:
    """Read a TGS container written by :func:`save_stack`."""
    path = Path(path)
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        meta = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TGSFormatError(f"{path}: malformed header ({exc})") from None
    if not isinstance(meta, dict) or meta.get("format") != "TGS":
        raise TGSFormatError(f"{path}: not a TGS container")
    if meta.get("version") != TGS_VERSION:
        raise TGSFormatError(f"{path}: unsupported TGS version {meta.get('version')!r}")
    try:
        grid = GridSpec(
            nx=meta["nx"], ny=meta["ny"], nt=meta["nt"],
            dx=meta["dx_m"], dy=meta["dy_m"], dt=meta["dt_s"],
        )
        t0_frames = int(meta["t0_frames"])
        pulse = float(meta["pulse_s"])
    except (KeyError, TypeError, ValueError) as exc:
        raise TGSFormatError(f"{path}: malformed header ({exc})") from None

    frame_bytes = grid.nx * grid.ny * _DTYPE_FILE.itemsize
    if len(payload) % frame_bytes:
        raise TGSFormatError(
            f"{path}: payload of {len(payload)} bytes is not a whole number of "
            f"{frame_bytes}-byte frames"
        )
    n_found = len(payload) // frame_bytes
    if n_found != grid.nt:
        raise TGSFormatError(f"{path}: header declares nt={grid.nt} but file holds {n_found} frames")
    frames = np.frombuffer(payload, dtype=_DTYPE_FILE).reshape(grid.nt, grid.ny, grid.nx)
    bad = ~np.isfinite(frames).all(axis=(1, 2))
    if bad.any():
        raise TGSFormatError(f"{path}: frame {int(np.argmax(bad))} contains non-finite values")
    return ThermogramStack(grid, frames.astype(np.float64), t0_frames=t0_frames, pulse_length=pulse)


def load_field(path) -> Field2D:
    stack = load_stack(path)
    if stack.grid.nt != 1:
        raise TGSFormatError(f"{path}: expected a single-frame field, found nt={stack.grid.nt}")
    return Field2D(stack.grid.with_nt(1), stack.frames[0])


# ---------------------------------------------------------------------------
# Operations


def estimate_t0(stack: ThermogramStack, t0_frames: int = 50) -> Field2D:
    """Per-pixel mean of the ``t0_frames`` frames just before the trigger."""
    if t0_frames < 1:
        raise ValueError("t0_frames must be >= 1")
    if t0_frames > stack.t0_frames:
        raise ValueError(
            f"t0_frames={t0_frames} exceeds the {stack.t0_frames} pre-trigger frames available"
        )
    pre = stack.frames[stack.t0_frames - t0_frames: stack.t0_frames]
    return Field2D(stack.grid.with_nt(1), pre.mean(axis=0))


def subtract_t0(stack: ThermogramStack, t0_frames: int = 50) -> ThermogramStack:
    """Return ``T_diff``: post-trigger frames minus the pre-trigger mean.

    The pre-trigger segment is dropped from the result.
    """
    t0 = estimate_t0(stack, t0_frames)
    post = stack.post_frames - t0.values
    return ThermogramStack(
        stack.grid.with_nt(stack.n_post), post, t0_frames=0, pulse_length=stack.pulse_length
    )


def crop_roi(obj, x0: int, y0: int, w: int, h: int):
    """Crop a field or stack to the ``w`` x ``h`` pixel rectangle at column
    ``x0``, row ``y0``."""
    g = obj.grid
    if min(x0, y0) < 0 or w < 1 or h < 1 or x0 + w > g.nx or y0 + h > g.ny:
        raise ValueError(f"rectangle (x0={x0}, y0={y0}, w={w}, h={h}) exceeds grid {g.nx}x{g.ny}")
    grid = replace(g, nx=w, ny=h)
    if isinstance(obj, ThermogramStack):
        return ThermogramStack(
            grid, obj.frames[:, y0:y0 + h, x0:x0 + w],
            t0_frames=obj.t0_frames, pulse_length=obj.pulse_length,
        )
    return type(obj)(grid, obj.values[y0:y0 + h, x0:x0 + w])
