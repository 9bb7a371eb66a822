"""Pseudo-random binary illumination patterns with balanced coverage.

Patterns are generated sequentially: each new pattern first activates
pixels whose running activation share is below the fill factor, then
tops up at random from the rest. Randomness comes from numpy's Philox
4x64-10 counter-based generator keyed by the seed, and subsets are drawn
by Fisher-Yates permutation, so a seed reproduces a set bit-for-bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .field import Field2D, GridSpec


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def min_patterns(beta: float) -> int:
    """Fewest patterns that can cover every pixel at fill factor ``beta``."""
    if not 0 < beta <= 1:
        raise ValueError(f"beta must lie in (0, 1], got {beta!r}")
    return math.ceil(1.0 / beta)


def n_active(beta: float, n_pix_total: int) -> int:
    return math.ceil(beta * n_pix_total)


@dataclass(frozen=True)
class PatternSet:
    """``n_m`` binary masks on a ``rows x cols`` cluster lattice.

    ``d_spix`` is the cluster edge on the specimen in metres and
    ``n_clustered`` the number of projector pixels along that edge.
    """

    beta: float
    shape: tuple[int, int]
    patterns: np.ndarray
    seed: int
    n_clustered: int = 20
    d_spix: float = 0.4e-3

    def __post_init__(self):
        p = np.array(self.patterns, dtype=np.uint8, copy=True)
        if p.ndim != 3 or p.shape[1:] != tuple(self.shape):
            raise ValueError(f"patterns must have shape (n_m, {self.shape[0]}, {self.shape[1]})")
        if p.max(initial=0) > 1:
            raise ValueError("patterns must be binary")
        p.setflags(write=False)
        object.__setattr__(self, "patterns", p)
        object.__setattr__(self, "shape", (int(self.shape[0]), int(self.shape[1])))

    @property
    def n_m(self) -> int:
        return self.patterns.shape[0]

    @property
    def n_pix_total(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def n_target(self) -> int:
        return n_active(self.beta, self.n_pix_total)

    @property
    def d_pix(self) -> float:
        return self.d_spix / self.n_clustered


def _fill(n: int, n_fill: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``min(n, n_fill)`` positions chosen uniformly from ``n``."""
    k = min(n, n_fill)
    if k == n:
        return np.arange(n)
    return np.sort(rng.permutation(n)[:k])


def generate_patterns(
    beta: float,
    n_pix_total: int | None = None,
    n_m: int = 20,
    seed: int = 0,
    *,
    shape: tuple[int, int] | None = None,
    n_clustered: int = 20,
    d_spix: float = 0.4e-3,
) -> PatternSet:
    """Sequential balanced pattern generation.

    Parameters
    ----------
    beta : float
        Fill factor in (0, 1].
    n_pix_total : int, optional
        Pixels per pattern. Taken from ``shape`` when omitted; a lone count
        is laid out as a single row.
    n_m : int
        Number of patterns.
    seed : int
        Key of the Philox generator.
    shape : (rows, cols), optional
        Cluster lattice layout; ``rows * cols`` must equal ``n_pix_total``.

    Notes
    -----
    The running share for pattern ``m`` (1-based) is the activation count of
    patterns ``1..m-1`` divided by ``m``, i.e. the not-yet-filled pattern
    is counted as a zero. Pixels with share strictly below ``beta`` are the
    preferred candidates.
    """
    if shape is None:
        if n_pix_total is None:
            raise ValueError("give n_pix_total or shape")
        shape = (1, int(n_pix_total))
    elif n_pix_total is not None and shape[0] * shape[1] != n_pix_total:
        raise ValueError(f"shape {shape} does not hold n_pix_total={n_pix_total} pixels")
    n = shape[0] * shape[1]
    if n < 1:
        raise ValueError("n_pix_total must be >= 1")
    if n_m < 1:
        raise ValueError("n_m must be >= 1")
    if not 0 < beta <= 1:
        raise ValueError(f"beta must lie in (0, 1], got {beta!r}")

    rng = make_rng(seed)
    target = n_active(beta, n)
    out = np.zeros((n_m, n), dtype=np.uint8)
    counts = np.zeros(n, dtype=np.int64)

    out[0, _fill(n, target, rng)] = 1
    counts += out[0]
    for m in range(2, n_m + 1):
        row = out[m - 1]
        share = counts / m
        low = np.flatnonzero(share < beta)
        row[low[_fill(low.size, target, rng)]] = 1
        left = target - int(row.sum())
        if left > 0:
            rest = np.flatnonzero(~(share < beta))
            row[rest[_fill(rest.size, left, rng)]] = 1
        counts += row
    return PatternSet(
        beta, tuple(shape), out.reshape((n_m,) + tuple(shape)), seed,
        n_clustered=n_clustered, d_spix=d_spix,
    )


def independent_patterns(beta: float, shape: tuple[int, int], n_m: int, rng: np.random.Generator) -> np.ndarray:
    """``n_m`` patterns each drawn independently with exactly
    ``ceil(beta * n)`` active pixels (comparison baseline)."""
    n = shape[0] * shape[1]
    target = n_active(beta, n)
    out = np.zeros((n_m, n), dtype=np.uint8)
    for m in range(n_m):
        out[m, rng.permutation(n)[:target]] = 1
    return out.reshape((n_m,) + tuple(shape))


@dataclass(frozen=True)
class HomogeneityReport:
    shares: np.ndarray
    min_share: float
    max_share: float
    mean_share: float
    std_share: float
    full_coverage: bool


def homogeneity(pset: PatternSet | np.ndarray) -> HomogeneityReport:
    """Per-pixel activation share over the set and its spread."""
    p = pset.patterns if isinstance(pset, PatternSet) else np.asarray(pset)
    if p.shape[0] < 1:
        raise ValueError("need at least one pattern")
    counts = p.reshape(p.shape[0], -1).sum(axis=0, dtype=np.int64)
    shares = (counts / p.shape[0]).reshape(p.shape[1:])
    n = counts.size
    # mean from integer totals so it equals n_target / n without rounding drift
    return HomogeneityReport(
        shares=shares,
        min_share=float(shares.min()),
        max_share=float(shares.max()),
        mean_share=float(counts.sum() / (p.shape[0] * n)),
        std_share=float(shares.std()),
        full_coverage=bool(counts.min() > 0),
    )


def _overlap(n_pix: int, pitch: float, n_cells: int, size: float, origin: float) -> np.ndarray:
    """Fractional overlap of each pixel with each cluster cell along one axis."""
    pe = np.arange(n_pix + 1) * pitch
    ce = origin + np.arange(n_cells + 1) * size
    hi = np.minimum(pe[1:, None], ce[None, 1:])
    lo = np.maximum(pe[:-1, None], ce[None, :-1])
    return np.clip(hi - lo, 0.0, None) / pitch


def cluster_to_field(
    pset: PatternSet, index: int, grid: GridSpec, origin: tuple[float, float] = (0.0, 0.0)
) -> Field2D:
    """Rasterize one pattern onto the measurement grid.

    Each active cluster is a ``d_spix`` square whose lattice starts at
    ``origin = (x0, y0)`` metres; pixels cut by a cluster edge receive
    their covered area fraction.
    """
    rows, cols = pset.shape
    x0, y0 = origin
    eps = 1e-9 * max(grid.dx, grid.dy)
    if (
        x0 < -eps or y0 < -eps
        or x0 + cols * pset.d_spix > grid.nx * grid.dx + eps
        or y0 + rows * pset.d_spix > grid.ny * grid.dy + eps
    ):
        raise ValueError(
            f"cluster raster {cols}x{rows} of {pset.d_spix:g} m at {origin} exceeds the "
            f"{grid.nx * grid.dx:g} x {grid.ny * grid.dy:g} m grid"
        )
    wy = _overlap(grid.ny, grid.dy, rows, pset.d_spix, y0)
    wx = _overlap(grid.nx, grid.dx, cols, pset.d_spix, x0)
    values = wy @ pset.patterns[index].astype(np.float64) @ wx.T
    return Field2D(grid.with_nt(1), np.clip(values, 0.0, 1.0))


def coverage_mask(pset: PatternSet, grid: GridSpec, origin=(0.0, 0.0)) -> np.ndarray:
    """Pixels touched by the cluster lattice at all (any pattern)."""
    full = PatternSet(pset.beta, pset.shape, np.ones((1,) + pset.shape), pset.seed,
                      pset.n_clustered, pset.d_spix)
    return cluster_to_field(full, 0, grid, origin).values > 0


# ---------------------------------------------------------------------------
# Serialization


def save_patterns(pset: PatternSet, path) -> Path:
    """Metadata header line followed by one '0'/'1' bitmap block per pattern."""
    path = Path(path)
    meta = {
        "format": "PSET", "version": 1, "beta": pset.beta, "rows": pset.shape[0],
        "cols": pset.shape[1], "n_m": pset.n_m, "seed": pset.seed,
        "n_clustered": pset.n_clustered, "d_spix_m": pset.d_spix,
    }
    lines = [json.dumps(meta, sort_keys=True)]
    for m in range(pset.n_m):
        lines.append(f"# pattern {m}")
        lines.extend("".join("1" if v else "0" for v in row) for row in pset.patterns[m])
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_patterns(path) -> PatternSet:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    meta = json.loads(lines[0])
    if meta.get("format") != "PSET":
        raise ValueError(f"{path}: not a pattern set file")
    rows, cols, n_m = meta["rows"], meta["cols"], meta["n_m"]
    body = [ln for ln in lines[1:] if ln and not ln.startswith("#")]
    if len(body) != rows * n_m or any(len(ln) != cols or set(ln) - {"0", "1"} for ln in body):
        raise ValueError(f"{path}: bitmap blocks do not match {n_m} x {rows} x {cols}")
    bits = np.array([[c == "1" for c in ln] for ln in body], dtype=np.uint8)
    return PatternSet(
        meta["beta"], (rows, cols), bits.reshape(n_m, rows, cols), meta["seed"],
        n_clustered=meta["n_clustered"], d_spix=meta["d_spix_m"],
    )


def export_pbm(pset: PatternSet, directory, expand: bool = False) -> list[Path]:
    """Write each pattern as a plain PBM (P1) image; 1 (black) marks an
    active cluster. With ``expand`` every cluster becomes an
    ``n_clustered`` square of projector pixels."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in range(pset.n_m):
        img = pset.patterns[m]
        if expand:
            img = np.kron(img, np.ones((pset.n_clustered, pset.n_clustered), dtype=np.uint8))
        h, w = img.shape
        body = "\n".join(" ".join(map(str, row)) for row in img)
        p = directory / f"pattern_{m:03d}.pbm"
        p.write_text(f"P1\n{w} {h}\n{body}\n", encoding="ascii")
        paths.append(p)
    return paths
