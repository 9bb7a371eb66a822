"""Pipeline configuration: one JSON document with a section per stage.

Missing keys take the defaults below, which describe the 316L steel
plate, the 0.1 mm / 160 Hz camera grid and the 20-pattern, 0.4 mm cluster
illumination of the reference setup. Unknown keys are rejected, and
every value is checked before any computation starts so that errors name
the offending field.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .autotune import SearchConfig
from .field import F_CAM, GridSpec, MaterialSpec
from .forward import ForwardSpec, defect_pair_centres
from .psf import IRRADIANCE_REF, PsfSpec
from .solver import SolverConfig

STAGES = ("patterns", "psf", "simulate", "fit_zeta", "reconstruct", "tune", "score", "baseline")

# per-stage seed offsets from the global seed
SEED_OFFSETS = {"patterns": 1, "forward": 2, "tune": 3, "baseline": 4}

DEFAULTS = {
    "seed": 0,
    "output_dir": None,
    "serial": False,
    "stages": {s: True for s in STAGES} | {"tune": False},
    "material": {"alpha": 3.76e-6, "rho": 7950.0, "cp": 502.0, "k": 15.0, "L": 4.5e-3, "R": 1.0},
    "psf": {
        "q_hat": IRRADIANCE_REF, "n_dim": 3, "pulse_length": 0.5, "series_tolerance": 1e-12,
        "n_sub": 16, "n_grade": 6, "path": None,
    },
    "grid": {"nx": 248, "ny": 155, "dx": 1e-4, "dy": 1e-4, "nt": 120, "dt": 1.0 / F_CAM},
    "patterns": {
        "beta": 0.5, "n_m": 20, "n_clustered": 20, "d_spix": 0.4e-3, "rows": 38, "cols": 62,
        "origin": [0.0, 1.5e-4], "path": None, "export_pbm": False,
    },
    "forward": {
        "zeta": 0.494, "noise_sigma": 0.025, "t0": 293.15, "pre_frames": 50, "t0_frames": 50,
        "defects": [], "defect_pairs": [], "path": None,
    },
    "solver": {
        "lambda_21": 490.0, "lambda_2": 34.4, "rho_admm": 9900.0, "n_iter": 100,
        "grouping": "joint-pixel", "convergence_tol": None, "nonneg": True,
    },
    "tune": {
        "bounds": [[-2.0, 4.0], [-2.0, 4.0]], "n_agents": 15, "n_generations": 35,
        "f_weight": 0.8, "cr": 0.9, "early_stop": None, "workers": 1,
    },
    "baseline": {
        "t_eval": 0.5, "f_ppt": 0.516, "pristine_region": [20, 10, 208, 30], "n_frames": 320,
        "window": None,
    },
}

# sections whose values are free-form lists rather than nested keys
_LEAF_KEYS = {"defects", "defect_pairs", "origin", "bounds", "pristine_region"}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown key")
        if isinstance(base[key], dict) and key not in _LEAF_KEYS:
            if not isinstance(value, dict):
                raise ConfigError(path, "expected a section (object)")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def bundled_config_path(name: str) -> Path:
    """Path of a configuration shipped with the package, e.g. ``fig4-synthetic``."""
    fname = name.replace("-", "_") + ".json"
    res = resources.files("psrecon") / "configs" / fname
    if not res.is_file():
        raise FileNotFoundError(f"no bundled config named {name!r}")
    return Path(str(res))


def _guard(path: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(path, str(exc)) from None


@dataclass
class PipelineConfig:
    """Validated pipeline settings; ``raw`` is the full merged document."""

    raw: dict

    @classmethod
    def from_dict(cls, data: dict | None = None) -> "PipelineConfig":
        cfg = cls(_merge(DEFAULTS, data or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path_or_name) -> "PipelineConfig":
        p = Path(path_or_name)
        if not p.exists():
            p = bundled_config_path(str(path_or_name))
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(str(p), f"invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(str(p), "top level must be an object")
        return cls.from_dict(data)

    def echo(self) -> dict:
        return copy.deepcopy(self.raw)

    def with_overrides(self, **top) -> "PipelineConfig":
        raw = copy.deepcopy(self.raw)
        raw.update(top)
        cfg = PipelineConfig(raw)
        cfg.validate()
        return cfg

    # -- typed views -------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def stage_seed(self, name: str) -> int:
        return self.seed + SEED_OFFSETS[name]

    @property
    def stages(self) -> dict:
        return dict(self.raw["stages"])

    def material(self) -> MaterialSpec:
        m = self.raw["material"]
        return _guard("material", MaterialSpec, alpha=m["alpha"], rho=m["rho"], cp=m["cp"],
                      L=m["L"], R=m["R"], k=m["k"])

    def grid(self, nt: int | None = None) -> GridSpec:
        g = self.raw["grid"]
        return _guard("grid", GridSpec, nx=g["nx"], ny=g["ny"], dx=g["dx"], dy=g["dy"],
                      nt=g["nt"] if nt is None else nt, dt=g["dt"])

    def psf_spec(self) -> PsfSpec:
        p = self.raw["psf"]
        return _guard("psf", PsfSpec, material=self.material(), q_hat=p["q_hat"], n_dim=p["n_dim"],
                      pulse_length=p["pulse_length"], series_tolerance=p["series_tolerance"])

    def forward_spec(self) -> ForwardSpec:
        f = self.raw["forward"]
        return _guard("forward", ForwardSpec, zeta=f["zeta"], noise_sigma=f["noise_sigma"],
                      t0=float(f["t0"]), seed=self.stage_seed("forward"), pre_frames=f["pre_frames"])

    def defect_specs(self) -> list[dict]:
        f = self.raw["forward"]
        out = [dict(d) for d in f["defects"]]
        for pair in f["defect_pairs"]:
            ang = math.radians(pair.get("angle_deg", 0.0))
            for c in defect_pair_centres(tuple(pair["centre"]), pair["size"], pair["spacing"], ang):
                out.append({"centre": [c[0], c[1]], "size": pair["size"], "angle_deg": pair.get("angle_deg", 0.0)})
        return out

    def solver_config(self) -> SolverConfig:
        return _guard("solver", SolverConfig, **self.raw["solver"])

    def search_config(self) -> SearchConfig:
        t = {k: v for k, v in self.raw["tune"].items() if k != "workers"}
        t["bounds"] = tuple(tuple(b) for b in t["bounds"])
        return _guard("tune", SearchConfig, seed=self.stage_seed("tune"), **t)

    # -- validation --------------------------------------------------------

    def validate(self) -> None:
        r = self.raw
        if not isinstance(r["seed"], int) or r["seed"] < 0:
            raise ConfigError("seed", "must be a non-negative integer")
        for s, v in r["stages"].items():
            if not isinstance(v, bool):
                raise ConfigError(f"stages.{s}", "must be true or false")
        grid = self.grid()
        self.psf_spec()
        for key in ("n_sub", "n_grade"):
            if not isinstance(r["psf"][key], int) or r["psf"][key] < 1:
                raise ConfigError(f"psf.{key}", "must be an integer >= 1")

        p = r["patterns"]
        if not (isinstance(p["beta"], (int, float)) and 0 < p["beta"] <= 1):
            raise ConfigError("patterns.beta", "must lie in (0, 1]")
        for key in ("n_m", "n_clustered", "rows", "cols"):
            if not isinstance(p[key], int) or p[key] < 1:
                raise ConfigError(f"patterns.{key}", "must be an integer >= 1")
        if not p["d_spix"] > 0:
            raise ConfigError("patterns.d_spix", "must be > 0")
        x0, y0 = p["origin"]
        eps = 1e-9 * grid.dx
        if (x0 < -eps or y0 < -eps or x0 + p["cols"] * p["d_spix"] > grid.nx * grid.dx + eps
                or y0 + p["rows"] * p["d_spix"] > grid.ny * grid.dy + eps):
            raise ConfigError("patterns", "cluster raster (origin + rows/cols x d_spix) exceeds the grid")

        self.forward_spec()
        f = r["forward"]
        if not isinstance(f["t0_frames"], int) or not 1 <= f["t0_frames"] <= f["pre_frames"]:
            raise ConfigError("forward.t0_frames", "must be an integer in [1, forward.pre_frames]")
        for i, d in enumerate(self.defect_specs()):
            if not {"centre", "size"} <= set(d) or not d["size"] > 0:
                raise ConfigError(f"forward.defects[{i}]", "needs 'centre' [x, y] and a positive 'size'")
        solver = self.solver_config()
        if r["stages"].get("tune"):
            self.search_config()
            if not isinstance(r["tune"]["workers"], int) or r["tune"]["workers"] < 1:
                raise ConfigError("tune.workers", "must be an integer >= 1")
        del solver

        b = r["baseline"]
        if not isinstance(b["n_frames"], int) or b["n_frames"] < 2:
            raise ConfigError("baseline.n_frames", "must be an integer >= 2")
        if not 0 < b["t_eval"] <= b["n_frames"] * grid.dt:
            raise ConfigError("baseline.t_eval", "outside the recorded baseline sequence")
        if not 0 <= b["f_ppt"] <= 0.5 / grid.dt:
            raise ConfigError("baseline.f_ppt", "must lie in [0, Nyquist]")
        bx, by, bw, bh = b["pristine_region"]
        if bw < 1 or bh < 1 or bx < 0 or by < 0 or bx + bw > grid.nx or by + bh > grid.ny:
            raise ConfigError("baseline.pristine_region", "must be a non-empty rectangle inside the grid")
        if b["window"] not in (None, "hann"):
            raise ConfigError("baseline.window", "must be null or 'hann'")
