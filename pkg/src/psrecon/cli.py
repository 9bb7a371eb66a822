"""Command-line entry point and batch pipeline.

Every stage writes its artifacts into the output directory and records
them, with a SHA-256 content hash, in ``manifest.json``. Large arrays are
read back from the files just written, so a later run that is pointed at
those files (``patterns.path``, ``psf.path``, ``forward.path``) continues
with bit-identical inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .autotune import tune_regularization
from .baselines import difference_thermogram, export_pgm, ppt, pristine_subtracted
from .config import STAGES, ConfigError, PipelineConfig
from .field import load_field, load_stack, save_stack, subtract_t0
from .forward import DefectMap, ForwardOperator, defect_layout, fit_zeta, measurement_rngs, simulate_measurement
from .metrics import cost_terms, write_scores
from .patterns import (PatternSet, cluster_to_field, export_pbm, generate_patterns, homogeneity,
                       load_patterns, save_patterns)
from .psf import PsfStack, heat_flow_advisory, psf_pulse, sigma_psf
from .solver import InverseProblem, write_report

DEPENDS = {
    "patterns": (),
    "psf": (),
    "simulate": ("patterns", "psf"),
    "fit_zeta": ("simulate",),
    "reconstruct": ("simulate",),
    "tune": ("simulate",),
    "score": ("reconstruct",),
    "baseline": ("patterns",),
}

COMMANDS = {
    "gen-patterns": "patterns",
    "psf": "psf",
    "simulate": "simulate",
    "fit-zeta": "fit_zeta",
    "reconstruct": "reconstruct",
    "tune": "tune",
    "score": "score",
    "baseline": "baseline",
}


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(exc).__name__}: {exc}")
        self.stage = stage
        self.exc = exc


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_stages(targets) -> list[str]:
    """``targets`` plus their prerequisites, in pipeline order."""
    need = set()

    def add(s):
        if s not in need:
            need.add(s)
            for d in DEPENDS[s]:
                add(d)

    for t in targets:
        add(t)
    return [s for s in STAGES if s in need]


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


class Pipeline:
    def __init__(self, cfg: PipelineConfig, out_dir, serial: bool = False):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.serial = serial or bool(cfg.raw["serial"])
        self.workers = None if self.serial else -1
        self.artifacts: dict[str, dict] = {}
        self.images: dict[str, dict] = {}
        self.timings: dict[str, float] = {}
        self.stages_run: list[str] = []
        self.state: dict = {}

    # -- bookkeeping -------------------------------------------------------

    def record(self, name: str, path: Path, volatile: bool = False) -> None:
        path = Path(path)
        try:
            shown = str(path.relative_to(self.out))
        except ValueError:
            shown = str(path)
        entry = {"path": shown, "sha256": sha256_file(path)}
        if volatile:
            entry["volatile"] = True
        self.artifacts[name] = entry

    def image(self, name: str, values) -> None:
        path = self.out / f"{name}.pgm"
        self.images[name] = export_pgm(values, path)
        self.record(f"{name}_pgm", path)

    def manifest(self, status: str = "ok", error: dict | None = None) -> dict:
        m = {
            "tool": "psrecon", "version": __version__, "status": status,
            "config": self.cfg.echo(), "stages_run": self.stages_run,
            "artifacts": dict(sorted(self.artifacts.items())),
            "images": dict(sorted(self.images.items())),
            "timings": self.timings,
        }
        if error is not None:
            m["failed_stage"] = error["stage"]
            m["error"] = error
        return m

    def write_manifest(self, **kw) -> Path:
        return _write_json(self.out / "manifest.json", self.manifest(**kw))

    # -- run ---------------------------------------------------------------

    def run(self, stages) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        for s in stages:
            t = time.perf_counter()
            try:
                getattr(self, f"stage_{s}")()
            except Exception as exc:
                self.timings[s] = time.perf_counter() - t
                err = error_record(s, exc)
                self.write_manifest(status="failed", error=err)
                raise StageError(s, exc) from exc
            self.timings[s] = time.perf_counter() - t
            self.stages_run.append(s)
        self.write_manifest()
        return self.manifest()

    # -- shared inputs -----------------------------------------------------

    @property
    def grid(self):
        return self.cfg.grid()

    def pattern_fields(self):
        if "fields" not in self.state:
            pset = self.state["patterns"]
            origin = tuple(self.cfg.raw["patterns"]["origin"])
            self.state["fields"] = [cluster_to_field(pset, m, self.grid, origin) for m in range(pset.n_m)]
        return self.state["fields"]

    def truth(self) -> DefectMap:
        if "truth" not in self.state:
            fpath = self.cfg.raw["forward"]["path"]
            if fpath:
                f = load_field(Path(fpath) / "truth.tgs")
                self.state["truth"] = DefectMap(f.grid, f.values)
            else:
                dm, _ = defect_layout(self.grid, self.cfg.defect_specs())
                p = save_stack(dm, self.out / "truth.tgs")
                self.record("truth", p)
                f = load_field(p)
                self.state["truth"] = DefectMap(f.grid, f.values)
        return self.state["truth"]

    # -- stages ------------------------------------------------------------

    def stage_patterns(self):
        pc = self.cfg.raw["patterns"]
        if pc["path"]:
            pset = load_patterns(pc["path"])
            self.record("patterns_input", Path(pc["path"]))
        else:
            pset = generate_patterns(
                pc["beta"], n_m=pc["n_m"], seed=self.cfg.stage_seed("patterns"),
                shape=(pc["rows"], pc["cols"]), n_clustered=pc["n_clustered"], d_spix=pc["d_spix"],
            )
            self.record("patterns", save_patterns(pset, self.out / "patterns.pset"))
        self.state["patterns"] = pset
        if pc["export_pbm"]:
            for i, p in enumerate(export_pbm(pset, self.out / "pbm")):
                self.record(f"pbm_{i:03d}", p)
        h = homogeneity(pset)
        report = {
            "n_m": pset.n_m, "n_pix_total": pset.n_pix_total, "n_target": pset.n_target,
            "min_share": h.min_share, "max_share": h.max_share, "mean_share": h.mean_share,
            "std_share": h.std_share, "full_coverage": h.full_coverage,
            "heat_flow_advisory": heat_flow_advisory(
                pset.d_spix, self.cfg.material(), self.cfg.raw["psf"]["pulse_length"]),
        }
        self.record("pattern_report", _write_json(self.out / "pattern_report.json", report))

    def stage_psf(self):
        pc = self.cfg.raw["psf"]
        spec = self.cfg.psf_spec()
        if pc["path"]:
            stack = load_stack(pc["path"])
            self.record("psf_input", Path(pc["path"]))
        else:
            psf = psf_pulse(spec, self.grid, n_sub=pc["n_sub"], n_grade=pc["n_grade"])
            p = save_stack(psf.to_stack(), self.out / "psf.tgs")
            self.record("psf", p)
            stack = load_stack(p)
        psf = PsfStack.from_stack(stack, spec)
        if not psf.grid.same_plane(self.grid) or psf.grid.nt != self.grid.nt:
            raise ValueError(f"PSF grid {psf.grid} does not match the configured grid {self.grid}")
        self.state["psf"] = psf
        report = {"ref_index": psf.ref_index, "sigma_psf_m": sigma_psf(psf, psf.ref_index)}
        self.record("psf_report", _write_json(self.out / "psf_report.json", report))

    def stage_simulate(self):
        fc = self.cfg.raw["forward"]
        fields = self.pattern_fields()
        if fc["path"]:
            paths = [Path(fc["path"]) / f"meas_{m:03d}.tgs" for m in range(len(fields))]
            for m, p in enumerate(paths):
                self.record(f"meas_{m:03d}_input", p)
        else:
            truth = self.truth()
            psf = self.state["psf"]
            spec = self.cfg.forward_spec()
            op = ForwardOperator(psf, self.workers)
            rngs = measurement_rngs(spec.seed, len(fields))
            paths = []
            for m, (pf, rng) in enumerate(zip(fields, rngs)):
                stack = simulate_measurement(pf, truth, psf, spec, rng=rng, op=op)
                p = save_stack(stack, self.out / f"meas_{m:03d}.tgs")
                self.record(f"meas_{m:03d}", p)
                paths.append(p)
        self.truth()
        n0 = fc["t0_frames"]
        self.state["t_diff"] = [subtract_t0(load_stack(p), n0) for p in paths]

    def stage_fit_zeta(self):
        t_diff = self.state["t_diff"]
        zeta, r2 = fit_zeta(t_diff[0], self.pattern_fields()[0], self.truth(), self.state["psf"], t0=0.0)
        out = {"measurement": 0, "zeta": zeta, "r_squared": r2, "zeta_true": self.cfg.raw["forward"]["zeta"]}
        self.record("zeta_fit", _write_json(self.out / "zeta_fit.json", out))

    def problem(self) -> InverseProblem:
        if "problem" not in self.state:
            self.state["problem"] = InverseProblem(
                self.state["t_diff"], self.state["psf"], self.pattern_fields(), workers=self.workers)
        return self.state["problem"]

    def stage_reconstruct(self):
        cfg = self.cfg.solver_config()
        t = time.perf_counter()
        problem = self.problem()
        self.timings["reconstruct_setup"] = time.perf_counter() - t
        res = problem.solve(cfg)
        self.timings["reconstruct_solve"] = res.timings["solve_s"]
        self.state["result"] = res
        self.record("defect_map", save_stack(res.defect_map, self.out / "defect_map.tgs"))
        self.record("solver_report", write_report(res, self.out / "solver_report.json", include_timings=False))

    def stage_tune(self):
        log = self.out / "tune_log.jsonl"
        log.unlink(missing_ok=True)
        workers = 1 if self.serial else self.cfg.raw["tune"]["workers"]
        res = tune_regularization(
            self.state["t_diff"], self.state["psf"], self.pattern_fields(), self.truth(),
            self.cfg.solver_config(), self.cfg.search_config(), log_path=log,
            workers=workers, problem=self.problem(),
        )
        self.state["tune"] = res
        self.record("tune_log", log, volatile=True)
        out = {
            "lambda_best": list(res.lambda_best), "log10_lambda_best": [float(v) for v in res.x_best],
            "cost_best": res.cost_best, "evaluations": res.evaluations, "generations": res.generations,
            "history": [[float(a), float(b)] for a, b in res.history],
        }
        self.record("tune_result", _write_json(self.out / "tune_result.json", out))

    def stage_score(self):
        truth, psf = self.truth(), self.state["psf"]
        res = self.state["result"]
        rows = [dict(run_id="reconstruct", lambda_21=res.config.lambda_21, lambda_2=res.config.lambda_2,
                     **cost_terms(res.defect_map, truth, psf))]
        if "tune" in self.state:
            l21, l2 = self.state["tune"].lambda_best
            tuned = self.problem().solve(replace(res.config, lambda_21=l21, lambda_2=l2), track_objective=False)
            rows.append(dict(run_id="tuned", lambda_21=l21, lambda_2=l2,
                             **cost_terms(tuned.defect_map, truth, psf)))
        self.record("scores", write_scores(rows, self.out / "scores.csv"))
        self.image("defect_map", res.defect_map.values)

    def stage_baseline(self):
        bc = self.cfg.raw["baseline"]
        pset = self.state["patterns"]
        full = PatternSet(1.0, pset.shape, np.ones((1,) + pset.shape), pset.seed, pset.n_clustered, pset.d_spix)
        grid = self.grid
        field = cluster_to_field(full, 0, grid, tuple(self.cfg.raw["patterns"]["origin"]))
        pc = self.cfg.raw["psf"]
        psf = psf_pulse(self.cfg.psf_spec(), grid.with_nt(bc["n_frames"]), n_sub=pc["n_sub"], n_grade=pc["n_grade"])
        spec = self.cfg.forward_spec()
        rng = np.random.default_rng(self.cfg.stage_seed("baseline"))
        stack = simulate_measurement(field, self.truth(), psf, spec, rng=rng, op=ForwardOperator(psf, self.workers))
        p = save_stack(stack, self.out / "baseline_meas.tgs")
        self.record("baseline_meas", p)
        t_diff = subtract_t0(load_stack(p), self.cfg.raw["forward"]["t0_frames"])

        outputs = {
            "baseline_tdiff": difference_thermogram(t_diff, bc["t_eval"]),
            "baseline_pristine": pristine_subtracted(t_diff, bc["pristine_region"], bc["t_eval"]),
        }
        res = ppt(t_diff, bc["f_ppt"], window=bc["window"])
        outputs["ppt_amplitude"] = res.amplitude
        outputs["ppt_phase"] = res.phase
        for name, f in outputs.items():
            self.record(name, save_stack(f, self.out / f"{name}.tgs"))
            self.image(name, f.values)
        info = {"f_requested": bc["f_ppt"], "f_bin": res.frequency, "bin": res.bin, "n_frames": t_diff.n_post}
        self.record("ppt_report", _write_json(self.out / "ppt.json", info))


def error_record(stage: str, exc: BaseException) -> dict:
    rec = {"stage": stage, "type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        rec["field"] = exc.path
    return rec


def run_pipeline(cfg: PipelineConfig, out_dir=None, stages=None, serial: bool = False) -> dict:
    """Run ``stages`` (default: those enabled in the config) plus their
    prerequisites. Returns the manifest."""
    out_dir = out_dir or cfg.raw["output_dir"] or "psr_out"
    if stages is None:
        stages = resolve_stages([s for s, on in cfg.stages.items() if on])
    return Pipeline(cfg, out_dir, serial).run(stages)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file or bundled config name (e.g. fig4-synthetic)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--serial", action="store_true", help="single-threaded, bit-reproducible run")

    ap = argparse.ArgumentParser(prog="psr", description="Photothermal super-resolution reconstruction toolkit.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["pipeline"]:
        sub.add_parser(name, parents=[common])
    return ap


def _fail(out_dir, rec: dict, code: int) -> int:
    text = json.dumps({"error": rec}, sort_keys=True)
    print(text, file=sys.stderr)
    if out_dir is not None:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "error.json").write_text(text + "\n", encoding="utf-8")
        except OSError:
            pass
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = args.out
    try:
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig.from_dict({})
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
    except (ConfigError, FileNotFoundError) as exc:
        return _fail(out_dir, error_record("config", exc), 2)
    out_dir = out_dir or cfg.raw["output_dir"] or "psr_out"

    if args.command == "pipeline":
        stages = None
    else:
        stages = resolve_stages([COMMANDS[args.command]])
    try:
        manifest = run_pipeline(cfg, out_dir, stages, serial=args.serial)
    except StageError as exc:
        return _fail(out_dir, error_record(exc.stage, exc.exc), 1)
    except OSError as exc:
        return _fail(out_dir, error_record("io", exc), 1)
    except Exception as exc:  # pragma: no cover - last-resort diagnostic
        traceback.print_exc()
        return _fail(out_dir, error_record("internal", exc), 1)
    print(json.dumps({"status": manifest["status"], "stages": manifest["stages_run"],
                      "manifest": str(Path(out_dir) / "manifest.json")}))
    return 0


if __name__ == "__main__":
    sys.exit(main())

