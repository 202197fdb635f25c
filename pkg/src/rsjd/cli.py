"""Command-line front end: ``rsjd validate|solve|simulate|filter CONFIG``.

A run is described by one YAML document::

    model: path/to/model.yaml        # or an inline mapping with the model fields
    grid:   {R: 2.0, nodes: 201, dt: 0.002, drift_scheme: hybrid, refinement: 0}
    mc:     {paths: 100000, seed: 0, dt: 0.005, x0: [0.0], policy: solved, dump_paths: 2}
    filter: {m0: [0.0], P0: [[0.04]], paths: 1000, dt: 0.001, seed: 0, mode: truth}
    output: {directory: out, formats: [csv, json]}

Model fields: ``b, B, Lambda, a0, A0, a, A, Sigma, theta, T, v`` and
``jumps``, a list of ``{gamma: [...], weight: w, in_z0: bool}``. Only
``--seed``, ``--paths``, ``--out`` and ``--threads`` override the file.

Exit codes: 0 success, 1 assumption or verification failure, 2 numerical
failure, 3 configuration error. The output directory defaults to
``$RSJD_OUTPUT_DIR`` and then ``./rsjd_out``.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .errors import ConfigError, DimensionMismatch, NotZeroBeta, PreconditionError, RankError, RSJDError
from .model import MarketModel, load_model, validate

log = logging.getLogger("rsjd")

EXIT_OK, EXIT_FAIL, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2, 3
OUTPUT_ENV = "RSJD_OUTPUT_DIR"
SECTIONS = ("model", "grid", "mc", "filter", "output")


@dataclass
class RunConfig:
    model: MarketModel
    grid: dict = field(default_factory=dict)
    mc: dict = field(default_factory=dict)
    filter: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    sha256: str = ""
    source: str | None = None
    threads: int = 1

    @property
    def out_dir(self) -> Path:
        d = self.output.get("directory") or os.environ.get(OUTPUT_ENV) or "rsjd_out"
        return Path(d)

    @property
    def formats(self) -> set[str]:
        return set(self.output.get("formats", ["csv", "json"]))


def _positive(section: dict, name: str, kind=float, required: bool = False):
    if name not in section:
        if required:
            raise ConfigError(f"missing required field {name!r}")
        return None
    try:
        val = kind(section[name])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a {kind.__name__}") from exc
    if not val > 0:
        raise ConfigError(f"{name} must be positive, got {val}")
    return val


def load_config(path, seed=None, paths=None, out=None, threads: int = 1) -> RunConfig:
    """Read and check a run configuration; overrides apply to scalar fields only."""
    import yaml

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = path.read_bytes()
    try:
        doc = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
    if "model" not in doc:
        raise ConfigError("config needs a 'model' entry")
    spec = doc["model"]
    try:
        if isinstance(spec, str):
            mpath = Path(spec)
            if not mpath.is_absolute():
                mpath = path.parent / mpath
            model = load_model(mpath)
        elif isinstance(spec, dict):
            model = MarketModel.from_dict(spec)
        else:
            raise ConfigError("model must be a file path or a mapping")
    except DimensionMismatch as exc:
        raise ConfigError(str(exc)) from exc
    for k in ("grid", "mc", "filter", "output"):
        if not isinstance(doc.get(k) or {}, dict):
            raise ConfigError(f"section {k!r} must be a mapping")
    sections = {k: dict(doc.get(k) or {}) for k in ("grid", "mc", "filter", "output")}
    for sec in ("mc", "filter"):
        if seed is not None:
            sections[sec]["seed"] = int(seed)
        if paths is not None:
            sections[sec]["paths"] = int(paths)
    if out is not None:
        sections["output"]["directory"] = str(out)
    overrides = {"seed": seed, "paths": paths, "out": None if out is None else str(out)}
    g, mc, fl = sections["grid"], sections["mc"], sections["filter"]
    for name in ("R", "dt"):
        _positive(g, name)
    _positive(g, "nodes", int)
    _positive(mc, "paths", int)
    _positive(mc, "dt")
    _positive(fl, "paths", int)
    _positive(fl, "dt")
    if threads < 1:
        raise ConfigError("--threads must be at least 1")
    h = hashlib.sha256(raw)
    h.update(repr(sorted(overrides.items())).encode())
    return RunConfig(model, g, mc, fl, sections["output"], h.hexdigest(), str(path), threads)


def _meta(cfg: RunConfig, command: str, seed, t0: float) -> dict:
    import scipy

    return {
        "command": command, "config": cfg.source, "config_sha256": cfg.sha256, "seed": seed,
        "threads": cfg.threads,
        "versions": {"rsjd": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "wall_time_s": time.perf_counter() - t0,
    }


def _finish(cfg: RunConfig, command: str, report: dict, seed, t0: float) -> Path:
    from .io import write_report

    report["meta"] = _meta(cfg, command, seed, t0)
    return write_report(cfg.out_dir / f"{command}_report.json", report)


# -- commands -------------------------------------------------------------------------

def cmd_validate(cfg: RunConfig) -> tuple[int, dict]:
    t0 = time.perf_counter()
    rep = validate(cfg.model)
    print(rep.format())
    report = {"validation": rep.to_dict(), "passed": rep.passed}
    _finish(cfg, "validate", report, None, t0)
    return (EXIT_OK if rep.passed else EXIT_FAIL), report


def _grid_from(cfg: RunConfig, scale: int = 1):
    from .hjb import Grid

    g = cfg.grid
    R = g.get("R", 2.0)
    nodes = np.atleast_1d(g.get("nodes", 101)).astype(int)
    nodes = (nodes - 1) * scale + 1
    return Grid(R, tuple(int(k) for k in nodes), float(g.get("dt", 0.01)) / scale ** 2, cfg.model.T,
                n=cfg.model.n)


def _zero_beta(cfg: RunConfig):
    from .dynamics import zero_beta

    h = cfg.grid.get("zero_beta_h")
    return zero_beta(cfg.model, None if h is None else np.asarray(h, dtype=float))


def _solve(cfg: RunConfig, grid, zb):
    from .hjb import policy_iteration

    g = cfg.grid
    return policy_iteration(grid, cfg.model, k_max=int(g.get("k_max", 50)), tol_pi=float(g.get("tol_pi", 1e-8)),
                            zb=zb, drift_scheme=g.get("drift_scheme", "hybrid"))


def cmd_solve(cfg: RunConfig) -> tuple[int, dict]:
    """Policy iteration, verification and the diagnostics that fit the model."""
    from .hjb import pde_residual, quadratic_fit, verify_solution
    from .io import save_checkpoint, write_value_grid

    t0 = time.perf_counter()
    model, g = cfg.model, cfg.grid
    zb = _zero_beta(cfg)
    grid = _grid_from(cfg)
    res = _solve(cfg, grid, zb)
    ver = verify_solution(res.values, res.policy, grid, model, zb,
                          region_fraction=float(g.get("region_fraction", 0.5)))
    report: dict[str, Any] = {
        "grid": grid.to_dict(), "zero_beta": {"h": zb.h.tolist(), "g_check": zb.g},
        "iterations": res.iterations, "converged": res.converged, "history": res.history,
        "monotone": res.monotone, "max_increase": res.max_increase,
        "upwinded_fraction": res.upwinded_fraction, "verification": ver.to_dict(),
    }
    if model.jumps.n_atoms == 0:
        from .lqg import riccati_solution

        coef, rel = quadratic_fit(res.values, grid, 0, float(g.get("region_fraction", 0.5)))
        qv = riccati_solution(model, grid.times[:1])
        pts = grid.points().reshape(-1, grid.n)
        exact = np.exp(-model.theta * qv.phi(0, pts)).reshape(grid.shape)
        inner = grid.inner_region(float(g.get("region_fraction", 0.5)))
        err = np.abs(res.values.values[0] - exact)[inner].max() / np.abs(exact[inner]).max()
        report["quadratic_fit"] = {"coefficients": coef, "relative_residual": rel,
                                   "riccati_Q0": qv.Q[0].tolist(), "riccati_q0": qv.q[0].tolist(),
                                   "riccati_k0": float(qv.k[0]), "relative_sup_error": float(err)}
    levels = int(g.get("refinement", 0))
    if levels:
        table = []
        for s in range(levels + 1):
            gs = _grid_from(cfg, 2 ** s)
            rs = res if s == 0 else _solve(cfg, gs, zb)
            r = np.abs(pde_residual(rs.values, rs.policy, gs, model))
            inner = gs.inner_region(float(g.get("region_fraction", 0.5)))[(slice(1, -1),) * gs.n]
            inner = np.broadcast_to(inner, r.shape)
            table.append({"dx": gs.dx.tolist(), "dt": gs.dt, "residual_median": float(np.median(r[inner])),
                          "residual_max": float(r[inner].max())})
        for a, b in zip(table, table[1:]):
            b["median_ratio"] = a["residual_median"] / b["residual_median"]
        report["refinement"] = table
    out = cfg.out_dir
    if "csv" in cfg.formats:
        write_value_grid(out / "value_grid.csv", res.values, res.policy, int(g.get("csv_t_stride", 1)))
    save_checkpoint(out / "checkpoint.npz", res.values, res.policy, zero_beta_h=zb.h.tolist(),
                    model=model.to_dict())
    passed = res.converged and res.monotone and ver.passed
    report["passed"] = passed
    _finish(cfg, "solve", report, None, t0)
    print(f"solve: {res.iterations} iterations, converged={res.converged}, verification passed={ver.passed}")
    return (EXIT_OK if passed else EXIT_FAIL), report


def _policy_from(cfg: RunConfig, spec):
    """``zero``, ``zero_beta``, a constant vector, ``solved`` or ``{checkpoint: file}``."""
    from .sim import GridPolicy

    model = cfg.model
    if spec is None or spec == "zero":
        return np.zeros(model.m), None
    if spec == "zero_beta":
        return _zero_beta(cfg).h, None
    if isinstance(spec, (list, tuple)):
        h = np.asarray(spec, dtype=float)
        if h.shape != (model.m,):
            raise ConfigError(f"policy vector must have length {model.m}")
        return h, None
    ck = None
    if spec == "solved":
        ck = cfg.out_dir / "checkpoint.npz"
    elif isinstance(spec, dict) and "checkpoint" in spec:
        ck = Path(spec["checkpoint"])
        if not ck.is_absolute() and cfg.source:
            ck = Path(cfg.source).parent / ck
    if ck is None:
        raise ConfigError(f"unrecognised policy {spec!r}")
    if not ck.exists():
        raise ConfigError(f"checkpoint not found: {ck}")
    from .io import load_checkpoint

    vals, pol, extra = load_checkpoint(ck)
    zb = _zero_beta(cfg)
    return GridPolicy(pol, zb, model), vals


def _value_at(vals, x0) -> float:
    from scipy.interpolate import RegularGridInterpolator

    g = vals.grid
    f = RegularGridInterpolator(g.axes, vals.values[0])
    return float(f(np.atleast_2d(x0))[0])


def cmd_simulate(cfg: RunConfig) -> tuple[int, dict]:
    from .io import write_path
    from .sim import estimate_I_tilde, paths_from_batch, simulate_batch, wealth_positivity, criterion_from_logV

    t0 = time.perf_counter()
    model, mc = cfg.model, cfg.mc
    seed = int(mc.get("seed", 0))
    n_paths = int(mc.get("paths", 10000))
    dt = float(mc.get("dt", 0.01))
    x0 = np.atleast_1d(np.asarray(mc.get("x0", np.zeros(model.n)), dtype=float))
    if x0.shape != (model.n,):
        raise ConfigError(f"x0 must have length {model.n}")
    policy, vals = _policy_from(cfg, mc.get("policy", "zero"))
    res = simulate_batch(model, policy, n_paths, dt, seed, x0, "P", threads=cfg.threads)
    J = criterion_from_logV(res.logV, model.theta, seed)
    report: dict[str, Any] = {
        "J": {**J.to_dict(), "mesh_dt": float(res.times[1] - res.times[0])},
        "wealth": wealth_positivity(res),
        "mean_log_chi_exp": float(np.mean(np.exp(res.log_chi))),
    }
    if mc.get("I_tilde", True):
        it = estimate_I_tilde(model, policy, x0, n_paths, seed, dt, threads=cfg.threads)
        report["I_tilde"] = {**it.to_dict(), "mesh_dt": dt}
        if vals is not None:
            pde = _value_at(vals, x0)
            z = (it.mean - pde) / it.se
            report["pde_vs_mc"] = {"pde": pde, "mc": it.mean, "se": it.se, "z": z, "passed": abs(z) <= 3.0}
    dump = int(mc.get("dump_paths", 0))
    if dump and "csv" in cfg.formats:
        rec = simulate_batch(model, policy, dump, dt, seed, x0, "P", record=True)
        for i, p in enumerate(paths_from_batch(rec)):
            write_path(cfg.out_dir / f"path_{i}.csv", p)
    passed = report["wealth"]["violations"] == 0 and report.get("pde_vs_mc", {}).get("passed", True)
    report["passed"] = passed
    _finish(cfg, "simulate", report, seed, t0)
    print(f"simulate: J = {J.mean:.6g} +/- {J.se:.2g} over {n_paths} paths")
    return (EXIT_OK if passed else EXIT_FAIL), report


def cmd_filter(cfg: RunConfig) -> tuple[int, dict]:
    from . import filter as flt
    from .io import write_filter
    from .sim import simulate_batch

    t0 = time.perf_counter()
    model, fc = cfg.model, cfg.filter
    seed = int(fc.get("seed", 0))
    n_paths = int(fc.get("paths", 1000))
    dt = float(fc.get("dt", 1e-3))
    n = model.n
    m0 = np.atleast_1d(np.asarray(fc.get("m0", np.zeros(n)), dtype=float))
    P0 = np.atleast_2d(np.asarray(fc.get("P0", np.zeros((n, n))), dtype=float))
    if m0.shape != (n,) or P0.shape != (n, n):
        raise ConfigError("m0 or P0 has the wrong shape")
    xi = fc.get("xi", "projection")
    mode = fc.get("mode", "truth")
    if mode not in ("truth", "operational"):
        raise ConfigError("filter mode must be 'truth' or 'operational'")

    def run(mdl):
        res = simulate_batch(mdl, np.zeros(mdl.m), n_paths, dt, seed, (m0, P0), "P", record=True,
                             threads=cfg.threads)
        p = res.paths
        dec = flt.decompose_arrays(mdl, res.times, p["logS"], p["logS0"], p["Xbar"], p["dW"], p["counts"])
        if mode == "operational":
            dY1, flagged = flt.remove_jumps(np.diff(dec.Y, axis=-2), res.times, mdl, fc.get("threshold"))
        else:
            dY1, flagged = dec.dY1, None
        return res, flt.run_filter(mdl, dY1, res.times, m0, P0, xi=xi), flagged

    res, fr, flagged = run(model)
    cov = flt.error_covariance_check(res.paths["X"][:, -1], fr.x_hat[:, -1], fr.P[-1])
    white = flt.whiteness(fr.normalized_innovations(), int(fc.get("lags", 10)))
    report: dict[str, Any] = {"mode": mode, "xi": xi, "covariance": cov, "whiteness": white,
                              "P_T": fr.P[-1].tolist()}
    if mode == "operational":
        report["jump_removal"] = {"heuristic": True, "flagged_steps": int(flagged.sum()),
                                  "true_jump_steps": int((res.paths["counts"].sum(-1) > 0).sum())}
    if model.jumps.n_atoms and fc.get("jump_independence", True) and mode == "truth":
        _, fr0, _ = run(model.with_jumps(None))
        report["jump_independence"] = {"max_abs_diff": float(np.abs(fr0.x_hat - fr.x_hat).max())}
    if "csv" in cfg.formats:
        for i in range(min(int(fc.get("dump_paths", 1)), n_paths)):
            write_filter(cfg.out_dir / f"filter_{i}.csv", fr, i)
    passed = cov["frobenius_rel"] <= float(fc.get("cov_tol", 0.1)) and white["passed"]
    report["passed"] = passed
    _finish(cfg, "filter", report, seed, t0)
    print(f"filter: covariance rel. error {cov['frobenius_rel']:.3g}, whiteness p = {white['pvalues']}")
    return (EXIT_OK if passed else EXIT_FAIL), report


COMMANDS = {"validate": cmd_validate, "solve": cmd_solve, "simulate": cmd_simulate, "filter": cmd_filter}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rsjd", description="Risk-sensitive allocation under jump-diffusions.")
    p.add_argument("--version", action="version", version=f"rsjd {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config", help="YAML run configuration")
        s.add_argument("--seed", type=int)
        s.add_argument("--paths", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--threads", type=int, default=1, help="1 is the reproducible reference mode")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.paths, args.out, args.threads)
        code, _ = COMMANDS[args.command](cfg)
    except (ConfigError, DimensionMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RankError, NotZeroBeta, PreconditionError) as exc:
        print(f"assumption failure: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except RSJDError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return code


if __name__ == "__main__":
    sys.exit(main())
