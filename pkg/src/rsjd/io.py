"""CSV, checkpoint and report serialisation.

Every CSV starts with one comment line naming the schema and its version,
e.g. ``# rsjd value_grid v1``. Floats are written with ``repr`` so that
reading them back is exact.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .hjb import Grid, PolicyGrid, ValueGrid

SCHEMAS = {"value_grid": 1, "path": 1, "filter": 1}


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path, schema: str, columns: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# rsjd {schema} v{SCHEMAS[schema]}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(x) for x in row])
    return path


def read_csv(path, schema: str | None = None) -> tuple[list[str], np.ndarray]:
    """Columns and a float array; checks the schema line when ``schema`` is given."""
    with Path(path).open() as fh:
        head = fh.readline().strip()
        if schema is not None and head != f"# rsjd {schema} v{SCHEMAS[schema]}":
            raise ValueError(f"unexpected schema line {head!r}")
        r = csv.reader(fh)
        cols = next(r)
        data = np.array([[float(x) for x in row] for row in r if row], dtype=float)
    return cols, data.reshape(-1, len(cols))


# -- value and policy grids ------------------------------------------------------------

def value_grid_columns(n: int, m: int) -> list[str]:
    return ["t"] + [f"x{i + 1}" for i in range(n)] + ["phi_tilde", "phi"] + [f"h{i + 1}" for i in range(m)]


def write_value_grid(path, values: ValueGrid, policy: PolicyGrid, t_stride: int = 1) -> Path:
    """One row per (time, node); time slices can be thinned with ``t_stride``."""
    g = values.grid
    pts = g.points().reshape(-1, g.n)
    phi = values.phi
    rows = []
    idx = list(range(0, g.nt + 1, t_stride))
    if idx[-1] != g.nt:
        idx.append(g.nt)
    for j in idx:
        t = g.times[j]
        vt, pt = values.values[j].ravel(), phi[j].ravel()
        ht = policy.h[j].reshape(-1, policy.m)
        for i in range(pts.shape[0]):
            rows.append([t, *pts[i], vt[i], pt[i], *ht[i]])
    return write_csv(path, "value_grid", value_grid_columns(g.n, policy.m), rows)


def save_checkpoint(path, values: ValueGrid, policy: PolicyGrid, **extra) -> Path:
    """Compressed binary snapshot from which a run can resume."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    g = values.grid
    np.savez_compressed(path, values=values.values, h=policy.h, R=g.R, nodes=np.asarray(g.nodes),
                        dt=g.dt, T=g.T, theta=values.theta, nonpositive=values.nonpositive,
                        extra=json.dumps(to_jsonable(extra)))
    return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def load_checkpoint(path) -> tuple[ValueGrid, PolicyGrid, dict]:
    with np.load(path, allow_pickle=False) as d:
        g = Grid(d["R"], tuple(int(k) for k in d["nodes"]), float(d["dt"]), float(d["T"]))
        vals = ValueGrid(d["values"].copy(), g, float(d["theta"]), int(d["nonpositive"]))
        pol = PolicyGrid(d["h"].copy(), g)
        extra = json.loads(str(d["extra"]))
    return vals, pol, extra


# -- paths and filter trajectories --------------------------------------------------------

def write_path(path, sim_path) -> Path:
    """Columns ``t, X1..Xn, S1..Sm, V, chi``."""
    n, m = sim_path.X.shape[1], sim_path.S.shape[1]
    cols = ["t"] + [f"X{i + 1}" for i in range(n)] + [f"S{i + 1}" for i in range(m)] + ["V", "chi"]
    rows = (
        [sim_path.t[k], *sim_path.X[k], *sim_path.S[k], sim_path.V[k], sim_path.chi[k]]
        for k in range(sim_path.t.size)
    )
    return write_csv(path, "path", cols, rows)


def write_filter(path, result, index: int | None = None) -> Path:
    """Columns ``t, x_hat*, P_ij (row-major), dU*``; the innovation at row ``k`` is the one ending at ``t_k``."""
    xh = result.x_hat if index is None else result.x_hat[index]
    dU = result.dU if index is None else result.dU[index]
    if xh.ndim != 2:
        raise ValueError("pass index= to select one path of a multi-path result")
    n, m = xh.shape[1], dU.shape[1]
    cols = (["t"] + [f"x_hat{i + 1}" for i in range(n)]
            + [f"P{i + 1}{j + 1}" for i in range(n) for j in range(n)] + [f"dU{i + 1}" for i in range(m)])
    nan = [math.nan] * m
    rows = (
        [result.times[k], *xh[k], *result.P[k].ravel(), *(nan if k == 0 else dU[k - 1])]
        for k in range(result.times.size)
    )
    return write_csv(path, "filter", cols, rows)


# -- reports ---------------------------------------------------------------------------

def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    return obj


def write_report(path, report: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(report), indent=2, sort_keys=True) + "\n")
    return path
