"""Serialization of grid densities, atom lists and certificate blocks.

A density is stored as a JSON header next to a flat row-major payload, either
raw little-endian float64 (``.bin``) or one value per line (``.csv``).  Atom
lists are CSV with a ``# d=<d> N=<N>`` comment line followed by rows of
``N*d`` coordinates and a weight.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .grids import AtomicPlan, AxisGrid, DensityField, ProductGrid

FORMAT_VERSION = 1


def _grid_header(grid) -> dict:
    factors = [grid] if isinstance(grid, AxisGrid) else list(grid.factors)
    return {
        "kind": "axis" if isinstance(grid, AxisGrid) else "product",
        "d": factors[0].dim,
        "N": len(factors),
        "factors": [{"origin": f.origin, "spacing": f.spacing, "count": f.count, "dim": f.dim}
                    for f in factors],
    }


def _grid_from_header(h: dict):
    factors = [AxisGrid(float(f["origin"]), float(f["spacing"]), int(f["count"]), int(f["dim"]))
               for f in h["factors"]]
    if h["kind"] == "axis":
        return factors[0]
    return ProductGrid(tuple(factors))


def write_field(field: DensityField, path, fmt: str = "bin") -> Path:
    """Write ``<path>.json`` and ``<path>.<fmt>``; returns the header path."""
    path = Path(path)
    if fmt not in ("bin", "csv"):
        raise ValueError(f"unknown payload format {fmt!r}")
    payload = path.with_suffix("." + fmt)
    header = {"format_version": FORMAT_VERSION, "grid": _grid_header(field.grid),
              "shape": list(field.values.shape), "probability": field.probability,
              "mass": field.mass, "label": field.label, "payload": payload.name,
              "encoding": "float64-le" if fmt == "bin" else "csv"}
    flat = np.ascontiguousarray(field.values, dtype="<f8").reshape(-1)
    if fmt == "bin":
        payload.write_bytes(flat.tobytes())
    else:
        with open(payload, "w") as fh:
            fh.writelines(format(v, ".17g") + "\n" for v in flat)
    head = path.with_suffix(".json")
    head.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return head


def read_field(header_path) -> DensityField:
    header_path = Path(header_path)
    h = json.loads(header_path.read_text())
    grid = _grid_from_header(h["grid"])
    payload = header_path.with_name(h["payload"])
    if h["encoding"] == "float64-le":
        vals = np.frombuffer(payload.read_bytes(), dtype="<f8")
    else:
        vals = np.loadtxt(payload, dtype=float, ndmin=1)
    return DensityField(grid, vals.reshape(h["shape"]), bool(h["probability"]), label=h.get("label", ""))


def write_atoms(plan: AtomicPlan, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# d={plan.d} N={plan.N}\n")
        w = csv.writer(fh, lineterminator="\n")
        for loc, wt in zip(plan.coordinates(), plan.weights):
            w.writerow([format(v, ".17g") for v in loc] + [format(wt, ".17g")])


def read_atoms(path) -> AtomicPlan:
    with open(path) as fh:
        first = fh.readline().strip()
        if not first.startswith("#"):
            raise ValueError("atom file must start with a '# d=<d> N=<N>' line")
        meta = dict(tok.split("=") for tok in first.lstrip("#").split())
        d, N = int(meta["d"]), int(meta["N"])
        rows = np.array([[float(x) for x in r] for r in csv.reader(fh) if r], dtype=float)
    if rows.ndim != 2 or rows.shape[1] != N * d + 1:
        raise ValueError(f"expected {N * d + 1} columns per atom row")
    return AtomicPlan(rows[:, :-1].reshape(-1, N, d), rows[:, -1])


def write_certificates(certs: Iterable, path, config: dict | None = None) -> None:
    block = {"config": config or {}, "certificates": [c.as_dict() for c in certs]}
    Path(path).write_text(json.dumps(block, indent=2, sort_keys=True) + "\n")
