"""Per-cell and part-wise drag from surface pressure and wall shear stress."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .pointcloud import PointCloud

AIR_DENSITY = 1.225


def _check_unit(v, what, tol=1e-6):
    err = np.abs(np.linalg.norm(v, axis=-1) - 1.0)
    if np.any(err > tol):
        raise ValueError(f"{what} must be unit length within {tol} (max deviation {err.max():.2e})")


def cell_drag(normals, pressure, wss, areas, direction, rho: float = AIR_DENSITY):
    """(F_p, F_tau) per cell: F_p = -(n.d) p A rho, F_tau = (tau.d) A rho.

    ``pressure`` and ``wss`` are kinematic (per unit density), hence the rho factor.
    """
    n = np.atleast_2d(np.asarray(normals, dtype=float))
    d = np.asarray(direction, dtype=float).reshape(3)
    _check_unit(n, "normals")
    _check_unit(d, "inflow direction")
    p = np.asarray(pressure, dtype=float).reshape(-1)
    tau = np.atleast_2d(np.asarray(wss, dtype=float))
    a = np.asarray(areas, dtype=float).reshape(-1)
    if np.any(a <= 0) or rho <= 0:
        raise ValueError("areas and density must be positive")
    fp = -_dot(n, d) * p * a * rho
    ft = _dot(tau, d) * a * rho
    return fp, ft


def _dot(rows, d):
    # fixed left-to-right sum; BLAS matvec may reorder or fuse and differ in the last bit
    return rows[:, 0] * d[0] + rows[:, 1] * d[1] + rows[:, 2] * d[2]


@dataclass
class DragRow:
    part: str
    pressure_drag: float
    shear_drag: float
    area: float


@dataclass
class DragReport:
    rows: list[DragRow]
    approximate_areas: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def total_pressure(self) -> float:
        return float(sum(r.pressure_drag for r in self.rows))

    @property
    def total_shear(self) -> float:
        return float(sum(r.shear_drag for r in self.rows))

    @property
    def total_area(self) -> float:
        return float(sum(r.area for r in self.rows))

    def row(self, part: str) -> DragRow:
        for r in self.rows:
            if r.part == part:
                return r
        raise KeyError(part)

    def to_csv(self) -> str:
        """CSV (part, F_p, F_tau, area); floats written as repr so they reload bit-exactly."""
        buf = io.StringIO()
        if self.approximate_areas:
            buf.write("# areas approximate: uniform A_total/N\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["part", "pressure_drag", "shear_drag", "area"])
        for r in self.rows:
            w.writerow([r.part, repr(float(r.pressure_drag)), repr(float(r.shear_drag)), repr(float(r.area))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> DragReport:
        lines = text.splitlines()
        approx = bool(lines) and lines[0].startswith("# areas approximate")
        body = [ln for ln in lines if not ln.startswith("#")]
        reader = csv.reader(body)
        header = next(reader)
        if header != ["part", "pressure_drag", "shear_drag", "area"]:
            raise ValueError(f"unexpected drag report header {header}")
        rows = [DragRow(p, float(fp), float(ft), float(a)) for p, fp, ft, a in reader]
        return cls(rows, approx)

    def chart_data(self) -> str:
        """JSON for an external bar chart: parts with both force components and their share."""
        total = self.total_pressure + self.total_shear
        bars = [{"part": r.part, "pressure_drag": r.pressure_drag, "shear_drag": r.shear_drag,
                 "share": (r.pressure_drag + r.shear_drag) / total if total else None} for r in self.rows]
        return json.dumps({"bars": bars, "total_pressure": self.total_pressure,
                           "total_shear": self.total_shear}, indent=1)


def partwise_drag(pc: PointCloud, pressure, wss, direction, rho: float = AIR_DENSITY,
                  part_names: dict | None = None, uniform_area: float | None = None) -> DragReport:
    """Sum cell drag per part label.

    Without per-point areas, ``uniform_area`` (total surface area) spreads
    A_total/N over points and the report is marked approximate.
    """
    if pc.normals is None:
        raise ValueError("partwise drag needs normals")
    if pc.parts is None:
        raise ValueError("partwise drag needs part labels")
    approx = False
    areas = pc.areas
    if areas is None:
        if uniform_area is None:
            raise ValueError("partwise drag needs areas (or a total area for the uniform fallback)")
        areas = np.full(len(pc), uniform_area / len(pc))
        approx = True
    pressure = np.asarray(pressure, dtype=float).reshape(-1)
    wss = np.asarray(wss, dtype=float).reshape(len(pc), 3)
    if len(pressure) != len(pc):
        raise ValueError("pressure field is not aligned with the cloud")
    fp, ft = cell_drag(pc.normals, pressure, wss, areas, direction, rho)
    rows = []
    for label in np.unique(pc.parts):
        sel = np.flatnonzero(pc.parts == label)
        name = (part_names or {}).get(int(label), str(int(label)))
        rows.append(DragRow(name, float(np.sum(fp[sel])), float(np.sum(ft[sel])), float(np.sum(areas[sel]))))
    return DragReport(rows, approx)


def drag_from_prediction(pressure_model, wss_model, pc: PointCloud, direction, rho: float = AIR_DENSITY,
                         pressure_normalizer=None, wss_scale: float = 1.0, part_names=None) -> DragReport:
    """Predict pressure and WSS with two trained models, denormalise, then aggregate per part.

    Either model may be ``None`` to use the cloud's own target instead
    (``pressure`` / ``wss``), which lets one field be fed from ground truth.
    """
    from . import tensor as T

    def predict(model, name):
        if model is None:
            if name not in pc.targets:
                raise ValueError(f"no model and no {name} target for drag")
            return pc.targets[name]
        with T.no_grad():
            return model(pc, pc.meta.get("condition")).final.data

    p = np.asarray(predict(pressure_model, "pressure"), dtype=float).reshape(-1)
    if pressure_model is not None and pressure_normalizer is not None:
        p = pressure_normalizer.denormalize(p)
    tau = np.asarray(predict(wss_model, "wss"), dtype=float)
    if wss_model is not None:
        tau = tau * wss_scale
    return partwise_drag(pc, p, tau, direction, rho, part_names)
