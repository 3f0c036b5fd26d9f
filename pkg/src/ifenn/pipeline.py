"""FEM to network data flow: collocation export, comparison metrics and CSV files."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import LengthMismatch, ParseError, WidthMismatch
from .mesh import Mesh, element_geometry
from .pinn import CollocationSet, Mlp, forward


@dataclass
class Snapshot:
    """Integration-point fields of one converged increment.

    ``eps_bar`` is the strain that drove the damage: the local measure for
    local damage, the interpolated non-local field for the gradient method
    and the network output for I-FENN.
    """

    lf: float
    xy: np.ndarray
    eps_eq: np.ndarray
    eps_bar: np.ndarray
    d: np.ndarray
    u: Optional[np.ndarray] = None
    reactions: float = float("nan")

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        for name in ("eps_eq", "eps_bar", "d"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
            if len(getattr(self, name)) != len(self.xy):
                raise LengthMismatch(f"{name} has {len(getattr(self, name))} values for {len(self.xy)} points")

    @property
    def n_ips(self) -> int:
        return len(self.xy)

    @classmethod
    def from_increment(cls, mesh: Mesh, state, ip, result=None) -> "Snapshot":
        geom = element_geometry(mesh)
        return cls(
            lf=float(state.lf),
            xy=geom.xy.reshape(-1, 2).copy(),
            eps_eq=ip.eps_eq.ravel().copy(),
            eps_bar=ip.eps_star.ravel().copy(),
            d=ip.d.ravel().copy(),
            u=state.u.copy(),
            reactions=float(result.reactions) if result is not None else float("nan"),
        )


def boundary_normals(mesh: Mesh):
    """Boundary node ids and their outward normals averaged over adjacent edges."""
    acc = {}
    for b in mesh.boundary:
        for n in mesh.edge_nodes(b):
            acc.setdefault(n, []).append(np.asarray(b.normal, dtype=float))
    nodes = np.array(sorted(acc), dtype=np.int64)
    normals = np.empty((len(nodes), 2))
    for i, n in enumerate(nodes):
        v = np.sum(acc[n], axis=0)
        norm = np.linalg.norm(v)
        # opposite normals (a zero-thickness slit) cancel; keep the first edge's
        normals[i] = v / norm if norm > 1e-12 else acc[n][0]
    return nodes, normals


def export_collocation(snapshot: Snapshot, mesh: Mesh, g, lf=None) -> CollocationSet:
    """Interior rows at every integration point, boundary rows at every boundary node.

    Boundary rows carry the equivalent strain of the nearest integration
    point; the boundary residual does not use it.
    """
    if snapshot.n_ips != mesh.n_ips:
        raise LengthMismatch(f"snapshot has {snapshot.n_ips} points, mesh has {mesh.n_ips}")
    xy = snapshot.xy
    cols = [xy[:, 0], xy[:, 1], np.full(len(xy), float(g)), snapshot.eps_eq]
    if lf is not None:
        cols.append(np.full(len(xy), float(lf)))
    interior = np.column_stack(cols)

    nodes, normals = boundary_normals(mesh)
    bxy = mesh.coords[nodes]
    nearest = np.argmin(((bxy[:, None, :] - xy[None, :, :]) ** 2).sum(-1), axis=1)
    bcols = [bxy[:, 0], bxy[:, 1], np.full(len(nodes), float(g)), snapshot.eps_eq[nearest]]
    if lf is not None:
        bcols.append(np.full(len(nodes), float(lf)))
    return CollocationSet(interior, np.column_stack(bcols).reshape(len(nodes), -1), normals)


def _pair(reference, predicted):
    ref = np.asarray(reference, dtype=float).ravel()
    pred = np.asarray(predicted, dtype=float).ravel()
    if len(ref) != len(pred):
        raise LengthMismatch(f"{len(ref)} reference vs {len(pred)} predicted values")
    return ref, pred


def rse(reference, predicted):
    """Pointwise ``(ref - pred)^2 / ref^2``; NaN and flagged where ``ref == 0``."""
    ref, pred = _pair(reference, predicted)
    undefined = ref == 0.0
    out = np.full(len(ref), np.nan)
    ok = ~undefined
    out[ok] = (ref[ok] - pred[ok]) ** 2 / ref[ok] ** 2
    return out, undefined


def l2_mismatch(reference, predicted) -> float:
    ref, pred = _pair(reference, predicted)
    return float(np.linalg.norm(ref - pred))


@dataclass
class ComparisonReport:
    xy: np.ndarray
    ref: np.ndarray
    pred: np.ndarray
    rse: np.ndarray
    undefined: np.ndarray
    l2_mismatch: float

    @property
    def max_rse(self) -> float:
        vals = self.rse[~self.undefined]
        return float(vals.max()) if len(vals) else float("nan")

    @property
    def mean_rse(self) -> float:
        vals = self.rse[~self.undefined]
        return float(vals.mean()) if len(vals) else float("nan")

    @property
    def n_undefined(self) -> int:
        return int(self.undefined.sum())


def compare_fields(xy, reference, predicted) -> ComparisonReport:
    values, undefined = rse(reference, predicted)
    ref, pred = _pair(reference, predicted)
    return ComparisonReport(np.asarray(xy, dtype=float).reshape(-1, 2), ref, pred, values, undefined,
                            l2_mismatch(ref, pred))


def compare_snapshots(reference: Snapshot, predicted: Snapshot) -> dict:
    """Reports for the non-local strain and the damage field."""
    if reference.n_ips != predicted.n_ips:
        raise LengthMismatch(f"{reference.n_ips} vs {predicted.n_ips} integration points")
    return {
        "eps_bar": compare_fields(reference.xy, reference.eps_bar, predicted.eps_bar),
        "d": compare_fields(reference.xy, reference.d, predicted.d),
    }


def cross_mesh_eval(network: Mlp, data: CollocationSet, reference=None):
    """Predict the interior field of a (possibly foreign) dataset.

    Returns the prediction and, if ``reference`` values are given, a
    :class:`ComparisonReport` against them.
    """
    if data.width != network.n_inputs:
        raise WidthMismatch(f"dataset width {data.width} vs network input {network.n_inputs}")
    pred = forward(network, data.interior)
    report = None if reference is None else compare_fields(data.interior[:, :2], reference, pred)
    return pred, report


# ---------------------------------------------------------------------------
# CSV files
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x))


def write_collocation(data: CollocationSet, path) -> None:
    has_lf = data.width == 5
    header = "kind,x,y,g,eps_eq,nx,ny" + (",lf" if has_lf else "")
    lines = [header]
    for r in data.interior:
        row = ["interior"] + [_fmt(v) for v in r[:4]] + ["", ""]
        if has_lf:
            row.append(_fmt(r[4]))
        lines.append(",".join(row))
    for r, n in zip(data.boundary, data.normals):
        row = ["boundary"] + [_fmt(v) for v in r[:4]] + [_fmt(n[0]), _fmt(n[1])]
        if has_lf:
            row.append(_fmt(r[4]))
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_collocation(path) -> CollocationSet:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ParseError("empty collocation file", 1)
    header = rows[0]
    base = ["kind", "x", "y", "g", "eps_eq", "nx", "ny"]
    if header not in (base, base + ["lf"]):
        raise ParseError(f"unexpected header {header}", 1)
    has_lf = len(header) == 8
    interior, boundary, normals = [], [], []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", i)
        try:
            vals = [float(v) for v in row[1:5]] + ([float(row[7])] if has_lf else [])
            if row[0] == "interior":
                interior.append(vals)
            elif row[0] == "boundary":
                boundary.append(vals)
                normals.append([float(row[5]), float(row[6])])
            else:
                raise ParseError(f"unknown row kind {row[0]!r}", i)
        except ValueError as exc:
            raise ParseError(str(exc), i) from None
    width = 5 if has_lf else 4
    return CollocationSet(np.array(interior).reshape(-1, width), np.array(boundary).reshape(-1, width),
                          np.array(normals).reshape(-1, 2))


SNAPSHOT_HEADER = "elem,ip,x,y,eps_eq,eps_bar,d"


def write_snapshot(snap: Snapshot, path) -> None:
    lines = [f"# lf={_fmt(snap.lf)}", SNAPSHOT_HEADER]
    for k in range(snap.n_ips):
        lines.append(",".join([str(k // 4), str(k % 4), _fmt(snap.xy[k, 0]), _fmt(snap.xy[k, 1]),
                               _fmt(snap.eps_eq[k]), _fmt(snap.eps_bar[k]), _fmt(snap.d[k])]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_snapshot(path) -> Snapshot:
    lf = float("nan")
    rows = []
    header_seen = False
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line[1:].strip().startswith("lf="):
                lf = float(line.split("=", 1)[1])
            continue
        if not header_seen:
            if line != SNAPSHOT_HEADER:
                raise ParseError(f"unexpected header {line!r}", i)
            header_seen = True
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise ParseError(f"expected 7 fields, got {len(parts)}", i)
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ParseError(str(exc), i) from None
    if not header_seen:
        raise ParseError("missing header", 1)
    a = np.array(rows, dtype=float).reshape(-1, 7)
    return Snapshot(lf, a[:, 2:4], a[:, 4], a[:, 5], a[:, 6])


CURVE_HEADER = "lf,reaction,iterations,n_dofs"


def write_curve(curve, path, timing_path=None) -> None:
    """Reaction curve; wall times go to a separate file so the curve stays reproducible."""
    rows = np.asarray(curve).reshape(-1, 5)
    lines = [CURVE_HEADER]
    for lf, r, it, n, _ in rows:
        lines.append(f"{_fmt(lf)},{_fmt(r)},{int(it)},{int(n)}")
    Path(path).write_text("\n".join(lines) + "\n")
    if timing_path is not None:
        lines = ["lf,n_dofs,wall_time"] + [f"{_fmt(lf)},{int(n)},{t:.6f}" for lf, _, _, n, t in rows]
        Path(timing_path).write_text("\n".join(lines) + "\n")


def read_curve(path) -> np.ndarray:
    """Rows ``(lf, reaction, iterations, n_dofs)``."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != CURVE_HEADER:
        raise ParseError("unexpected curve header", 1)
    return np.array([[float(v) for v in line.split(",")] for line in text[1:] if line.strip()]).reshape(-1, 4)


def write_report(report: ComparisonReport, path, summary_path=None) -> None:
    lines = ["index,x,y,ref,pred,rse,flag"]
    for i in range(len(report.ref)):
        r = "" if report.undefined[i] else _fmt(report.rse[i])
        lines.append(",".join([str(i), _fmt(report.xy[i, 0]), _fmt(report.xy[i, 1]), _fmt(report.ref[i]),
                               _fmt(report.pred[i]), r, "undefined" if report.undefined[i] else ""]))
    Path(path).write_text("\n".join(lines) + "\n")
    if summary_path is not None:
        Path(summary_path).write_text(
            "l2_mismatch,max_rse,mean_rse,n_undefined\n"
            f"{_fmt(report.l2_mismatch)},{_fmt(report.max_rse)},{_fmt(report.mean_rse)},{report.n_undefined}\n"
        )
