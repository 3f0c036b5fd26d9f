"""Quadrilateral meshes, Q4 shape functions, quadrature and mesh file I/O.

Elements are 4-node bilinear quadrilaterals with nodes in counterclockwise
order.  Local edge ``k`` joins local nodes ``k`` and ``(k + 1) % 4``.
Integration points are numbered globally as ``4 * element + q``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConsistencyError, InvalidGeometry, NonPositiveJacobian, ParseError

# Parent-corner signs, counterclockwise from (-1, -1).
CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
EDGE_FLAGS = ("traction", "free", "flux")
DOF_NAMES = ("ux", "uy")
_GP = 1.0 / np.sqrt(3.0)


@dataclass(frozen=True)
class Node:
    id: int
    x: float
    y: float


@dataclass(frozen=True)
class Element:
    id: int
    nodes: tuple[int, int, int, int]


@dataclass(frozen=True)
class BoundaryEdge:
    element: int
    edge: int
    normal: tuple[float, float]
    flag: str = "free"


@dataclass(frozen=True)
class DirichletBC:
    node: int
    dof: str
    value: float  # prescribed displacement per unit loadfactor


@dataclass(frozen=True)
class IntegrationPoint:
    element: int
    xi: float
    eta: float
    weight: float
    x: float
    y: float
    index: int


def shape_q4(xi, eta):
    """Bilinear shape functions and their parent-coordinate derivatives.

    Returns
    -------
    N : ndarray, shape (4,)
    dN : ndarray, shape (4, 2)
        ``dN[a] = (dN_a/dxi, dN_a/deta)``.
    """
    sx, sy = CORNERS[:, 0], CORNERS[:, 1]
    N = 0.25 * (1.0 + sx * xi) * (1.0 + sy * eta)
    dN = np.empty((4, 2))
    dN[:, 0] = 0.25 * sx * (1.0 + sy * eta)
    dN[:, 1] = 0.25 * sy * (1.0 + sx * xi)
    return N, dN


def gauss_2x2():
    """Parent coordinates ``(4, 2)`` and weights ``(4,)`` of 2x2 Gauss quadrature."""
    pts = CORNERS * _GP
    return pts.copy(), np.ones(4)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable quadrilateral mesh.

    Parameters
    ----------
    coords : (n, 2) array of node coordinates in mm.
    elements : (ne, 4) int array of counterclockwise connectivity.
    boundary : boundary edges with outward unit normals.
    dirichlet : displacement constraints, values per unit loadfactor.
    """

    coords: np.ndarray
    elements: np.ndarray
    boundary: tuple[BoundaryEdge, ...] = ()
    dirichlet: tuple[DirichletBC, ...] = ()

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float)
        elements = np.array(self.elements, dtype=np.int64).reshape(-1, 4)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ConsistencyError("coords must have shape (n, 2)")
        if not np.all(np.isfinite(coords)):
            raise ConsistencyError("non-finite node coordinates")
        if len(elements) == 0:
            raise ConsistencyError("mesh has no elements")
        n = len(coords)
        if elements.min() < 0 or elements.max() >= n:
            raise ConsistencyError("element references a missing node")
        for b in self.boundary:
            if not 0 <= b.element < len(elements) or not 0 <= b.edge < 4:
                raise ConsistencyError(f"bad boundary edge {b.element}/{b.edge}")
            if b.flag not in EDGE_FLAGS:
                raise ConsistencyError(f"unknown boundary flag {b.flag!r}")
        for bc in self.dirichlet:
            if not 0 <= bc.node < n or bc.dof not in DOF_NAMES:
                raise ConsistencyError(f"bad Dirichlet entry {bc}")
        coords.flags.writeable = False
        elements.flags.writeable = False
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "boundary", tuple(self.boundary))
        object.__setattr__(self, "dirichlet", tuple(self.dirichlet))

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        return (
            np.array_equal(self.coords, other.coords)
            and np.array_equal(self.elements, other.elements)
            and self.boundary == other.boundary
            and self.dirichlet == other.dirichlet
        )

    __hash__ = None

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_ips(self) -> int:
        return 4 * len(self.elements)

    @property
    def nodes(self) -> list[Node]:
        return [Node(i, float(x), float(y)) for i, (x, y) in enumerate(self.coords)]

    @property
    def element_list(self) -> list[Element]:
        return [Element(i, tuple(int(v) for v in row)) for i, row in enumerate(self.elements)]

    def edge_nodes(self, edge: BoundaryEdge) -> tuple[int, int]:
        conn = self.elements[edge.element]
        return int(conn[edge.edge]), int(conn[(edge.edge + 1) % 4])

    def boundary_nodes(self) -> np.ndarray:
        ids = {n for b in self.boundary for n in self.edge_nodes(b)}
        return np.array(sorted(ids), dtype=np.int64)

    def integration_points(self) -> list[IntegrationPoint]:
        geom = element_geometry(self)
        pts, w = gauss_2x2()
        out = []
        for e in range(self.n_elements):
            for q in range(4):
                x, y = geom.xy[e, q]
                out.append(IntegrationPoint(e, pts[q, 0], pts[q, 1], w[q], x, y, 4 * e + q))
        return out


def _outward_normal(coords, conn, edge):
    a = coords[conn[edge]]
    b = coords[conn[(edge + 1) % 4]]
    t = b - a
    n = np.array([t[1], -t[0]])
    return tuple(float(v) for v in n / np.linalg.norm(n))


def make_boundary_edge(coords, elements, element, edge, flag="free") -> BoundaryEdge:
    return BoundaryEdge(element, edge, _outward_normal(coords, elements[element], edge), flag)


def isoparametric_map(elem, mesh: Mesh, xi, eta):
    """Strain-displacement matrix, Jacobian determinant and position at one point.

    ``elem`` is an element id or an :class:`Element`.

    Returns
    -------
    B : (3, 8) array mapping ``(ux0, uy0, ..., ux3, uy3)`` to
        Voigt strain ``(exx, eyy, gxy)``.
    detJ : float
    xy : (2,) array
    """
    eid = elem.id if isinstance(elem, Element) else int(elem)
    X = mesh.coords[mesh.elements[eid]]
    N, dN = shape_q4(xi, eta)
    jac = dN.T @ X
    detJ = float(np.linalg.det(jac))
    if detJ <= 0.0:
        raise NonPositiveJacobian(f"element {eid}: detJ = {detJ:g} at ({xi}, {eta})")
    grads = np.linalg.solve(jac, dN.T).T
    return _b_matrix(grads), detJ, N @ X


def _b_matrix(grads):
    """B from physical gradients of shape ``(..., 4, 2)``."""
    B = np.zeros(grads.shape[:-2] + (3, 8))
    B[..., 0, 0::2] = grads[..., 0]
    B[..., 1, 1::2] = grads[..., 1]
    B[..., 2, 0::2] = grads[..., 1]
    B[..., 2, 1::2] = grads[..., 0]
    return B


@dataclass(frozen=True, eq=False)
class ElementGeometry:
    """Precomputed integration-point data for every element.

    Attributes
    ----------
    N : (4, 4) shape values ``N[q, a]`` (identical for all elements).
    grads : (ne, 4, 4, 2) physical shape gradients ``[e, q, a, (x, y)]``.
    B : (ne, 4, 3, 8) strain-displacement matrices.
    dV : (ne, 4) ``detJ * weight``.
    xy : (ne, 4, 2) integration point coordinates.
    """

    N: np.ndarray
    grads: np.ndarray
    B: np.ndarray
    dV: np.ndarray
    xy: np.ndarray

    def subset(self, ids) -> "ElementGeometry":
        ids = np.atleast_1d(ids)
        return ElementGeometry(self.N, self.grads[ids], self.B[ids], self.dV[ids], self.xy[ids])


def element_geometry(mesh: Mesh) -> ElementGeometry:
    cached = getattr(mesh, "_geometry", None)
    if cached is not None:
        return cached
    pts, w = gauss_2x2()
    N = np.empty((4, 4))
    dN = np.empty((4, 4, 2))
    for q, (xi, eta) in enumerate(pts):
        N[q], dN[q] = shape_q4(xi, eta)
    X = mesh.coords[mesh.elements]  # (ne, 4, 2)
    jac = np.einsum("qai,eaj->eqij", dN, X)
    detJ = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    if np.any(detJ <= 0.0):
        e, q = np.argwhere(detJ <= 0.0)[0]
        raise NonPositiveJacobian(f"element {e}: detJ = {detJ[e, q]:g} at integration point {q}")
    inv = np.empty_like(jac)
    inv[..., 0, 0] = jac[..., 1, 1]
    inv[..., 1, 1] = jac[..., 0, 0]
    inv[..., 0, 1] = -jac[..., 0, 1]
    inv[..., 1, 0] = -jac[..., 1, 0]
    inv /= detJ[..., None, None]
    grads = np.einsum("eqij,qaj->eqai", inv, dN)
    geom = ElementGeometry(
        N=N,
        grads=grads,
        B=_b_matrix(grads),
        dV=detJ * w[None, :],
        xy=np.einsum("qa,eaj->eqj", N, X),
    )
    object.__setattr__(mesh, "_geometry", geom)
    return geom


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def structured_grid(width, height, nx, ny, cutouts: Sequence[tuple[float, float, float, float]] = ()):
    """Node coordinates and connectivity of a rectangular grid.

    ``cutouts`` are ``(x0, y0, x1, y1)`` rectangles; elements whose centroid
    falls inside one are removed and orphaned nodes are dropped.
    """
    if nx < 1 or ny < 1:
        raise InvalidGeometry("nx and ny must be at least 1")
    if width <= 0 or height <= 0:
        raise InvalidGeometry("width and height must be positive")
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    coords = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i, j = i.ravel(), j.ravel()
    n0 = j * (nx + 1) + i
    elements = np.column_stack([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1])
    if cutouts:
        cent = coords[elements].mean(axis=1)
        keep = np.ones(len(elements), dtype=bool)
        for x0, y0, x1, y1 in cutouts:
            inside = (cent[:, 0] > x0) & (cent[:, 0] < x1) & (cent[:, 1] > y0) & (cent[:, 1] < y1)
            keep &= ~inside
        elements = elements[keep]
        used = np.unique(elements)
        remap = -np.ones(len(coords), dtype=np.int64)
        remap[used] = np.arange(len(used))
        coords = coords[used]
        elements = remap[elements]
    return coords, elements


def free_edges(elements) -> list[tuple[int, int]]:
    """(element, local edge) pairs not shared with another element, in element order."""
    count: dict[tuple[int, int], int] = {}
    for conn in elements:
        for k in range(4):
            key = tuple(sorted((int(conn[k]), int(conn[(k + 1) % 4]))))
            count[key] = count.get(key, 0) + 1
    out = []
    for e, conn in enumerate(elements):
        for k in range(4):
            key = tuple(sorted((int(conn[k]), int(conn[(k + 1) % 4]))))
            if count[key] == 1:
                out.append((e, k))
    return out


def build_mesh(
    coords,
    elements,
    flag_of: Callable[[np.ndarray, np.ndarray], str],
    dirichlet: Iterable[DirichletBC],
) -> Mesh:
    """Assemble a :class:`Mesh`, flagging each free edge via ``flag_of(midpoint, normal)``."""
    boundary = []
    for e, k in free_edges(elements):
        conn = elements[e]
        mid = 0.5 * (coords[conn[k]] + coords[conn[(k + 1) % 4]])
        normal = _outward_normal(coords, conn, k)
        boundary.append(BoundaryEdge(e, k, normal, flag_of(mid, np.array(normal))))
    return Mesh(coords, elements, tuple(boundary), tuple(dirichlet))


def generate_structured(width, height, nx, ny, notch=None, applied_displacement=1.0) -> Mesh:
    """Structured mesh of the upper half of a single-notch specimen.

    The bottom edge is the symmetry line: nodes with ``x >= notch`` get
    ``uy = 0`` rollers, nodes on the notched segment ``x < notch`` are left
    free.  The bottom-right node is fixed in ``x`` and the top edge is pulled
    up by ``applied_displacement`` per unit loadfactor.
    """
    notch = 0.0 if notch is None else float(notch)
    if notch < 0.0 or notch >= width:
        raise InvalidGeometry(f"notch length {notch} must lie in [0, width={width})")
    coords, elements = structured_grid(width, height, nx, ny)
    tol = 1e-9 * max(width, height)

    def flag_of(mid, normal):
        if abs(mid[1]) < tol:
            return "free" if mid[0] < notch - tol else "flux"
        if abs(mid[1] - height) < tol:
            return "traction"
        return "free"

    bcs = []
    bottom = np.flatnonzero(np.abs(coords[:, 1]) < tol)
    top = np.flatnonzero(np.abs(coords[:, 1] - height) < tol)
    for n in bottom:
        if coords[n, 0] >= notch - tol:
            bcs.append(DirichletBC(int(n), "uy", 0.0))
    right = bottom[np.argmax(coords[bottom, 0])]
    bcs.append(DirichletBC(int(right), "ux", 0.0))
    for n in top:
        bcs.append(DirichletBC(int(n), "uy", float(applied_displacement)))
    return build_mesh(coords, elements, flag_of, bcs)


def double_notch_mesh(width=60.0, height=50.0, element_size=1.25, notch_depth=5.0,
                      notch_height=5.0, applied_displacement=1.0) -> Mesh:
    """Direct-tension specimen with two rectangular edge notches at mid-height.

    Bottom edge fully fixed, top edge pulled up.  The default dimensions are
    approximate and give 1888 elements.
    """
    nx = int(round(width / element_size))
    ny = int(round(height / element_size))
    y0 = 0.5 * (height - notch_height)
    cut = [(-1.0, y0, notch_depth, y0 + notch_height),
           (width - notch_depth, y0, width + 1.0, y0 + notch_height)]
    coords, elements = structured_grid(width, height, nx, ny, cut)
    tol = 1e-9 * max(width, height)

    def flag_of(mid, normal):
        if abs(mid[1] - height) < tol or abs(mid[1]) < tol:
            return "traction"
        return "free"

    bcs = []
    for n in np.flatnonzero(np.abs(coords[:, 1]) < tol):
        bcs += [DirichletBC(int(n), "ux", 0.0), DirichletBC(int(n), "uy", 0.0)]
    for n in np.flatnonzero(np.abs(coords[:, 1] - height) < tol):
        bcs.append(DirichletBC(int(n), "uy", float(applied_displacement)))
    return build_mesh(coords, elements, flag_of, bcs)


def l_shape_mesh(size=500.0, cut=250.0, element_size=12.5, applied_displacement=1.0) -> Mesh:
    """L-shaped panel: left edge clamped, right edge pulled downwards.

    A structured stand-in for a locally refined mesh; supply a refined
    mesh through :func:`read_mesh` when needed.
    """
    n = int(round(size / element_size))
    coords, elements = structured_grid(size, size, n, n, [(cut, cut, size + 1.0, size + 1.0)])
    tol = 1e-9 * size

    def flag_of(mid, normal):
        if abs(mid[0]) < tol or abs(mid[0] - size) < tol:
            return "traction"
        return "free"

    bcs = []
    for k in np.flatnonzero(np.abs(coords[:, 0]) < tol):
        bcs += [DirichletBC(int(k), "ux", 0.0), DirichletBC(int(k), "uy", 0.0)]
    for k in np.flatnonzero(np.abs(coords[:, 0] - size) < tol):
        bcs.append(DirichletBC(int(k), "uy", -float(applied_displacement)))
    return build_mesh(coords, elements, flag_of, bcs)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

_SECTIONS = ("NODES", "ELEMENTS", "BOUNDARY", "DIRICHLET")


def write_mesh(mesh: Mesh, path) -> None:
    lines = [f"NODES {mesh.n_nodes}"]
    lines += [f"{i} {x!r} {y!r}" for i, (x, y) in enumerate(mesh.coords.tolist())]
    lines.append(f"ELEMENTS {mesh.n_elements}")
    lines += [f"{i} " + " ".join(str(v) for v in row) for i, row in enumerate(mesh.elements.tolist())]
    lines.append(f"BOUNDARY {len(mesh.boundary)}")
    lines += [f"{b.element} {b.edge} {b.flag}" for b in mesh.boundary]
    lines.append(f"DIRICHLET {len(mesh.dirichlet)}")
    lines += [f"{bc.node} {bc.dof} {bc.value!r}" for bc in mesh.dirichlet]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _tokens(path):
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def read_mesh(path) -> Mesh:
    """Parse the line-oriented mesh format; clockwise elements are reordered."""
    rows: dict[str, list[tuple[int, list[str]]]] = {s: [] for s in _SECTIONS}
    expected: dict[str, int] = {}
    current = None
    for lineno, tok in _tokens(path):
        if tok[0] in _SECTIONS:
            if len(tok) != 2 or not tok[1].isdigit():
                raise ParseError(f"malformed section header {' '.join(tok)!r}", lineno)
            current = tok[0]
            if current in expected:
                raise ParseError(f"duplicate section {current}", lineno)
            expected[current] = int(tok[1])
            continue
        if current is None:
            raise ParseError("data before the first section header", lineno)
        rows[current].append((lineno, tok))
    for s in _SECTIONS:
        if s not in expected:
            raise ParseError(f"missing section {s}")
        if len(rows[s]) != expected[s]:
            raise ParseError(f"section {s} declares {expected[s]} rows, found {len(rows[s])}")

    def parse(section, width, conv):
        out = []
        for lineno, tok in rows[section]:
            if len(tok) != len(conv):
                raise ParseError(f"{section} row needs {len(conv)} fields", lineno)
            try:
                out.append((lineno, [c(t) for c, t in zip(conv, tok)]))
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
        return out

    nodes = parse("NODES", 3, (int, float, float))
    elems = parse("ELEMENTS", 5, (int, int, int, int, int))
    bnd = parse("BOUNDARY", 3, (int, int, str))
    dir_rows = parse("DIRICHLET", 3, (int, str, float))

    if not elems:
        raise ConsistencyError("empty element section")
    ids = sorted(r[0] for _, r in nodes)
    if ids != list(range(len(nodes))):
        raise ConsistencyError("node ids must be contiguous from 0")
    coords = np.empty((len(nodes), 2))
    for _, (i, x, y) in nodes:
        coords[i] = (x, y)
    eids = sorted(r[0] for _, r in elems)
    if eids != list(range(len(elems))):
        raise ConsistencyError("element ids must be contiguous from 0")
    conn = np.empty((len(elems), 4), dtype=np.int64)
    flipped = np.zeros(len(elems), dtype=bool)
    for lineno, (i, *nids) in elems:
        if min(nids) < 0 or max(nids) >= len(coords):
            raise ConsistencyError(f"line {lineno}: element {i} references a missing node")
        X = coords[nids]
        area = 0.5 * np.sum(X[:, 0] * np.roll(X[:, 1], -1) - np.roll(X[:, 0], -1) * X[:, 1])
        scale = np.ptp(X, axis=0).max() ** 2
        if abs(area) <= 1e-12 * max(scale, 1e-300):
            raise ConsistencyError(f"line {lineno}: element {i} has zero area")
        if area < 0:
            nids = [nids[0], nids[3], nids[2], nids[1]]
            flipped[i] = True
        conn[i] = nids

    boundary = []
    for lineno, (e, k, flag) in bnd:
        if not 0 <= e < len(conn) or not 0 <= k < 4:
            raise ConsistencyError(f"line {lineno}: boundary edge {e}/{k} out of range")
        if flag not in EDGE_FLAGS:
            raise ParseError(f"unknown boundary flag {flag!r}", lineno)
        if flipped[e]:
            k = 3 - k
        boundary.append(make_boundary_edge(coords, conn, e, k, flag))
    shared = set(free_edges(conn))
    for b in boundary:
        if (b.element, b.edge) not in shared:
            raise ConsistencyError(f"boundary edge {b.element}/{b.edge} is shared by two elements")

    dirichlet = []
    for lineno, (n, dof, val) in dir_rows:
        if not 0 <= n < len(coords):
            raise ConsistencyError(f"line {lineno}: Dirichlet node {n} does not exist")
        if dof not in DOF_NAMES:
            raise ParseError(f"unknown dof {dof!r}", lineno)
        dirichlet.append(DirichletBC(n, dof, val))
    return Mesh(coords, conn, tuple(boundary), tuple(dirichlet))
