"""Element residuals and consistent Jacobians for the three damage methods.

Kernels act on a batch of elements at once: displacement arrays have shape
``(ne, 8)`` ordered ``(ux0, uy0, ..., ux3, uy3)``, nodal non-local strains
``(ne, 4)`` and integration-point quantities ``(ne, 4)``.  Single elements
may be passed without the leading axis.

Global dof numbering: node ``i`` owns ``2i`` (ux) and ``2i + 1`` (uy); for
the gradient method the non-local strain of node ``i`` sits at ``2n + i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import scipy.sparse as sp

from .constitutive import Material, is_loading
from .errors import DimensionMismatch, MissingFeed
from .mesh import ElementGeometry, Mesh, element_geometry

LOCAL = "local"
NONLOCAL = "nonlocal-gradient"
IFENN = "ifenn"
METHODS = (LOCAL, NONLOCAL, IFENN)


@dataclass(frozen=True)
class DofMap:
    method: str
    n_nodes: int

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    @property
    def n_u(self) -> int:
        return 2 * self.n_nodes

    @property
    def n_dofs(self) -> int:
        return 3 * self.n_nodes if self.method == NONLOCAL else 2 * self.n_nodes

    @property
    def has_ebar(self) -> bool:
        return self.method == NONLOCAL

    def element_dofs(self, conn) -> np.ndarray:
        conn = np.atleast_2d(conn)
        u = np.stack([2 * conn, 2 * conn + 1], axis=-1).reshape(len(conn), 8)
        if self.has_ebar:
            return np.concatenate([u, self.n_u + conn], axis=1)
        return u

    def dirichlet(self, mesh: Mesh):
        """Constrained dof ids and their values per unit loadfactor."""
        dofs = np.array([2 * bc.node + (bc.dof == "uy") for bc in mesh.dirichlet], dtype=np.int64)
        vals = np.array([bc.value for bc in mesh.dirichlet], dtype=float)
        if len(np.unique(dofs)) != len(dofs):
            raise DimensionMismatch("a dof is constrained twice")
        order = np.argsort(dofs, kind="stable")
        return dofs[order], vals[order]


class IPState(NamedTuple):
    """Integration-point quantities at the evaluated iterate, each ``(ne, 4)``."""

    eps: np.ndarray  # (ne, 4, 3) Voigt strain
    eps_eq: np.ndarray
    eps_star: np.ndarray  # driving strain: local, interpolated non-local, or network output
    kappa: np.ndarray  # trial history, committed only on convergence
    d: np.ndarray


@dataclass
class ElementKernel:
    J: np.ndarray
    R: np.ndarray
    ip: Optional[IPState] = None


@dataclass
class IFennFeed:
    """Network output per global integration point (index ``4 * e + q``)."""

    ebar: np.ndarray
    debar_deps: np.ndarray

    def for_elements(self, ids) -> "IFennFeed":
        ids = np.atleast_1d(ids)
        idx = (4 * ids[:, None] + np.arange(4)).ravel()
        return IFennFeed(self.ebar[idx], self.debar_deps[idx])


def _batch(u_e, width):
    u_e = np.asarray(u_e, dtype=float)
    single = u_e.ndim == 1
    u_e = u_e.reshape(-1, width)
    return u_e, single


def _unbatch(kernel: ElementKernel, single: bool) -> ElementKernel:
    if single:
        ip = IPState(*(a[0] for a in kernel.ip)) if kernel.ip is not None else None
        return ElementKernel(kernel.J[0], kernel.R[0], ip)
    return kernel


def ip_strains(geom: ElementGeometry, u_e) -> np.ndarray:
    return np.einsum("eqij,ej->eqi", geom.B, u_e)


def _mechanics(geom, eps, d, dd_eff, deq, C):
    """Displacement residual, secant stiffness and damage tangent correction."""
    sig0 = eps @ C  # C is symmetric
    wdv = (1.0 - d) * geom.dV
    R = np.einsum("eqia,eqi->ea", geom.B, sig0 * wdv[..., None])
    CB = np.einsum("ij,eqjb->eqib", C, geom.B)
    K = np.einsum("eqia,eqib->eab", geom.B * wdv[..., None, None], CB)
    w = np.einsum("eqia,eqi->eqa", geom.B, sig0)  # B^T C eps
    v = np.einsum("eqi,eqia->eqa", deq, geom.B)  # d eps_eq / d u
    return R, K, w, v


def element_local(geom: ElementGeometry, u_e, kappa_old, material: Material) -> ElementKernel:
    """Local damage: ``d`` driven by the local equivalent strain."""
    u_e, single = _batch(u_e, 8)
    kappa_old = np.asarray(kappa_old, dtype=float).reshape(-1, 4)
    eps = ip_strains(geom, u_e)
    eq, deq = material.eq_strain(eps)
    kappa = np.maximum(kappa_old, eq)
    d, dd = material.damage_of(kappa)
    dd_eff = np.where(is_loading(kappa_old, eq), dd, 0.0)
    R, K, w, v = _mechanics(geom, eps, d, dd_eff, deq, material.C)
    J = K - np.einsum("eqa,eqb->eab", w * (dd_eff * geom.dV)[..., None], v)
    return _unbatch(ElementKernel(J, R, IPState(eps, eq, eq, kappa, d)), single)


def element_nonlocal(geom: ElementGeometry, u_e, ebar_e, kappa_old, material: Material, g) -> ElementKernel:
    """Coupled displacement / non-local strain element, dofs ordered ``[u(8) | ebar(4)]``."""
    u_e, single = _batch(u_e, 8)
    ebar_e = np.asarray(ebar_e, dtype=float).reshape(-1, 4)
    kappa_old = np.asarray(kappa_old, dtype=float).reshape(-1, 4)
    N = geom.N
    eps = ip_strains(geom, u_e)
    eq, deq = material.eq_strain(eps)
    ebar = ebar_e @ N.T  # (ne, q)
    gbar = np.einsum("eqak,ea->eqk", geom.grads, ebar_e)
    kappa = np.maximum(kappa_old, ebar)
    d, dd = material.damage_of(kappa)
    dd_eff = np.where(is_loading(kappa_old, ebar), dd, 0.0)
    Ru, Kuu, w, v = _mechanics(geom, eps, d, dd_eff, deq, material.C)

    dV = geom.dV
    Re = g * np.einsum("eqak,eqk->ea", geom.grads, gbar * dV[..., None])
    Re += np.einsum("qa,eq->ea", N, (ebar - eq) * dV)
    Jue = -np.einsum("eqa,qb->eab", w * (dd_eff * dV)[..., None], N)
    Jeu = -np.einsum("qa,eqb->eab", N, v * dV[..., None])
    Jee = np.einsum("qa,qb,eq->eab", N, N, dV)
    Jee += g * np.einsum("eqak,eqbk->eab", geom.grads * dV[..., None, None], geom.grads)

    ne = len(u_e)
    J = np.empty((ne, 12, 12))
    J[:, :8, :8] = Kuu
    J[:, :8, 8:] = Jue
    J[:, 8:, :8] = Jeu
    J[:, 8:, 8:] = Jee
    R = np.concatenate([Ru, Re], axis=1)
    return _unbatch(ElementKernel(J, R, IPState(eps, eq, ebar, kappa, d)), single)


def element_ifenn(geom: ElementGeometry, u_e, kappa_old, material: Material, feed: IFennFeed) -> ElementKernel:
    """Displacement-only element whose damage is driven by the network output.

    ``feed`` holds the network's non-local strain and its derivative with
    respect to the local equivalent strain for the elements' integration
    points, evaluated at the same displacement iterate ``u_e``.
    """
    u_e, single = _batch(u_e, 8)
    kappa_old = np.asarray(kappa_old, dtype=float).reshape(-1, 4)
    if feed is None:
        raise MissingFeed("no network output supplied")
    ebar = np.asarray(feed.ebar, dtype=float)
    debar = np.asarray(feed.debar_deps, dtype=float)
    if ebar.size != kappa_old.size or debar.size != kappa_old.size:
        raise MissingFeed(f"feed has {ebar.size} entries for {kappa_old.size} integration points")
    if not (np.all(np.isfinite(ebar)) and np.all(np.isfinite(debar))):
        raise MissingFeed("feed contains non-finite network output")
    ebar = ebar.reshape(-1, 4)
    debar = debar.reshape(-1, 4)
    eps = ip_strains(geom, u_e)
    eq, deq = material.eq_strain(eps)
    kappa = np.maximum(kappa_old, ebar)
    d, dd = material.damage_of(kappa)
    # four-factor chain: dd/debar * debar/deq * deq/deps * B
    dd_eff = np.where(is_loading(kappa_old, ebar), dd * debar, 0.0)
    R, K, w, v = _mechanics(geom, eps, d, dd_eff, deq, material.C)
    J = K - np.einsum("eqa,eqb->eab", w * (dd_eff * geom.dV)[..., None], v)
    return _unbatch(ElementKernel(J, R, IPState(eps, eq, ebar, kappa, d)), single)


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


@dataclass
class GlobalSystem:
    """Assembled Jacobian and residual with Dirichlet bookkeeping."""

    J: sp.csr_matrix
    R: np.ndarray
    free: np.ndarray
    constrained: np.ndarray

    def reduced(self):
        """Free-free block and free residual, i.e. ``J_ff dx_f = -R_f``."""
        Jff = self.J[self.free][:, self.free]
        return Jff.tocsc(), self.R[self.free]

    @property
    def reactions(self) -> np.ndarray:
        return self.R[self.constrained]


class Assembler:
    """Scatter-add of element kernels into a sparse global system.

    Index arrays are built once per mesh; duplicates are summed by scipy in
    a fixed order so results do not depend on how kernels were produced.
    """

    def __init__(self, mesh: Mesh, dofmap: DofMap):
        self.mesh = mesh
        self.dofmap = dofmap
        self.edofs = dofmap.element_dofs(mesh.elements)
        m = self.edofs.shape[1]
        self.rows = np.repeat(self.edofs, m, axis=1).ravel()
        self.cols = np.tile(self.edofs, (1, m)).ravel()
        self.constrained, self.values = dofmap.dirichlet(mesh)
        mask = np.ones(dofmap.n_dofs, dtype=bool)
        mask[self.constrained] = False
        self.free = np.flatnonzero(mask)

    def gather(self, x) -> np.ndarray:
        return np.asarray(x)[self.edofs]

    def assemble(self, kernel: ElementKernel) -> GlobalSystem:
        n = self.dofmap.n_dofs
        J, R = kernel.J, kernel.R
        if J.ndim == 2:
            J, R = J[None], R[None]
        if J.shape[0] != len(self.edofs) or J.shape[1:] != (self.edofs.shape[1],) * 2:
            raise DimensionMismatch(f"kernel shape {J.shape} does not match dof map {self.edofs.shape}")
        Jg = sp.coo_matrix((J.ravel(), (self.rows, self.cols)), shape=(n, n)).tocsr()
        Rg = np.zeros(n)
        np.add.at(Rg, self.edofs.ravel(), R.ravel())
        return GlobalSystem(Jg, Rg, self.free, self.constrained)


def assemble(mesh: Mesh, dofmap: DofMap, kernel: ElementKernel) -> GlobalSystem:
    return Assembler(mesh, dofmap).assemble(kernel)


# ---------------------------------------------------------------------------
# Screened-Poisson subproblem
# ---------------------------------------------------------------------------


def helmholtz_matrices(geom: ElementGeometry, g):
    """Element ``int N^T N + g B^T B`` blocks, shape ``(ne, 4, 4)``."""
    M = np.einsum("qa,qb,eq->eab", geom.N, geom.N, geom.dV)
    K = np.einsum("eqak,eqbk->eab", geom.grads * geom.dV[..., None, None], geom.grads)
    return M + g * K


def solve_helmholtz(mesh: Mesh, g, source_ip) -> np.ndarray:
    """Nodal solution of ``ebar - g lap(ebar) = source`` with zero normal flux.

    ``source_ip`` is the prescribed local equivalent strain at the
    integration points, shape ``(ne, 4)``.
    """
    from scipy.sparse.linalg import spsolve

    geom = element_geometry(mesh)
    A = helmholtz_matrices(geom, g)
    f = np.einsum("qa,eq->ea", geom.N, np.asarray(source_ip).reshape(-1, 4) * geom.dV)
    conn = mesh.elements
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    n = mesh.n_nodes
    Ag = sp.coo_matrix((A.ravel(), (rows, cols)), shape=(n, n)).tocsc()
    fg = np.zeros(n)
    np.add.at(fg, conn.ravel(), f.ravel())
    return spsolve(Ag, fg)
