"""Incremental Newton-Raphson driver for displacement-controlled damage analyses."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .constitutive import Material
from .errors import Aborted, NotConverged, SingularMatrix
from .fem_core import (
    IFENN,
    LOCAL,
    METHODS,
    NONLOCAL,
    Assembler,
    DofMap,
    GlobalSystem,
    element_ifenn,
    element_local,
    element_nonlocal,
    ip_strains,
)
from .mesh import Mesh, element_geometry


@dataclass(frozen=True)
class SolverConfig:
    """Newton and load-stepping controls.

    ``n_increments`` equal steps take the loadfactor from ``lf_start`` to
    ``lf_end``; a failed step is multiplied by ``step_reduction`` at most
    ``max_reductions`` times in a row, and after each success the step grows
    back by the inverse factor up to the nominal size.
    """

    method: str = NONLOCAL
    tol: float = 1e-6
    max_iter: int = 20
    n_increments: int = 200
    step_reduction: float = 0.5
    max_reductions: int = 10
    min_step_ratio: float = 1e-6
    l_c: float = 4.0
    lf_start: float = 0.0
    lf_end: float = 1.0
    snapshot_lfs: tuple = ()

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not 0.0 < self.tol < 1.0:
            raise ValueError("tol must lie in (0, 1)")
        if self.max_iter < 2:
            raise ValueError("max_iter must be at least 2")
        if self.n_increments < 1:
            raise ValueError("n_increments must be at least 1")
        if not 0.0 < self.step_reduction < 1.0:
            raise ValueError("step_reduction must lie in (0, 1)")
        if not self.l_c > 0:
            raise ValueError("l_c must be positive")
        if not 0.0 <= self.lf_start < self.lf_end:
            raise ValueError("need 0 <= lf_start < lf_end")

    @property
    def g(self) -> float:
        return 0.5 * self.l_c**2


@dataclass
class FieldState:
    """Accepted solution: nodal displacements, nodal non-local strain and history."""

    u: np.ndarray
    kappa: np.ndarray
    ebar: Optional[np.ndarray] = None
    lf: float = 0.0

    @classmethod
    def zeros(cls, mesh: Mesh, method: str) -> "FieldState":
        ebar = np.zeros(mesh.n_nodes) if method == NONLOCAL else None
        return cls(np.zeros(2 * mesh.n_nodes), np.zeros(mesh.n_ips), ebar, 0.0)

    def vector(self) -> np.ndarray:
        return self.u if self.ebar is None else np.concatenate([self.u, self.ebar])

    def copy(self) -> "FieldState":
        return FieldState(self.u.copy(), self.kappa.copy(), None if self.ebar is None else self.ebar.copy(), self.lf)

    def save(self, path) -> None:
        arrays = {"u": self.u, "kappa": self.kappa, "lf": np.array(self.lf)}
        if self.ebar is not None:
            arrays["ebar"] = self.ebar
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "FieldState":
        with np.load(path) as f:
            ebar = f["ebar"] if "ebar" in f else None
            return cls(f["u"], f["kappa"], ebar, float(f["lf"]))


@dataclass
class IncrementResult:
    converged: bool
    iterations: int
    residual_history: list  # (||R_free||, ||du_free||) per iteration
    reactions: float  # sum over loaded dofs
    lf: float = 0.0
    n_dofs: int = 0
    wall_time: float = 0.0
    reaction_dofs: Optional[np.ndarray] = None  # reaction at every constrained dof


@dataclass
class AnalysisResult:
    increments: list
    state: FieldState
    curve: np.ndarray  # rows (lf, reaction, iterations, n_dofs, wall_time)
    snapshots: dict = field(default_factory=dict)


def residual_norms(system: GlobalSystem, du) -> tuple[float, float]:
    """L2 norms of the free residual and of the correction."""
    return float(np.linalg.norm(system.R[system.free])), float(np.linalg.norm(du))


def linear_solve(J, rhs) -> np.ndarray:
    """Sparse direct solve of a (possibly nonsymmetric) system.

    Raises :class:`SingularMatrix` when the factorization fails, a pivot is
    negligible relative to the largest one, or the solution does not meet the
    relative residual bound of 1e-10.
    """
    J = sp.csc_matrix(J)
    rhs = np.asarray(rhs, dtype=float)
    if J.shape[0] != J.shape[1] or J.shape[0] != len(rhs):
        raise SingularMatrix(f"system shape {J.shape} incompatible with rhs of length {len(rhs)}")
    if J.shape[0] == 0:
        return np.zeros(0)
    try:
        lu = splu(J)
    except RuntimeError as exc:
        raise SingularMatrix(str(exc)) from exc
    piv = np.abs(lu.U.diagonal())
    if piv.min() <= 1e-13 * piv.max():
        raise SingularMatrix(f"pivot ratio {piv.min() / piv.max():.3g} below threshold")
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return np.zeros_like(rhs)
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise SingularMatrix("non-finite solution")
    res = np.linalg.norm(J @ x - rhs) / bnorm
    if res >= 1e-10:
        # one step of iterative refinement before giving up
        x = x - lu.solve(J @ x - rhs)
        res = np.linalg.norm(J @ x - rhs) / bnorm
        if res >= 1e-10:
            raise SingularMatrix(f"relative residual {res:.3g} after solve")
    return x


class _Problem:
    """Mesh, material and method bound together with a reusable assembler."""

    def __init__(self, mesh: Mesh, material: Material, cfg: SolverConfig, network=None):
        if not mesh.dirichlet:
            raise SingularMatrix("mesh has no Dirichlet constraints; the system is singular")
        if cfg.method == IFENN and network is None:
            from .errors import MissingFeed

            raise MissingFeed("ifenn method requires a trained network")
        self.mesh, self.material, self.cfg, self.network = mesh, material, cfg, network
        self.geom = element_geometry(mesh)
        self.dofmap = DofMap(cfg.method, mesh.n_nodes)
        self.asm = Assembler(mesh, self.dofmap)
        self.u_free = self.asm.free[self.asm.free < self.dofmap.n_u]
        self.loaded = self.asm.values != 0.0
        self.ip_xy = self.geom.xy.reshape(-1, 2)

    def feed(self, x, lf):
        from .pinn import ifenn_feed

        eps = ip_strains(self.geom, x[self.asm.edofs[:, :8]])
        eq, _ = self.material.eq_strain(eps)
        return ifenn_feed(self.network, self.ip_xy, self.cfg.g, eq.ravel(), lf)

    def evaluate(self, x, kappa_old, lf):
        ko = kappa_old.reshape(-1, 4)
        xe = self.asm.gather(x)
        if self.cfg.method == LOCAL:
            kern = element_local(self.geom, xe, ko, self.material)
        elif self.cfg.method == NONLOCAL:
            kern = element_nonlocal(self.geom, xe[:, :8], xe[:, 8:], ko, self.material, self.cfg.g)
        else:
            kern = element_ifenn(self.geom, xe, ko, self.material, self.feed(x, lf))
        return kern, self.asm.assemble(kern)


def newton_increment(state: FieldState, lf, cfg: SolverConfig, mesh: Mesh, material: Material,
                     network=None, max_iter=None, _problem=None):
    """Solve one load increment from an accepted state.

    Convergence is declared when ``||du_F,i|| / ||du_F,1|| <= tol`` using the
    free displacement dofs only.  ``max_iter`` overrides the configured cap
    (values below 2 are allowed here to exercise the failure path).  The
    history variable is returned updated only when the increment converges.

    Returns
    -------
    (FieldState, IncrementResult, IPState)
    """
    prob = _problem or _Problem(mesh, material, cfg, network)
    cap = cfg.max_iter if max_iter is None else int(max_iter)
    t0 = time.perf_counter()
    x = state.vector().copy()
    x[prob.asm.constrained] = lf * prob.asm.values
    kern, system = prob.evaluate(x, state.kappa, lf)
    history = []
    first = None
    converged = False
    damaged = bool(np.any(state.kappa >= material.damage.eps_D))
    for it in range(1, cap + 1):
        Jff, Rf = system.reduced()
        try:
            dx = linear_solve(Jff, -Rf)
        except SingularMatrix as exc:
            if damaged or it > 1:
                raise NotConverged(f"singular tangent at iteration {it}: {exc}") from exc
            raise
        x[prob.asm.free] += dx
        du_norm = float(np.linalg.norm(dx[: len(prob.u_free)]))
        history.append((float(np.linalg.norm(Rf)), du_norm))
        if not np.isfinite(du_norm):
            break
        kern, system = prob.evaluate(x, state.kappa, lf)
        damaged = damaged or bool(np.any(kern.ip.d > 0.0))
        if it == 1:
            first = du_norm
            if first == 0.0:
                converged = True
                break
        elif du_norm <= cfg.tol * first:
            converged = True
            break
    reactions = system.reactions
    result = IncrementResult(
        converged=converged,
        iterations=len(history),
        residual_history=history,
        reactions=float(reactions[prob.loaded].sum()),
        lf=float(lf),
        n_dofs=prob.dofmap.n_dofs,
        wall_time=time.perf_counter() - t0,
        reaction_dofs=reactions,
    )
    if not converged:
        raise NotConverged(f"no convergence at lf={lf:g} after {len(history)} iterations", result)
    n_u = prob.dofmap.n_u
    new = FieldState(
        u=x[:n_u].copy(),
        kappa=kern.ip.kappa.ravel().copy(),
        ebar=x[n_u:].copy() if prob.dofmap.has_ebar else None,
        lf=float(lf),
    )
    return new, result, kern.ip


def run_analysis(cfg: SolverConfig, mesh: Mesh, material: Material, network=None,
                 initial_state: Optional[FieldState] = None, progress=None) -> AnalysisResult:
    """March the loadfactor with automatic step reduction.

    Snapshots are kept for the accepted increments nearest to each entry of
    ``cfg.snapshot_lfs``.  ``progress`` is an optional callable receiving each
    accepted :class:`IncrementResult`.
    """
    from .pipeline import Snapshot

    prob = _Problem(mesh, material, cfg, network)
    state = initial_state.copy() if initial_state is not None else FieldState.zeros(mesh, cfg.method)
    if initial_state is None:
        state.lf = cfg.lf_start
    nominal = (cfg.lf_end - state.lf) / cfg.n_increments
    if nominal <= 0:
        raise ValueError("initial state is already at or beyond lf_end")
    step = nominal
    reductions = 0
    results, rows = [], []
    snaps: dict = {}
    best: dict = {}
    lf = state.lf
    while lf < cfg.lf_end - 1e-9 * nominal:
        step = min(step, cfg.lf_end - lf)
        try:
            new, res, ip = newton_increment(state, lf + step, cfg, mesh, material, network, _problem=prob)
        except NotConverged:
            step *= cfg.step_reduction
            reductions += 1
            if reductions > cfg.max_reductions or step < cfg.min_step_ratio * nominal:
                raise Aborted(f"step reduced below limit at lf={lf:g}", results, state)
            continue
        state, lf = new, new.lf
        results.append(res)
        rows.append((res.lf, res.reactions, res.iterations, res.n_dofs, res.wall_time))
        for target in cfg.snapshot_lfs:
            dist = abs(lf - target)
            if target not in best or dist < best[target]:
                best[target] = dist
                snaps[target] = Snapshot.from_increment(mesh, state, ip, res)
        if progress is not None:
            progress(res)
        step = min(step / cfg.step_reduction, nominal)
        reductions = 0
    curve = np.array(rows, dtype=float).reshape(-1, 5)
    return AnalysisResult(results, state, curve, snaps)


def with_method(cfg: SolverConfig, method: str) -> SolverConfig:
    return replace(cfg, method=method)
