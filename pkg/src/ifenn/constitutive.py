"""Plane-strain elasticity, equivalent strain measures and Mazars-type damage laws.

Strains use Voigt notation ``(exx, eyy, gxy)`` with engineering shear
``gxy = 2 exy``.  All functions are vectorised over leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEMAITRE = "lemaitre"
MODIFIED_VON_MISES = "modified-von-mises"
MAZARS_ORIGINAL = "mazars-original"
MAZARS_MODIFIED = "mazars-modified"


@dataclass(frozen=True)
class ElasticParams:
    G: float  # shear modulus, KPa
    nu: float
    regime: str = "plane-strain"

    def __post_init__(self):
        if not self.G > 0:
            raise ValueError("G must be positive")
        if not 0.0 <= self.nu < 0.5:
            raise ValueError("Poisson ratio must lie in [0, 0.5)")
        if self.regime != "plane-strain":
            raise ValueError("only plane strain is supported")

    @property
    def E(self) -> float:
        return 2.0 * self.G * (1.0 + self.nu)


@dataclass(frozen=True)
class StrainMeasure:
    variant: str = LEMAITRE
    k: float = 10.0  # compressive/tensile strength ratio, modified von Mises only

    def __post_init__(self):
        if self.variant not in (LEMAITRE, MODIFIED_VON_MISES):
            raise ValueError(f"unknown strain measure {self.variant!r}")
        if self.variant == MODIFIED_VON_MISES and self.k < 1.0:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class DamageParams:
    law: str = MAZARS_ORIGINAL
    alpha: float = 0.7
    beta: float = 1.0e4
    eps_D: float = 1.0e-4

    def __post_init__(self):
        if self.law not in (MAZARS_ORIGINAL, MAZARS_MODIFIED):
            raise ValueError(f"unknown damage law {self.law!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not self.beta > 0 or not self.eps_D > 0:
            raise ValueError("beta and eps_D must be positive")


def elasticity_matrix(p: ElasticParams) -> np.ndarray:
    E, nu = p.E, p.nu
    f = E / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return f * np.array(
        [[1.0 - nu, nu, 0.0], [nu, 1.0 - nu, 0.0], [0.0, 0.0, 0.5 - nu]]
    )


def principal_strains(eps):
    eps = np.asarray(eps, dtype=float)
    a, b, g = eps[..., 0], eps[..., 1], eps[..., 2]
    m = 0.5 * (a + b)
    r = np.hypot(0.5 * (a - b), 0.5 * g)
    return m + r, m - r


def eq_strain_lemaitre(eps):
    """Lemaitre equivalent strain sqrt(<e1>^2 + <e2>^2) and its Voigt gradient.

    The out-of-plane principal strain is zero in plane strain and drops out.
    When both in-plane principals are positive the squared measure equals
    ``tr(eps^2)``, so the gradient is taken from that invariant form; this is
    also what makes the gradient well defined at an eigenvalue tie.
    """
    eps = np.asarray(eps, dtype=float)
    a, b, g = eps[..., 0], eps[..., 1], eps[..., 2]
    m = 0.5 * (a + b)
    h = 0.5 * (a - b)
    r = np.hypot(h, 0.5 * g)
    e1, e2 = m + r, m - r

    val = np.zeros_like(a)
    grad = np.zeros(eps.shape)

    both = e2 > 0.0
    if np.any(both):
        v = np.sqrt(a[both] ** 2 + b[both] ** 2 + 0.5 * g[both] ** 2)
        val[both] = v
        grad[both] = np.stack([a[both], b[both], 0.5 * g[both]], axis=-1) / v[..., None]

    one = (e1 > 0.0) & ~both
    if np.any(one):
        # e1 > 0 >= e2 implies r > 0.
        rr = r[one]
        val[one] = e1[one]
        grad[one] = np.stack(
            [0.5 + 0.5 * h[one] / rr, 0.5 - 0.5 * h[one] / rr, 0.25 * g[one] / rr], axis=-1
        )
    return val, grad


def eq_strain_mvm(eps, measure, nu, return_flags=False):
    """Modified von Mises equivalent strain and its Voigt gradient.

    Uses ``I1 = tr(eps)`` and ``J2 = 3 tr(eps.eps) - tr(eps)^2`` with the
    plane-strain condition ``e33 = 0``.  The first term carries the ``I1``
    factor of the standard form.  Where the root argument vanishes the
    gradient is returned as zero; ``return_flags=True`` also returns a mask of
    those points.  ``measure`` is a :class:`StrainMeasure` or the ratio ``k``.
    """
    k = measure.k if isinstance(measure, StrainMeasure) else float(measure)
    eps = np.asarray(eps, dtype=float)
    a, b, g = eps[..., 0], eps[..., 1], eps[..., 2]
    I1 = a + b
    tr2 = a * a + b * b + 0.5 * g * g
    J2 = 3.0 * tr2 - I1 * I1
    c1 = (k - 1.0) / (2.0 * k * (1.0 - 2.0 * nu))
    q = ((k - 1.0) / (1.0 - 2.0 * nu)) ** 2
    c2 = 2.0 * k / (1.0 + nu) ** 2
    A = q * I1 * I1 + c2 * J2
    A = np.maximum(A, 0.0)
    root = np.sqrt(A)
    val = c1 * I1 + root / (2.0 * k)

    dI1 = np.zeros(eps.shape)
    dI1[..., 0] = 1.0
    dI1[..., 1] = 1.0
    dtr2 = np.stack([2.0 * a, 2.0 * b, g], axis=-1)
    dA = 2.0 * q * I1[..., None] * dI1 + c2 * (3.0 * dtr2 - 2.0 * I1[..., None] * dI1)

    degenerate = A <= np.finfo(float).eps
    safe = np.where(degenerate, 1.0, root)
    grad = c1 * dI1 + dA / (4.0 * k * safe[..., None])
    grad = np.where(degenerate[..., None], 0.0, grad)
    if return_flags:
        return val, grad, degenerate
    return val, grad


def equivalent_strain(eps, measure: StrainMeasure, nu):
    if measure.variant == LEMAITRE:
        return eq_strain_lemaitre(eps)
    return eq_strain_mvm(eps, measure, nu)


def damage(kappa, p: DamageParams):
    """Damage variable and its derivative with respect to the history variable."""
    kappa = np.asarray(kappa, dtype=float)
    d = np.zeros_like(kappa)
    dd = np.zeros_like(kappa)
    act = kappa >= p.eps_D
    if np.any(act):
        k = kappa[act]
        ex = np.exp(-p.beta * (k - p.eps_D))
        if p.law == MAZARS_ORIGINAL:
            d[act] = 1.0 - p.eps_D * (1.0 - p.alpha) / k - p.alpha * ex
            dd[act] = p.eps_D * (1.0 - p.alpha) / k**2 + p.alpha * p.beta * ex
        else:
            s = (1.0 - p.alpha) + p.alpha * ex
            d[act] = 1.0 - p.eps_D / k * s
            dd[act] = p.eps_D / k**2 * s + p.eps_D / k * p.alpha * p.beta * ex
    if d.ndim == 0:
        return float(d), float(dd)
    return d, dd


def update_history(kappa_old, eps_star):
    """Irreversible history update ``max(kappa_old, eps_star)``."""
    kappa = np.maximum(kappa_old, eps_star)
    if np.ndim(kappa) == 0:
        return float(kappa)
    return kappa


def is_loading(kappa_old, eps_star):
    """True where the driving strain reaches the history value.

    The damage derivative enters the tangent only at loading points; at
    unloading points the tangent reduces to the secant ``(1 - d) C``.
    """
    return np.asarray(eps_star) >= np.asarray(kappa_old)


@dataclass(frozen=True)
class Material:
    """Elastic, strain-measure and damage parameters bundled together."""

    elastic: ElasticParams
    measure: StrainMeasure
    damage: DamageParams

    @property
    def C(self) -> np.ndarray:
        return elasticity_matrix(self.elastic)

    def eq_strain(self, eps):
        return equivalent_strain(eps, self.measure, self.elastic.nu)

    def damage_of(self, kappa):
        return damage(kappa, self.damage)
