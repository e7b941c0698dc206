"""Closed-form hyperbolic geometry and one-dimensional radial oracles.

Curvature is -1 throughout.  Collars around a closed geodesic of length
``l`` use Fermi coordinates ``(r, theta)`` with metric
``dr^2 + (l / 2 pi)^2 cosh(r)^2 dtheta^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, linalg, optimize

from .config import ValidationError

TOPOLOGIES = ("pants_ring", "torus_with_v_holes")


def collar_halfwidth(l: float) -> float:
    """Width of the embedded collar around a simple closed geodesic of length ``l``."""
    if not l > 0:
        raise ValidationError(f"geodesic length must be positive, got {l}")
    # asinh(1/sinh(l/2)) loses digits for large l; 1/sinh = 2e^{-l/2}/(1-e^{-l})
    if l > 40.0:
        return math.asinh(2.0 * math.exp(-0.5 * l) / -math.expm1(-l))
    return math.asinh(1.0 / math.sinh(0.5 * l))


def gudermannian(r):
    """arcsin(tanh r), the radial harmonic function on a collar.

    Evaluated as arctan(sinh r), which keeps full precision for large r.
    """
    return np.arctan(np.sinh(r))


@dataclass(frozen=True)
class FermiCollar:
    l: float
    halfwidth: float = field(init=False)
    positive_side: str = "cell"

    def __post_init__(self):
        object.__setattr__(self, "halfwidth", collar_halfwidth(self.l))

    def area(self, r0: float | None = None, r1: float | None = None) -> float:
        m = self.halfwidth
        r0 = -m if r0 is None else r0
        r1 = m if r1 is None else r1
        return self.l * (math.sinh(r1) - math.sinh(r0))

    def metric(self, r):
        """Diagonal metric coefficients (g_rr, g_theta_theta)."""
        c = self.l / (2 * math.pi) * np.cosh(r)
        return np.ones_like(c), c * c


@dataclass(frozen=True)
class CuspNeighborhood:
    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValidationError("cusp threshold must be positive")

    @property
    def volume(self) -> float:
        # integral over r >= 0 of (eps / 2pi) e^{-r} dr dtheta
        return self.epsilon

    def metric(self, r):
        c = self.epsilon / (2 * math.pi) * np.exp(-r)
        return np.ones_like(c), c * c


@dataclass(frozen=True)
class PantsSpec:
    cuffs: tuple[float, float, float]
    cusps: tuple[bool, bool, bool] = (False, False, False)

    def __post_init__(self):
        if len(self.cuffs) != 3:
            raise ValidationError("a pair of pants has three boundary curves")
        for c, is_cusp in zip(self.cuffs, self.cusps):
            if not is_cusp and not c > 0:
                raise ValidationError("meshable cuffs need positive length")

    @property
    def area(self) -> float:
        return gauss_bonnet_volume(0, 3 - sum(self.cusps), sum(self.cusps))

    @property
    def meshable(self) -> bool:
        return not any(self.cusps)


@dataclass(frozen=True)
class CellSpec:
    """Declarative cell: ``v`` geodesic boundaries of common length ``cuff_length``.

    ``pants_ring`` is the genus-zero surface with ``v >= 3`` boundaries obtained
    by doubling a right-angled ``2v``-gon; ``torus_with_v_holes`` is a cyclic
    chain of ``v`` pants with all cuffs of length ``cuff_length``.  Both carry an
    order-``v`` isometry permuting the boundaries cyclically.
    """

    v: int
    cuff_length: float
    topology: str = "pants_ring"
    funnels: tuple[bool, ...] = ()

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ValidationError(
                f"unknown topology {self.topology!r}; expected one of {TOPOLOGIES}")
        if not isinstance(self.v, (int, np.integer)) or self.v < 1:
            raise ValidationError("boundary count must be a positive integer")
        if self.topology == "pants_ring" and self.v < 3:
            raise ValidationError("pants_ring needs v >= 3 (v = 2 is a flat annulus)")
        if not self.cuff_length > 0:
            raise ValidationError("cuff length must be positive")
        funnels = tuple(bool(f) for f in self.funnels) or (False,) * self.v
        if len(funnels) != self.v:
            raise ValidationError("funnels needs one flag per boundary")
        object.__setattr__(self, "funnels", funnels)

    @property
    def genus(self) -> int:
        return 0 if self.topology == "pants_ring" else 1

    @property
    def pants_count(self) -> int:
        return self.v - 2 if self.topology == "pants_ring" else self.v

    @property
    def area(self) -> float:
        """Area of the compact core (funnels excluded)."""
        return gauss_bonnet_volume(self.genus, self.v, 0)

    @property
    def euler_characteristic(self) -> int:
        return 2 - 2 * self.genus - self.v

    def to_json(self) -> dict:
        return {"v": int(self.v), "cuff_length": float(self.cuff_length),
                "topology": self.topology, "funnels": list(self.funnels)}

    @classmethod
    def from_json(cls, data: dict) -> "CellSpec":
        allowed = {"v", "cuff_length", "topology", "funnels"}
        extra = set(data) - allowed
        if extra:
            raise ValidationError(f"unknown cell keys: {sorted(extra)}")
        try:
            return cls(v=int(data["v"]), cuff_length=float(data["cuff_length"]),
                       topology=data.get("topology", "pants_ring"),
                       funnels=tuple(data.get("funnels", ())))
        except KeyError as exc:
            raise ValidationError(f"cell spec missing {exc}") from None


def gauss_bonnet_volume(genus: int, boundaries: int, cusps: int) -> float:
    chi = 2 - 2 * genus - boundaries - cusps
    if genus < 0 or boundaries < 0 or cusps < 0:
        raise ValidationError("topological counts must be nonnegative")
    if chi >= 0:
        raise ValidationError(f"Euler characteristic {chi} admits no hyperbolic metric")
    return -2 * math.pi * chi


def hexagon_connecting_side(a: float, b: float, c: float) -> float:
    """Side between the sides of lengths ``b`` and ``c``, opposite to ``a``.

    Right-angled hexagon with alternating sides a, b, c.
    """
    x = (math.cosh(a) + math.cosh(b) * math.cosh(c)) / (math.sinh(b) * math.sinh(c))
    return math.acosh(x)


def hexagon_from_cuffs(l1: float, l2: float, l3: float) -> tuple[float, ...]:
    """Sides of the right-angled hexagon with alternating sides ``l_i / 2``.

    Returned in cyclic order ``(a1, c3, a2, c1, a3, c2)`` where ``c_k`` is the
    side opposite to ``a_k``.
    """
    for l in (l1, l2, l3):
        if not l > 0:
            raise ValidationError("cuff lengths must be positive")
    a1, a2, a3 = 0.5 * l1, 0.5 * l2, 0.5 * l3
    c1 = hexagon_connecting_side(a1, a2, a3)
    c2 = hexagon_connecting_side(a2, a3, a1)
    c3 = hexagon_connecting_side(a3, a1, a2)
    return (a1, c3, a2, c1, a3, c2)


def regular_hexagon_cuff() -> float:
    """Cuff length for which all six hexagon sides are equal."""
    def gap(l):
        sides = hexagon_from_cuffs(l, l, l)
        return sides[1] - sides[0]
    return optimize.brentq(gap, 0.1, 10.0, xtol=1e-15)


def fermi_laplacian_apply(f: Callable, l: float, r, theta, step: float = 1e-4):
    """Positive Laplacian in Fermi coordinates, by centred differences.

    ``f(r, theta)`` must accept arrays.  Intended as a test oracle.
    """
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    h = step
    f0 = f(r, theta)
    frr = (f(r + h, theta) - 2 * f0 + f(r - h, theta)) / h**2
    fr = (f(r + h, theta) - f(r - h, theta)) / (2 * h)
    ftt = (f(r, theta + h) - 2 * f0 + f(r, theta - h)) / h**2
    return -(frr + np.tanh(r) * fr + (2 * math.pi) ** 2 / (l**2 * np.cosh(r) ** 2) * ftt)


def _radial_fd(l, k, r0, r1, bc, n):
    """Finite-volume discretisation of -(cosh F')'/cosh + (2 pi k/(l cosh))^2 F."""
    x = np.linspace(r0, r1, n + 1)
    h = x[1] - x[0]
    half = 0.5 * (x[:-1] + x[1:])
    flux = np.cosh(half) / h
    w = np.cosh(x) * h
    w[0] *= 0.5
    w[-1] *= 0.5
    pot = (2 * math.pi * k / l) ** 2 / np.cosh(x) ** 2
    main = np.zeros(n + 1)
    main[:-1] += flux
    main[1:] += flux
    main += pot * w
    off = -flux
    keep = np.ones(n + 1, dtype=bool)
    if bc[0] == "dirichlet":
        keep[0] = False
    if bc[1] == "dirichlet":
        keep[-1] = False
    A = np.diag(main) + np.diag(off, 1) + np.diag(off, -1)
    A = A[np.ix_(keep, keep)]
    W = w[keep]
    s = 1 / np.sqrt(W)
    vals = linalg.eigvalsh(s[:, None] * A * s[None, :], subset_by_index=[0, 0])
    return vals[0]


def collar_sturm_liouville(l: float, k: int = 0, interval: Sequence[float] | None = None,
                           bc: Sequence[str] = ("dirichlet", "dirichlet"),
                           n: int = 400) -> float:
    """Lowest eigenvalue of the radial collar operator for angular mode ``k``.

    Vertex-centred finite volumes on three grids, then two Richardson steps.
    """
    if k < 0 or int(k) != k:
        raise ValidationError("mode index must be a nonnegative integer")
    for b in bc:
        if b not in ("neumann", "dirichlet"):
            raise ValidationError(f"unknown boundary condition {b!r}")
    if interval is None:
        m = collar_halfwidth(l)
        interval = (-m, m)
    r0, r1 = map(float, interval)
    if not r1 > r0:
        raise ValidationError("empty interval")
    lam = [_radial_fd(l, k, r0, r1, bc, n * 2**j) for j in range(3)]
    r1_ = [(4 * lam[j + 1] - lam[j]) / 3 for j in range(2)]
    return (16 * r1_[1] - r1_[0]) / 15


def disk_dirichlet_shooting(radius: float) -> float:
    """First Dirichlet eigenvalue of a geodesic disk, by shooting on -F''-coth(r)F' = lam F."""
    if not radius > 0:
        raise ValidationError("radius must be positive")

    def endpoint(lam):
        r_start = 1e-6 * radius
        y0 = [1 - lam * r_start**2 / 4, -lam * r_start / 2]

        def rhs(r, y):
            return [y[1], -y[1] / math.tanh(r) - lam * y[0]]

        sol = integrate.solve_ivp(rhs, (r_start, radius), y0, rtol=1e-12, atol=1e-14,
                                  method="DOP853")
        return sol.y[0, -1]

    # Euclidean bound j0^2/R^2 + 1/4 brackets from above for moderate radii
    lo, hi = 0.25, 5.784 / radius**2 + 1.0
    while endpoint(hi) > 0:
        hi *= 1.5
    return optimize.brentq(endpoint, lo, hi, xtol=1e-13)


def critical_exponent(lambda0: float) -> float:
    if lambda0 > 0.25:
        raise ValidationError("exponent map is defined for lambda0 <= 1/4")
    if lambda0 < 0:
        raise ValidationError("bottom of spectrum is nonnegative")
    return 0.5 + math.sqrt(0.25 - lambda0)


# -- hyperboloid helpers used by the mesher ---------------------------------

def lorentz(a, b):
    return -a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def fermi_point(x, r):
    """Hyperboloid point at signed distance ``r`` from the geodesic ``x2 = 0``."""
    x = np.asarray(x, dtype=float)
    r = np.asarray(r, dtype=float)
    cr = np.cosh(r)
    return np.stack([cr * np.cosh(x), cr * np.sinh(x), np.sinh(r)], axis=-1)


def to_disk(X):
    X = np.asarray(X)
    return (X[..., 1] + 1j * X[..., 2]) / (1 + X[..., 0])


def from_disk(z):
    z = np.asarray(z, dtype=complex)
    s = 1 - np.abs(z) ** 2
    return np.stack([(1 + np.abs(z) ** 2) / s, 2 * z.real / s, 2 * z.imag / s], axis=-1)


def hyp_distance(X, Y):
    return np.arccosh(np.maximum(-lorentz(X, Y), 1.0))


def disk_distance(z, w):
    z = np.asarray(z, dtype=complex)
    w = np.asarray(w, dtype=complex)
    num = 2 * np.abs(z - w) ** 2
    den = (1 - np.abs(z) ** 2) * (1 - np.abs(w) ** 2)
    return np.arccosh(1 + num / den)


def geodesic_between(X, Y, t):
    """Point at fraction ``t`` of the arc length from ``X`` to ``Y``."""
    d = float(hyp_distance(X, Y))
    if d == 0:
        return np.array(X, dtype=float)
    return (math.sinh((1 - t) * d) * np.asarray(X) + math.sinh(t * d) * np.asarray(Y)) / math.sinh(d)


def mobius_to_origin(z, c):
    return (z - c) / (1 - np.conj(c) * z)


def lambert_sides(alpha: float, gamma: float) -> tuple[float, float, float]:
    """Quadrilateral with three right angles and legs ``alpha``, ``gamma`` at the right-angle vertex.

    Returns (side opposite gamma, side opposite alpha, acute angle).
    """
    side_a = math.atanh(math.cosh(alpha) * math.tanh(gamma))
    side_g = math.atanh(math.cosh(gamma) * math.tanh(alpha))
    angle = math.acos(math.sinh(alpha) * math.sinh(gamma))
    return side_a, side_g, angle
