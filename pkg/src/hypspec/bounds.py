"""Closed-form constants of the two-sided estimate and their bookkeeping.

All functions are pure.  ``BoundReport`` gathers measured spectral data of a
cell and a graph next to the constants derived from them, and records which
inequalities held.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, asdict


from .config import TOL, NumericalError, ValidationError
from .hyp_core import collar_halfwidth, gudermannian


def buser_constant(n: int) -> float:
    if n < 2:
        raise ValidationError("dimension must be at least 2")
    return math.sqrt(2 * math.sqrt(2) * n * (n - 1))


def buser_upper_bound(boundary_length: float, volume: float, n: int = 2) -> float:
    if volume <= 0:
        raise ValidationError("core volume must be positive")
    if boundary_length < 0:
        raise ValidationError("boundary length must be nonnegative")
    return buser_constant(n) * boundary_length / volume


def A2(v: int, l: float, lambda0N: float) -> float:
    """Amenable-side coefficient (v - 1)(1/m(l)^2 + lambda0)."""
    if v < 2:
        raise ValidationError("valence must be at least 2")
    if lambda0N < 0:
        raise ValidationError("lambda0 must be nonnegative")
    m = collar_halfwidth(l)
    return (v - 1) * (1.0 / m**2 + lambda0N)


def collar_energy_ratio(R: float) -> float:
    """(2 arctan(e^R) - pi/2) / U(R)^2 with U(R) = arcsin(tanh R)."""
    if not R > 0:
        raise ValidationError("ratio is defined for R > 0")
    return (2 * math.atan(math.exp(R)) - math.pi / 2) / float(gudermannian(R)) ** 2


def _golden_min(f, a, b, tol):
    invphi = (math.sqrt(5) - 1) / 2
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def A_tripleprime(l: float, return_argmin: bool = False):
    """(l / 8 pi) times the minimum of the collar energy ratio over (0, m(l)].

    The ratio blows up like 1/R at 0, so the search window starts a hair above it.
    The golden-section interior minimum is compared against the closed endpoint.
    """
    m = collar_halfwidth(l)
    lo = min(1e-8, 1e-3 * m)
    x, fx = _golden_min(collar_energy_ratio, lo, m, 1e-10)
    f_end = collar_energy_ratio(m)
    if f_end <= fx:
        x, fx = m, f_end
    value = l / (8 * math.pi) * fx
    return (value, x) if return_argmin else value


def A_doubleprime(lambda1: float, l: float) -> float:
    return lambda1 * 0.25 * l * math.sinh(collar_halfwidth(l))


def collar_constant(lambda1: float, l: float, psi0_cuff: float) -> float:
    """max(A'', A''') Psi0(0)^2 / (2 pi)."""
    a_max = max(A_doubleprime(lambda1, l), A_tripleprime(l))
    return a_max * psi0_cuff**2 / (2 * math.pi)


def A1(eta: float, lambda1: float, l: float, psi0_cuff: float) -> float:
    """Non-amenable coefficient eta / (1 + 1/lambda1) * A."""
    if eta < 0 or lambda1 <= 0 or l <= 0:
        raise ValidationError("need eta >= 0, lambda1 > 0, l > 0")
    if psi0_cuff == 0:
        warnings.warn("ground state vanishes on the cuffs: lower bound degenerates to 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    return eta / (1 + 1 / lambda1) * collar_constant(lambda1, l, psi0_cuff)


def bounded_decomposition_bounds(k: float, K: float, v: int, eta: float,
                                 collar_factor: float | None = None) -> tuple[float, float]:
    """Coefficients multiplying h(G) (upper) and mu0(G) (lower).

    ``collar_factor`` multiplies the lower coefficient when given.  Passing the
    collar constant of the cell gives the conservative variant; the default
    leaves it out.
    """
    if not 0 < k < K:
        raise ValidationError("need 0 < k < K")
    if v < 2:
        raise ValidationError("valence must be at least 2")
    if eta <= 0:
        raise ValidationError("spectral gap must be positive")
    m = collar_halfwidth(K)
    upper = K * (v - 1) / m**2
    lower = eta / (1 + K / (k * eta))
    if collar_factor is not None:
        lower *= collar_factor
    return upper, lower


_FIELDS = ("lambda0N_cell", "eta", "lambda1", "psi0_cuff", "l", "v", "m_l", "R2",
           "A1", "A2", "A_doubleprime", "A_tripleprime", "mu0", "h_lower",
           "h_upper", "lower_bound", "upper_bound", "buser_upper", "measured_lambda0")

_MEASURED = {"lambda0N_cell", "eta", "lambda1", "psi0_cuff", "mu0", "h_lower",
             "h_upper", "measured_lambda0"}


@dataclass
class BoundReport:
    lambda0N_cell: float
    eta: float
    lambda1: float
    psi0_cuff: float
    l: float
    v: int
    m_l: float
    R2: float
    A1: float
    A2: float
    A_doubleprime: float
    A_tripleprime: float
    mu0: float
    h_lower: float
    h_upper: float
    lower_bound: float
    upper_bound: float
    buser_upper: float | None
    measured_lambda0: float | None
    checks: dict = field(default_factory=dict)

    def provenance(self) -> dict:
        return {k: ("measured" if k in _MEASURED else "closed_form") for k in _FIELDS}

    def as_dict(self) -> dict:
        d = asdict(self)
        d["provenance"] = self.provenance()
        return d

    def to_json(self) -> str:
        def enc(x):
            if isinstance(x, float):
                return float(f"{x:.17g}")
            return x
        d = {k: enc(v) for k, v in self.as_dict().items()}
        return json.dumps(d, indent=2, sort_keys=True)

    def csv_header(self) -> str:
        return ",".join(_FIELDS)

    def csv_row(self) -> str:
        vals = []
        for k in _FIELDS:
            x = getattr(self, k)
            vals.append("" if x is None else f"{x:.17g}")
        return ",".join(vals)


def sandwich_report(*, lambda0N: float, lambda1: float, psi0_cuff: float, l: float,
                    v: int, mu0: float, h_upper: float, h_lower: float = 0.0,
                    measured_lambda0: float | None = None,
                    boundary_length: float | None = None, core_volume: float | None = None,
                    tol: float = TOL.sandwich_run) -> BoundReport:
    """Assemble every constant and check both inequalities against ``measured_lambda0``.

    The measured value is a Dirichlet approximant, hence an upper approximant of
    the bottom of the spectrum: a lower bound above it is a hard failure, an
    upper bound below it is recorded but only fails beyond ``tol``.
    """
    for name, x in (("lambda0N", lambda0N), ("lambda1", lambda1), ("l", l),
                    ("mu0", mu0), ("h_upper", h_upper)):
        if x is None:
            raise ValidationError(f"missing field {name}")
    eta = lambda1 - lambda0N
    if eta < -TOL.negative_eig:
        raise ValidationError("lambda1 below lambda0")
    eta = max(eta, 0.0)
    a1 = A1(eta, lambda1, l, psi0_cuff) if lambda1 > 0 else 0.0
    a2 = A2(v, l, lambda0N)
    lower = lambda0N + a1 * mu0
    upper = lambda0N + a2 * h_upper
    buser = None
    if boundary_length is not None and core_volume is not None:
        buser = buser_upper_bound(boundary_length, core_volume)
    checks = {"bounds_ordered": lower <= upper + tol}
    if measured_lambda0 is not None:
        checks["lower_le_measured"] = lower - tol <= measured_lambda0
        checks["measured_ge_cell"] = measured_lambda0 >= lambda0N - TOL.monotone_slack
        if lower > measured_lambda0 + tol:
            raise NumericalError(
                f"lower bound {lower:.6g} exceeds Dirichlet approximant {measured_lambda0:.6g}")
    return BoundReport(
        lambda0N_cell=lambda0N, eta=eta, lambda1=lambda1, psi0_cuff=psi0_cuff, l=l, v=v,
        m_l=collar_halfwidth(l), R2=buser_constant(2), A1=a1, A2=a2,
        A_doubleprime=A_doubleprime(lambda1, l), A_tripleprime=A_tripleprime(l),
        mu0=mu0, h_lower=h_lower, h_upper=h_upper, lower_bound=lower, upper_bound=upper,
        buser_upper=buser, measured_lambda0=measured_lambda0, checks=checks)
