"""Shared tolerances and error types."""

from __future__ import annotations

from dataclasses import dataclass


class ValidationError(ValueError):
    """Bad input: wrong ranges, malformed specs, violated preconditions."""


class NumericalError(RuntimeError):
    """A computation ran but did not deliver a trustworthy answer."""


@dataclass(frozen=True)
class Tolerances:
    closed_form: float = 1e-12
    sandwich: float = 1e-10
    residual: float = 1e-8
    negative_eig: float = 1e-10
    geodesic_snap: float = 1e-9
    area_rel: float = 5e-3
    min_tri_area: float = 1e-14
    monotone_slack: float = 1e-6
    funnel_gap: float = 0.02
    sandwich_run: float = 5e-2
    dense_cutoff: int = 200
    cheeger_cap: int = 16
    max_unknowns: int = 2_000_000
    r_trunc: float = 3.0


TOL = Tolerances()
