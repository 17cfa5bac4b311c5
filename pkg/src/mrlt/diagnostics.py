"""Error norms, convergence orders, cost metrics and the interface stability model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
import numpy as np
import sympy as sp

from . import lt_scheduler as lt
from . import time_schemes as ts
from .time_schemes import SchemeKind


class ZeroDenominatorError(ZeroDivisionError):
    pass


# ---------------------------------------------------------------------------
# norms and rates


def l1_error(field_, reference, L: int | None = None, d: int | None = None) -> np.ndarray:
    """Mean absolute difference per variable on the uniform level-L grid.

    Arrays are ``(ncomp, n, ...)``; a bare ``(n, ...)`` array is treated as
    a single variable when ``d`` equals its dimension (or ``d`` is None).
    """
    a = np.asarray(field_, dtype=float)
    b = np.asarray(reference, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if d is None or a.ndim == d:
        a, b = a[None], b[None]
    if L is not None and d is not None and a[0].size != 2 ** (L * d):
        raise ValueError("field size does not match level and dimension")
    return np.abs(a - b).reshape(a.shape[0], -1).mean(axis=1)


def self_convergence_order(q_dt, q_half, q_quarter) -> float:
    num = float(np.sum(np.abs(np.asarray(q_dt, dtype=float) - np.asarray(q_half, dtype=float))))
    den = float(np.sum(np.abs(np.asarray(q_half, dtype=float) - np.asarray(q_quarter, dtype=float))))
    if den == 0.0:
        raise ZeroDenominatorError("the two finer runs are identical")
    return math.log2(num / den)


def cost_mu(e: float, t_method: float, t_fv: float) -> float:
    if t_fv <= 0:
        raise ZeroDivisionError("reference time must be positive")
    return e * t_method / t_fv


def gain_lambda(mu_other: float, mu_nerk: float) -> float:
    if mu_nerk <= 0:
        raise ZeroDivisionError("cost of the compared method must be positive")
    return mu_other / mu_nerk


# ---------------------------------------------------------------------------
# compression


def compression_timeseries(run) -> dict:
    """Per-cycle leaf percentages of a finished run with summary values."""
    series = list(getattr(run, "leaf_percent", []) or [100.0])
    return {"series": series, "mean": float(np.mean(series)), "final": float(series[-1])}


@dataclass
class RunMetrics:
    scheme: str
    max_level: int
    e_l1: dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0
    steps: int = 0
    leaf_counts: list[int] = field(default_factory=list)
    compression_mean: float = 100.0
    compression_final: float = 100.0
    mu: float | None = None
    gain: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if any(v < 0 for v in self.e_l1.values()):
            raise ValueError("errors must be nonnegative")


# ---------------------------------------------------------------------------
# two-cell interface model


@dataclass(frozen=True)
class AmplificationPoly:
    """Polynomial in ``z = lambda * dt`` with exact rational coefficients (ascending)."""

    coeffs: tuple[Fraction, ...]

    @classmethod
    def from_expr(cls, expr, z) -> "AmplificationPoly":
        poly = sp.Poly(sp.expand(expr), z)
        raw = list(reversed(poly.all_coeffs()))
        while len(raw) > 1 and raw[-1] == 0:
            raw.pop()
        return cls(tuple(Fraction(int(sp.fraction(c)[0]), int(sp.fraction(c)[1])) for c in map(sp.Rational, raw)))

    def __call__(self, z):
        return sum(float(c) * z**i for i, c in enumerate(self.coeffs))

    def is_zero(self) -> bool:
        return all(c == 0 for c in self.coeffs)

    def __eq__(self, other):
        if isinstance(other, AmplificationPoly):
            other = other.coeffs
        a = list(self.coeffs)
        b = [Fraction(x) for x in other]
        n = max(len(a), len(b))
        return a + [Fraction(0)] * (n - len(a)) == b + [Fraction(0)] * (n - len(b))

    def __hash__(self):
        return hash(self.coeffs)


class InterfaceReplay:
    """First LT iteration on a coarse leaf next to a fine leaf, for ``q' = lambda q``.

    Every right-hand side is ``lambda`` times the value the neighbor
    presents across the interface, so each synchronization path of the
    local time-stepping algorithm shows up directly in the result.  ``z`` is
    ``lambda * dt`` of the fine level; the coarse cell uses ``Z = 2z``.
    The spatially constant start value is 1.  Works with sympy symbols,
    Fractions or floats.
    """

    def __init__(self, scheme: SchemeKind, z):
        self.scheme = scheme
        self.z = z
        self.Z = 2 * z
        self.values: dict[str, object] = {}
        self.errors: dict[str, object] = {}
        self._run()

    def _run(self):
        z, Z = self.z, self.Z
        exact = isinstance(z, (sp.Basic, Fraction, int))
        qn = Fraction(1) if exact else 1.0
        quarter = Fraction(1, 4) if exact else 0.25

        # what a uniform grid would present at each stage
        ref_qs_fine = ts.rk_stage1(qn, z * qn, 1)
        ref_qs_coarse = ts.rk_stage1(qn, Z * qn, 1)

        # stage 1: both cells see the start value
        qsC = ts.rk_stage1(qn, Z * qn, 1)
        qsF = ts.rk_stage1(qn, z * qn, 1)
        aC = ts.nerk_first_substep(qn, Z * qn, 1, quarter)

        # stage 2: the fine leaf sees the coarse virtual child at t + dt,
        # the coarse leaf sees the fine leaf extrapolated to t + 2dt
        virtual = (qn + qsC) / 2
        self.errors["eps1"] = ref_qs_fine - virtual
        seen = lt.extrapolate_leaf(qsF, z * qsF, 1)
        self.errors["eps2"] = ref_qs_coarse - seen
        if self.scheme.order == 2:
            self.values["fine"] = ts.rk2_stage2(qn, qsF, z * virtual, 1)
            self.values["coarse"] = ts.rk2_stage2(qn, qsC, Z * seen, 1)
            return
        qssF = ts.rk3_stage2(qn, qsF, z * virtual, 1)
        qssC = ts.rk3_stage2(qn, qsC, Z * seen, 1)
        aC = ts.nerk_second_substep(aC, Z * seen, 1, quarter)

        # stage 3: the fine leaf sees the coarse quarter-step value,
        # the coarse leaf sees the fine end-of-step value
        self.errors["eps3"] = ts.rk3_stage2(qn, ref_qs_fine, z * ref_qs_fine, 1) - aC
        qnewF = ts.rk3_stage3(qn, qssF, z * aC, 1)
        self.errors["eps4"] = ts.rk3_stage2(qn, ref_qs_coarse, Z * ref_qs_coarse, 1) - qnewF
        self.values["fine"] = qnewF
        self.values["coarse"] = ts.rk3_stage3(qn, qssC, Z * qnewF, 1)


Z_SYMBOL = sp.Symbol("z")


def amplification_polynomial(scheme: SchemeKind | str, interface: str = "uniform") -> AmplificationPoly:
    """Exact one-step amplification of the designated cell.

    ``fine-side`` is expressed in ``z`` of the fine level, ``coarse-side`` in
    ``z`` of the coarse level.
    """
    scheme = SchemeKind.parse(scheme) if isinstance(scheme, str) else scheme
    z = Z_SYMBOL
    if interface == "uniform":
        return AmplificationPoly.from_expr(ts.amplification(scheme, z), z)
    if not scheme.local_time_stepping:
        raise ValueError("interface polynomials need a local time-stepping scheme")
    if interface == "fine-side":
        return AmplificationPoly.from_expr(InterfaceReplay(scheme, z).values["fine"], z)
    if interface == "coarse-side":
        rep = InterfaceReplay(scheme, z / 2)
        return AmplificationPoly.from_expr(rep.values["coarse"], z)
    raise ValueError(f"unknown interface {interface!r}")


def interface_error_terms(scheme: SchemeKind | str = SchemeKind.MRLT_NERK3) -> dict[str, AmplificationPoly]:
    """Interface perturbations, each in ``z`` of the level whose value it corrupts.

    eps1 and eps3 perturb values read by the fine leaf (fine ``z``), eps2 and
    eps4 perturb values read by the coarse leaf (coarse ``z``).
    """
    scheme = SchemeKind.parse(scheme) if isinstance(scheme, str) else scheme
    z = Z_SYMBOL
    fine = InterfaceReplay(scheme, z).errors
    coarse = InterfaceReplay(scheme, z / 2).errors
    out = {
        "eps1": AmplificationPoly.from_expr(fine["eps1"], z),
        "eps2": AmplificationPoly.from_expr(coarse["eps2"], z),
    }
    if scheme.order == 3:
        out["eps3"] = AmplificationPoly.from_expr(fine["eps3"], z)
        out["eps4"] = AmplificationPoly.from_expr(coarse["eps4"], z)
    return out


def numeric_interface_update(scheme: SchemeKind | str, interface: str, z: float) -> float:
    """Floating-point replay of the same iteration, for cross-checking."""
    scheme = SchemeKind.parse(scheme) if isinstance(scheme, str) else scheme
    if interface == "fine-side":
        return float(InterfaceReplay(scheme, float(z)).values["fine"])
    if interface == "coarse-side":
        return float(InterfaceReplay(scheme, float(z) / 2).values["coarse"])
    return float(ts.amplification(scheme, float(z)))
