"""Explicit RK2/RK3 in compact form, NERK dense output, time-step selection.

Every stage function works on anything supporting ``+`` and scalar ``*``:
numpy arrays, floats, ``fractions.Fraction`` and sympy expressions.  The
integer-coefficient forms below are chosen so that rational inputs give
exact rational outputs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class TimeStepError(ArithmeticError):
    """No finite time step can be derived from the current state."""


@dataclass(frozen=True)
class ButcherTable:
    a: tuple[tuple[Fraction, ...], ...]
    b: tuple[Fraction, ...]
    c: tuple[Fraction, ...]

    @property
    def stages(self) -> int:
        return len(self.b)

    def check(self) -> None:
        for i, row in enumerate(self.a):
            if sum(row, Fraction(0)) != self.c[i]:
                raise ValueError(f"row {i} of a does not sum to c")
        if sum(self.b, Fraction(0)) != 1:
            raise ValueError("weights do not sum to one")


_F = Fraction
RK2 = ButcherTable(a=((), (_F(1),)), b=(_F(1, 2), _F(1, 2)), c=(_F(0), _F(1)))
RK3 = ButcherTable(
    a=((), (_F(1),), (_F(1, 4), _F(1, 4))),
    b=(_F(1, 6), _F(1, 6), _F(2, 3)),
    c=(_F(0), _F(1), _F(1, 2)),
)


class SchemeKind(enum.Enum):
    FV_RK2 = "fv-rk2"
    FV_RK3 = "fv-rk3"
    MR_RK2 = "mr-rk2"
    MR_RK3 = "mr-rk3"
    MRLT_RK2 = "mrlt-rk2"
    MRLT_NERK2 = "mrlt-nerk2"
    MRLT_NERK3 = "mrlt-nerk3"

    @classmethod
    def parse(cls, name: str) -> "SchemeKind":
        key = name.strip().lower().replace("_", "-").replace("/", "-")
        for kind in cls:
            if kind.value == key:
                return kind
        raise ValueError(f"unknown scheme {name!r}; expected one of {[k.value for k in cls]}")

    @property
    def order(self) -> int:
        return 3 if self.value.endswith("3") else 2

    @property
    def adaptive(self) -> bool:
        return not self.value.startswith("fv")

    @property
    def local_time_stepping(self) -> bool:
        return self.value.startswith("mrlt")

    @property
    def table(self) -> ButcherTable:
        return RK3 if self.order == 3 else RK2


# ---------------------------------------------------------------------------
# compact stages


def rk_stage1(q_n, f1, dt):
    return q_n + dt * f1


def rk2_stage2(q_n, q_star, f2, dt):
    return (q_n + q_star + dt * f2) / 2


def rk3_stage2(q_n, q_star, f2, dt):
    return (3 * q_n + q_star + dt * f2) / 4


def rk3_stage3(q_n, q_dstar, f3, dt):
    return (q_n + 2 * q_dstar + 2 * dt * f3) / 3


def _check_theta(theta) -> None:
    if not (0 < theta <= 1):
        raise ValueError(f"theta must lie in (0, 1], got {theta}")


def nerk_beta(theta):
    """Dense-output weights of the two-stage scheme at ``t + theta*dt``."""
    _check_theta(theta)
    if isinstance(theta, (int, Fraction)):
        theta = Fraction(theta)
    return theta - theta * theta / 2, theta * theta / 2


def nerk_first_substep(q_n, f1, dt, theta):
    """``q_n + beta1*dt*f1``: the value kept in a NERK slot after stage 1."""
    b1, _ = nerk_beta(theta)
    return q_n + b1 * dt * f1


def nerk_second_substep(partial, f2, dt, theta):
    _, b2 = nerk_beta(theta)
    return partial + b2 * dt * f2


def nerk2_value(q_n, f1, f2, dt, theta):
    """Solution at ``t + theta*dt`` from the two stage derivatives."""
    _check_theta(theta)
    if theta == 1:
        return rk2_stage2(q_n, rk_stage1(q_n, f1, dt), f2, dt)
    return nerk_second_substep(nerk_first_substep(q_n, f1, dt, theta), f2, dt, theta)


def amplification(kind: SchemeKind | str, z):
    """One-step amplification of ``q' = lambda q`` with ``z = lambda*dt`` (uniform grid)."""
    kind = SchemeKind.parse(kind) if isinstance(kind, str) else kind
    one = Fraction(1) if isinstance(z, (int, Fraction)) else 1
    q = one
    qs = rk_stage1(q, z * q, 1)
    if kind.order == 2:
        return rk2_stage2(q, qs, z * qs, 1)
    qss = rk3_stage2(q, qs, z * qs, 1)
    return rk3_stage3(q, qss, z * qss, 1)


# ---------------------------------------------------------------------------
# time step


def cfl_timestep(model, tree, sigma: float, fallback_dt: float | None = None, slot: str = "q_new") -> float:
    """Finest-level step from the Courant number, with a diffusive cap."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    dxL = float(np.min(tree.dx(tree.L)))
    speed = 0.0
    for k in range(tree.L + 1):
        leaves = tree.topology(k).leaves
        if leaves.size:
            speed = max(speed, float(model.max_wave_speed(tree.data[slot][k][:, leaves])))
    return timestep_from_speed(speed, dxL, sigma, model.d, model.nu, fallback_dt)


def timestep_from_speed(speed: float, dx: float, sigma: float, d: int, nu: float, fallback_dt: float | None = None) -> float:
    if not np.isfinite(speed):
        raise TimeStepError("non-finite wave speed")
    limits = []
    if speed > 0:
        limits.append(sigma * dx / speed)
    if nu > 0:
        limits.append(sigma * dx * dx / (2 * d * nu))
    if not limits:
        if fallback_dt is not None:
            return float(fallback_dt)
        raise TimeStepError("zero wave speed and no diffusion; supply a time step")
    return float(min(limits))
