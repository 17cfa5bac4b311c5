"""PDE models, numerical fluxes, and the built-in problem catalogue."""

from __future__ import annotations

import inspect
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tree_mesh import BoundarySpec, FaceBC, GradedTree, ghost_value


class InadmissibleStateError(ArithmeticError):
    """Negative density or pressure."""


class UnknownProblemError(KeyError):
    pass


# ---------------------------------------------------------------------------
# scalar fluxes


def centered_flux(qL, qR, physical_flux: Callable):
    return 0.5 * (physical_flux(qL) + physical_flux(qR))


def burgers_physical(q):
    return 0.5 * q * q


def burgers_upwind_flux(qL, qR):
    """Exact Riemann (Godunov) flux for f(q) = q^2/2."""
    qL = np.asarray(qL, dtype=float)
    qR = np.asarray(qR, dtype=float)
    return np.maximum(burgers_physical(np.maximum(qL, 0.0)), burgers_physical(np.minimum(qR, 0.0)))


def diffusive_flux(qL, qR, dx, nu):
    if dx <= 0:
        raise ValueError("dx must be positive")
    return -nu * (np.asarray(qR) - np.asarray(qL)) / dx


def lax_wendroff_flux(TL, TR, v, dx, dt):
    """Interface flux of the MacCormack scheme for linear transport at speed ``v``."""
    return 0.5 * v * (TL + TR) - 0.5 * v * v * dt / dx * (TR - TL)


def maccormack_advective_update(stencil, v_f, dx, dt):
    """Predictor-corrector increment for ``T_t + v_f T_x = 0``.

    ``stencil`` is ``(T_{i-1}, T_i, T_{i+1})`` (arrays allowed along a
    trailing axis).  Forward-difference predictor, backward-difference
    corrector on the predicted values.
    """
    Tm, T0, Tp = (np.asarray(s, dtype=float) for s in stencil)
    c = v_f * dt / dx
    pred0 = T0 - c * (Tp - T0)
    predm = Tm - c * (T0 - Tm)
    new = 0.5 * (T0 + pred0 - c * (pred0 - predm))
    return new - T0


# ---------------------------------------------------------------------------
# Euler


def euler_pressure(state, gamma: float = 1.4, Ma: float = 1.0):
    """Ideal-gas pressure; ``state`` is (rho, rho*vx, rho*vy, E) along axis 0."""
    q = np.asarray(state, dtype=float)
    rho = q[0]
    kinetic = 0.5 * (q[1] ** 2 + q[2] ** 2) / rho
    p = (gamma - 1.0) * (q[3] - kinetic)
    if np.any(rho <= 0) or np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise InadmissibleStateError("inadmissible Euler state (rho <= 0 or p <= 0)")
    return p


def euler_conservative(rho, vx, vy, p, gamma: float = 1.4):
    rho, vx, vy, p = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (rho, vx, vy, p)))
    E = p / (gamma - 1.0) + 0.5 * rho * (vx * vx + vy * vy)
    return np.stack([rho, rho * vx, rho * vy, E])


def euler_physical_flux(q, axis: int, gamma: float = 1.4):
    p = euler_pressure(q, gamma)
    u = q[1 + axis] / q[0]
    f = q * u
    f[1 + axis] += p
    f[3] += p * u
    return f


def _split_mach(M, beta=1.0 / 8.0):
    sup = np.abs(M) >= 1.0
    s2 = (M * M - 1.0) ** 2
    mp = np.where(sup, 0.5 * (M + np.abs(M)), 0.25 * (M + 1.0) ** 2 + beta * s2)
    mm = np.where(sup, 0.5 * (M - np.abs(M)), -0.25 * (M - 1.0) ** 2 - beta * s2)
    return mp, mm


def _split_pressure(M, alpha=3.0 / 16.0):
    sup = np.abs(M) >= 1.0
    s2 = (M * M - 1.0) ** 2
    sg = np.sign(M)
    pp = np.where(sup, 0.5 * (1.0 + sg), 0.25 * (M + 1.0) ** 2 * (2.0 - M) + alpha * M * s2)
    pm = np.where(sup, 0.5 * (1.0 - sg), 0.25 * (M - 1.0) ** 2 * (2.0 + M) - alpha * M * s2)
    return pp, pm


def ausm_plus_flux(left, right, axis: int, gamma: float = 1.4):
    """AUSM+ interface flux between conservative states of shape (4, n)."""
    qL = np.asarray(left, dtype=float)
    qR = np.asarray(right, dtype=float)
    pL = euler_pressure(qL, gamma)
    pR = euler_pressure(qR, gamma)
    uL = qL[1 + axis] / qL[0]
    uR = qR[1 + axis] / qR[0]
    HL = (qL[3] + pL) / qL[0]
    HR = (qR[3] + pR) / qR[0]
    k = 2.0 * (gamma - 1.0) / (gamma + 1.0)
    asL = np.sqrt(k * HL)
    asR = np.sqrt(k * HR)
    a_half = np.minimum(asL * asL / np.maximum(asL, uL), asR * asR / np.maximum(asR, -uR))
    ML = uL / a_half
    MR = uR / a_half
    mpL, _ = _split_mach(ML)
    _, mmR = _split_mach(MR)
    ppL, _ = _split_pressure(ML)
    _, pmR = _split_pressure(MR)
    m = mpL + mmR
    p_half = ppL * pL + pmR * pR
    phiL = np.stack([qL[0], qL[1], qL[2], qL[0] * HL])
    phiR = np.stack([qR[0], qR[1], qR[2], qR[0] * HR])
    F = a_half * (0.5 * (m + np.abs(m)) * phiL + 0.5 * (m - np.abs(m)) * phiR)
    F[1 + axis] += p_half
    return F


def euler_wave_speed(q, gamma: float = 1.4) -> float:
    p = euler_pressure(q, gamma)
    c = np.sqrt(gamma * p / q[0])
    v = np.maximum(np.abs(q[1]), np.abs(q[2])) / q[0]
    return float(np.max(v + c)) if q.shape[-1] else 0.0


# ---------------------------------------------------------------------------
# flame


@dataclass(frozen=True)
class FlameParams:
    Ze: float = 10.0
    tau: float = 0.8

    def __post_init__(self):
        if not self.Ze > 0:
            raise ValueError("Ze must be positive")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")


def flame_reaction_rate(T, params: FlameParams = FlameParams()):
    T = np.asarray(T, dtype=float)
    # fuel fraction 1 - T, clipped so small overshoots neither reverse the
    # reaction nor reach the pole of the exponent at 1/tau
    y = np.clip(1.0 - T, 0.0, 1.0)
    with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
        expo = params.Ze * y / (params.tau * y - 1.0)
        w = 0.5 * params.Ze**2 * y * np.exp(np.minimum(expo, 700.0))
    return np.where(y == 0.0, 0.0, w)


def flame_velocity(tree: GradedTree, params: FlameParams = FlameParams(), slot: str = "q_new") -> float:
    total = 0.0
    for k in range(tree.L + 1):
        leaves = tree.topology(k).leaves
        if leaves.size:
            total += float(np.sum(flame_reaction_rate(tree.data[slot][k][0, leaves], params))) * float(tree.dx(k)[0])
    return total


# ---------------------------------------------------------------------------
# model container


@dataclass
class ModelSpec:
    """Everything the solvers need to know about one PDE problem.

    ``numerical_flux(qL, qR, axis, dx, dt)`` returns the full interface flux
    (advective plus diffusive) for states of shape ``(ncomp, n)``.
    """

    name: str
    d: int
    variables: tuple[str, ...]
    bounds: tuple[tuple[float, float], ...]
    boundary: BoundarySpec
    numerical_flux: Callable
    initial_condition: Callable
    wave_speed: Callable
    nu: float = 0.0
    source: Callable | None = None
    admissible: Callable | None = None
    begin_cycle: Callable | None = None
    threshold_scale: tuple[float, ...] | None = None
    defaults: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    @property
    def ncomp(self) -> int:
        return len(self.variables)

    def max_wave_speed(self, q: np.ndarray) -> float:
        return float(self.wave_speed(q)) if q.shape[-1] else 0.0

    def check(self, q: np.ndarray) -> None:
        if not np.all(np.isfinite(q)):
            raise InadmissibleStateError(f"{self.name}: non-finite values")
        if self.admissible is not None:
            self.admissible(q)


def apply_boundary(model: ModelSpec, tree: GradedTree, face: tuple[int, int], slot: str = "q_new"):
    """Ghost values behind one domain face for every leaf touching it.

    Returns ``{CellIndex: ghost vector}``.
    """
    axis, side = face
    bc = model.boundary.face(axis, side)
    out = {}
    for k in range(tree.L + 1):
        leaves = tree.topology(k).leaves
        if not leaves.size:
            continue
        coords = np.unravel_index(leaves, tree.shape(k))
        edge = 0 if side < 0 else 2**k - 1
        sel = leaves[coords[axis] == edge]
        if not sel.size:
            continue
        interior = tree.data[slot][k][:, sel]
        if bc.kind == "periodic":
            off = [0] * tree.d
            off[axis] = side
            idx, _, _ = tree.neighbor_flat(k, sel, off)
            ghost = tree.data[slot][k][:, idx]
        else:
            ghost = ghost_value(bc, interior)
        for j, f in enumerate(sel):
            out[tree.cell(k, int(f))] = ghost[:, j]
    return out


# ---------------------------------------------------------------------------
# catalogue


def _advection(speed: float = 1.0) -> ModelSpec:
    def flux(qL, qR, axis, dx, dt):
        return centered_flux(qL, qR, lambda q: speed * q)

    return ModelSpec(
        name="advection",
        d=1,
        variables=("q",),
        bounds=((0.0, 1.0),),
        boundary=BoundarySpec.uniform(1, "periodic"),
        numerical_flux=flux,
        initial_condition=lambda x: np.exp(-100.0 * (x[0] - 0.25) ** 2)[None],
        wave_speed=lambda q: abs(speed),
        defaults=dict(scheme="mrlt-nerk2", max_level=9, epsilon=0.0, cfl=0.5, tend=1.0, reference_level=9),
        params=dict(speed=speed),
    )


def _burgers_flux(qL, qR, axis, dx, dt):
    return burgers_upwind_flux(qL, qR)


def _burgers2d() -> ModelSpec:
    return ModelSpec(
        name="burgers2d",
        d=2,
        variables=("q",),
        bounds=((0.0, 1.0), (0.0, 1.0)),
        boundary=BoundarySpec.uniform(2, "dirichlet", (0.0,)),
        numerical_flux=_burgers_flux,
        initial_condition=lambda x: (np.sin(2 * np.pi * x[0]) * np.sin(2 * np.pi * x[1]))[None],
        wave_speed=lambda q: np.max(np.abs(q)),
        defaults=dict(scheme="mrlt-nerk2", max_level=8, epsilon=0.01, cfl=0.5, tend=0.9, reference_level=10),
    )


def _burgers1d() -> ModelSpec:
    return ModelSpec(
        name="burgers1d",
        d=1,
        variables=("q",),
        bounds=((0.0, 1.0),),
        boundary=BoundarySpec.uniform(1, "periodic"),
        numerical_flux=_burgers_flux,
        initial_condition=lambda x: (0.5 + np.sin(2 * np.pi * x[0]))[None],
        wave_speed=lambda q: np.max(np.abs(q)),
        defaults=dict(scheme="fv-rk2", max_level=8, epsilon=0.01, cfl=0.5, tend=0.5, reference_level=10),
    )


def _flame1d(Ze: float = 10.0, tau: float = 0.8) -> ModelSpec:
    params = FlameParams(Ze, tau)
    state = {"v_f": 0.0}
    nu = 1.0

    def flux(qL, qR, axis, dx, dt):
        v = state["v_f"]
        return lax_wendroff_flux(qL, qR, v, dx, dt) + diffusive_flux(qL, qR, dx, nu)

    def source(q):
        return flame_reaction_rate(q, params)

    def begin_cycle(tree: GradedTree, slot: str = "q_new"):
        state["v_f"] = flame_velocity(tree, params, slot)

    def initial(x):
        return np.where(x[0] <= 1.0, 1.0, np.exp(1.0 - x[0]))[None]

    boundary = BoundarySpec(((FaceBC("neumann"), FaceBC("dirichlet", (0.0,))),))
    return ModelSpec(
        name="flame1d",
        d=1,
        variables=("T",),
        bounds=((-15.0, 15.0),),
        boundary=boundary,
        numerical_flux=flux,
        initial_condition=initial,
        wave_speed=lambda q: abs(state["v_f"]),
        nu=nu,
        source=source,
        begin_cycle=begin_cycle,
        defaults=dict(scheme="mrlt-nerk2", max_level=10, epsilon=0.01, cfl=0.5, tend=5.0, reference_level=12),
        params=dict(Ze=params.Ze, tau=params.tau, flame=params, state=state),
    )


LAX_LIU_6 = {
    # quadrant: (rho, p, vx, vy)
    1: (1.0, 1.0, 0.75, -0.5),
    2: (2.0, 1.0, 0.75, 0.5),
    3: (1.0, 1.0, -0.75, 0.5),
    4: (3.0, 1.0, -0.75, -0.5),
}


def lax_liu_quadrant(x, y) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    right = x >= 0.5
    top = y >= 0.5
    quad = np.where(top, np.where(right, 1, 2), np.where(right, 4, 3))
    return quad


def _euler2d(gamma: float = 1.4) -> ModelSpec:
    def flux(qL, qR, axis, dx, dt):
        return ausm_plus_flux(qL, qR, axis, gamma)

    def initial(x):
        quad = lax_liu_quadrant(x[0], x[1])
        table = np.array([LAX_LIU_6[i] for i in (1, 2, 3, 4)])
        rho, p, vx, vy = (table[quad - 1, j] for j in range(4))
        return euler_conservative(rho, vx, vy, p, gamma)

    return ModelSpec(
        name="euler2d",
        d=2,
        variables=("rho", "rhovx", "rhovy", "E"),
        bounds=((0.0, 1.0), (0.0, 1.0)),
        boundary=BoundarySpec.uniform(2, "neumann"),
        numerical_flux=flux,
        initial_condition=initial,
        wave_speed=lambda q: euler_wave_speed(q, gamma),
        admissible=lambda q: euler_pressure(q, gamma),
        threshold_scale=(1.0, 1.0, 1.0, 1.0),
        defaults=dict(scheme="mrlt-nerk2", max_level=8, epsilon=0.01, cfl=0.5, tend=0.25, reference_level=9),
        params=dict(gamma=gamma, Ma=1.0),
    )


_FACTORIES = {
    "advection": _advection,
    "burgers2d": _burgers2d,
    "burgers1d": _burgers1d,
    "flame1d": _flame1d,
    "euler2d": _euler2d,
}


def builtin_problems() -> dict[str, Callable[[], ModelSpec]]:
    """Factories for every named problem; call one to get a fresh ModelSpec."""
    return dict(_FACTORIES)


def get_problem(name: str, overrides: dict | None = None) -> ModelSpec:
    """Build a named problem; ``overrides`` maps parameter names to new values.

    Accepted keys are the factory's keyword arguments (``speed`` for
    advection, ``Ze``/``tau`` for the flame, ``gamma`` for Euler).
    """
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise UnknownProblemError(f"unknown problem {name!r}; choose from {sorted(_FACTORIES)}") from None
    overrides = dict(overrides or {})
    allowed = set(inspect.signature(factory).parameters)
    unknown = sorted(set(overrides) - allowed)
    if unknown:
        raise ValueError(f"problem {name!r} has no parameter(s) {unknown}; accepted: {sorted(allowed)}")
    return factory(**{k: float(v) for k, v in overrides.items()})
