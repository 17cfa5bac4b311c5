"""Local time-stepping: level-wise steps, synchronization, restricted remeshing.

Level ``k`` advances with ``2**(L-k) * dt``.  Iteration ``n`` of a cycle
moves every level ``>= min_active_level(n)``; coarser levels are halfway
through a step and expose intermediate values (NERK slots) to the finer
levels that need them.

Slot roles during an iteration:

``q_n``                start of the level's current step
``q_star``             Euler predictor (leaves) / value at ``t + dt_k`` (nodes)
``q_dstar``            RK3 second stage, a ``t + dt_k/2`` value
``nerk_half``          ``t + dt_k/2``
``nerk_quarter``       ``t + dt_k/4``
``nerk_threequarter``  ``t + 3 dt_k/4``
``q_new``              end of the level's step
``flux_acc``           second-stage right-hand side of the leaves
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import time_schemes as ts
from .models import ModelSpec
from .mr_analysis import ThresholdPolicy, adapt_grid, update_virtual_leaves
from .stepping import SimulationResult, check_leaves, level_rhs
from .time_schemes import SchemeKind
from .tree_mesh import GradedTree, leaf_statistics


class ClockError(RuntimeError):
    """A level was read at a time instant it does not hold."""


# ---------------------------------------------------------------------------
# scalar helpers


def level_timestep(level: int, L: int, dt):
    if not 0 <= level <= L:
        raise ValueError("level out of range")
    return 2 ** (L - level) * dt


def min_active_level(n: int, L: int) -> int:
    if n < 0:
        raise ValueError("iteration counter must be nonnegative")
    for level in range(L + 1):
        if n % 2 ** (L - level) == 0:
            return level
    return L


@dataclass
class LtClock:
    dt: float
    max_level: int
    coarse_level: int = 0
    n: int = 0

    @property
    def cycle_length(self) -> int:
        return 2 ** (self.max_level - self.coarse_level)

    @property
    def l_min(self) -> int:
        return max(self.coarse_level, min_active_level(self.n, self.max_level))


# synchronization formulas; all exact on constants and on data linear in time


def project_mean(children):
    return sum(children) / len(children)


def extrapolate_leaf(q_star, f2, dt):
    """``q_n + k1 + k2`` written as ``q* + dt f(q*)``."""
    return q_star + dt * f2


def extrapolate_node(q_n, q_mid):
    """Value at ``t + dt`` from the start value and the ``t + dt/2`` value."""
    return 2 * q_mid - q_n


def proj_rk3_threequarter(q_n, q_star, q_quarter):
    return (-13 * q_n - 3 * q_star + 18 * q_quarter) / 2


def proj_rk3_dstar(q_n, q_star, q_quarter):
    return (-11 * q_n - 3 * q_star + 16 * q_quarter) / 2


def quarter_from_dstar(q_n, q_star, q_dstar):
    """Inverse of :func:`proj_rk3_dstar`."""
    return (2 * q_dstar + 11 * q_n + 3 * q_star) / 16


def rk3_proj_end(q_n, q_quarter, q_threequarter):
    return q_n + 2 * (q_threequarter - q_quarter)


def post_evolution(q_n, q_star, q_half):
    return -2 * q_n - q_star + 4 * q_half


# ---------------------------------------------------------------------------


class LtStepper:
    """Runs local time-stepping cycles on one tree."""

    def __init__(
        self,
        tree: GradedTree,
        model: ModelSpec,
        scheme: SchemeKind,
        policy: ThresholdPolicy | None,
        sigma: float = 0.5,
    ):
        if not scheme.local_time_stepping:
            raise ValueError(f"{scheme.value} is not a local time-stepping scheme")
        self.tree = tree
        self.model = model
        self.scheme = scheme
        self.policy = policy
        self.sigma = sigma
        self.clock = LtClock(0.0, tree.L)
        self.nerk = scheme is not SchemeKind.MRLT_RK2
        self.rk3 = scheme.order == 3
        self.D = tree.data

    # -- small utilities --------------------------------------------------
    def dtk(self, k: int) -> float:
        return level_timestep(k, self.tree.L, self.clock.dt)

    def _topo(self, k):
        return self.tree.topology(k)

    def _mean_children(self, k: int, src: np.ndarray) -> np.ndarray:
        return src[:, self._topo(k).children].mean(axis=1)

    def _predict_virtual(self, k: int, source: np.ndarray, target: np.ndarray) -> None:
        update_virtual_leaves(self.tree, k, source=source, target=target)

    def _virtual(self, k: int) -> np.ndarray:
        return self._topo(k).virtual

    # -- iteration pieces ----------------------------------------------------
    def refresh_before_stage1(self, n: int) -> tuple[int, bool]:
        """Start-of-iteration values on all active levels; returns (lo, cross)."""
        tree, D, L = self.tree, self.D, self.tree.L
        lo = 0 if n == 0 else self.clock.l_min
        for k in range(lo, L + 1):
            lv = self._topo(k).leaves
            D["q_n"][k][:, lv] = D["q_new"][k][:, lv]
            tree.clock[k] = n
        for k in range(L - 1, lo - 1, -1):
            it = self._topo(k).internal
            if it.size:
                D["q_n"][k][:, it] = self._mean_children(k, D["q_n"][k + 1])
        cross = n > 0 and lo > self.clock.coarse_level
        if cross:
            self.post_evolution_sync(lo, n)
        return lo, cross

    def post_evolution_sync(self, lo: int, n: int) -> None:
        """Level ``lo-1`` is mid-step: fill its half-step and end values.

        Then predict the virtual leaves of ``lo`` from the half-step values.
        """
        tree, D, L = self.tree, self.D, self.tree.L
        j = lo - 1
        expected = n - 2 ** (L - lo)
        if tree.clock[j] != expected:
            raise ClockError(f"level {j} holds iteration {tree.clock[j]}, expected {expected}")
        mid = D["q_dstar"] if self.rk3 else D["nerk_half"]
        topo = self._topo(j)
        if topo.internal.size:
            it = topo.internal
            mid[j][:, it] = self._mean_children(j, D["q_n"][j + 1])
            D["q_new"][j][:, it] = post_evolution(D["q_n"][j][:, it], D["q_star"][j][:, it], mid[j][:, it])
        vt = topo.virtual
        if vt.size:
            D["q_new"][j][:, vt] = post_evolution(D["q_n"][j][:, vt], D["q_star"][j][:, vt], mid[j][:, vt])
        self._predict_virtual(lo, mid[j], D["q_n"][lo])

    def predict_fine_virtuals(self, lo: int, slot: str = "q_n") -> None:
        arr = self.D[slot]
        for k in range(lo + 1, self.tree.L + 1):
            self._predict_virtual(k, arr[k - 1], arr[k])

    def lt_remesh(self, n: int, lo: int) -> bool:
        if self.policy is None:
            return False
        if n == 0:
            return adapt_grid(self.tree, self.policy, "q_n", 0)
        if lo >= self.tree.L:
            return False
        return adapt_grid(self.tree, self.policy, "q_n", lo)

    def stage1(self, lo: int) -> None:
        D, L = self.D, self.tree.L
        for k in range(lo, L + 1):
            lv = self._topo(k).leaves
            if not lv.size:
                continue
            dt = self.dtk(k)
            f1 = level_rhs(self.tree, self.model, k, D["q_n"][k], D["q_n"][k + 1] if k < L else None, dt)
            qn = D["q_n"][k][:, lv]
            D["q_star"][k][:, lv] = ts.rk_stage1(qn, f1, dt)
            if self.rk3:
                D["nerk_quarter"][k][:, lv] = ts.nerk_first_substep(qn, f1, dt, 0.25)
                D["nerk_threequarter"][k][:, lv] = ts.nerk_first_substep(qn, f1, dt, 0.75)
            elif self.nerk:
                D["nerk_half"][k][:, lv] = ts.nerk_first_substep(qn, f1, dt, 0.5)
            else:
                # plain RK2 has no dense output: the coarse leaf stands in for
                # its midpoint with the start-of-step value (first order)
                D["nerk_half"][k][:, lv] = qn

    def refresh_before_stage2(self, lo: int, cross: bool) -> None:
        D, L, S = self.D, self.tree.L, self.tree.scratch
        for k in range(L - 1, lo - 1, -1):
            it = self._topo(k).internal
            if it.size:
                h = self._mean_children(k, D["q_star"][k + 1])
                D["nerk_half"][k][:, it] = h
                D["q_star"][k][:, it] = extrapolate_node(D["q_n"][k][:, it], h)
        for k in range(lo, L + 1):
            vt = self._virtual(k)
            if k == lo:
                if cross:
                    self._predict_virtual(k, D["q_new"][k - 1], D["q_star"][k])
                elif vt.size:
                    raise ClockError(f"virtual leaves at level {k} without an active parent level")
            else:
                topo = self._topo(k - 1)
                src = S[k - 1]
                lv = topo.leaves
                src[:, lv] = 0.5 * (D["q_n"][k - 1][:, lv] + D["q_star"][k - 1][:, lv])
                for idx in (topo.internal, topo.virtual):
                    src[:, idx] = D["nerk_half"][k - 1][:, idx]
                self._predict_virtual(k, src, D["q_star"][k])
            if vt.size:
                D["nerk_half"][k][:, vt] = 0.5 * (D["q_n"][k][:, vt] + D["q_star"][k][:, vt])

    def stage2_projection(self, k: int) -> None:
        """Level ``k+1`` values at ``t + dt_k`` into scratch; node ``q_star`` at ``k``."""
        D, S = self.D, self.tree.scratch
        fine = self._topo(k + 1)
        dtf = self.dtk(k + 1)
        lv = fine.leaves
        S[k + 1][:, lv] = extrapolate_leaf(D["q_star"][k + 1][:, lv], D["flux_acc"][k + 1][:, lv], dtf)
        it = fine.internal
        S[k + 1][:, it] = extrapolate_node(D["q_n"][k + 1][:, it], D["q_star"][k + 1][:, it])
        own = self._topo(k).internal
        if own.size:
            D["q_star"][k][:, own] = self._mean_children(k, S[k + 1])
        self._predict_virtual(k + 1, D["q_star"][k], S[k + 1])

    def perform_stage2(self, lo: int) -> None:
        D, L, S = self.D, self.tree.L, self.tree.scratch
        for k in range(L, lo - 1, -1):
            if k != L:
                self.stage2_projection(k)
            lv = self._topo(k).leaves
            if not lv.size:
                continue
            dt = self.dtk(k)
            f2 = level_rhs(self.tree, self.model, k, D["q_star"][k], S[k + 1] if k < L else None, dt)
            D["flux_acc"][k][:, lv] = f2
            qn = D["q_n"][k][:, lv]
            qs = D["q_star"][k][:, lv]
            if self.rk3:
                D["q_dstar"][k][:, lv] = ts.rk3_stage2(qn, qs, f2, dt)
                for slot, theta in (("nerk_quarter", 0.25), ("nerk_threequarter", 0.75)):
                    D[slot][k][:, lv] = ts.nerk_second_substep(D[slot][k][:, lv], f2, dt, theta)
            else:
                D["q_new"][k][:, lv] = ts.rk2_stage2(qn, qs, f2, dt)
                if self.nerk:
                    D["nerk_half"][k][:, lv] = ts.nerk_second_substep(D["nerk_half"][k][:, lv], f2, dt, 0.5)

    def refresh_before_stage3(self, lo: int, cross: bool) -> None:
        D, L = self.D, self.tree.L
        for k in range(L - 1, lo - 1, -1):
            it = self._topo(k).internal
            if not it.size:
                continue
            qa = self._mean_children(k, D["q_dstar"][k + 1])
            qn = D["q_n"][k][:, it]
            qs = D["q_star"][k][:, it]
            D["nerk_quarter"][k][:, it] = qa
            D["nerk_threequarter"][k][:, it] = proj_rk3_threequarter(qn, qs, qa)
            D["q_dstar"][k][:, it] = proj_rk3_dstar(qn, qs, qa)
        for k in range(lo, L + 1):
            vt = self._virtual(k)
            if k == lo:
                if not cross:
                    continue
                self._predict_virtual(k, D["nerk_threequarter"][k - 1], D["q_dstar"][k])
            else:
                self._predict_virtual(k, D["nerk_quarter"][k - 1], D["q_dstar"][k])
            if vt.size:
                qn = D["q_n"][k][:, vt]
                qs = D["q_star"][k][:, vt]
                qa = quarter_from_dstar(qn, qs, D["q_dstar"][k][:, vt])
                D["nerk_quarter"][k][:, vt] = qa
                D["nerk_threequarter"][k][:, vt] = proj_rk3_threequarter(qn, qs, qa)

    def stage3_projection(self, k: int) -> None:
        D, S = self.D, self.tree.scratch
        fine = self._topo(k + 1)
        for idx in (fine.leaves, fine.internal):
            S[k + 1][:, idx] = D["q_new"][k + 1][:, idx]
        it = self._topo(k).internal
        if it.size:
            D["q_dstar"][k][:, it] = self._mean_children(k, S[k + 1])
            D["q_new"][k][:, it] = rk3_proj_end(
                D["q_n"][k][:, it], D["nerk_quarter"][k][:, it], D["nerk_threequarter"][k][:, it]
            )
        self._predict_virtual(k + 1, D["q_dstar"][k], S[k + 1])

    def perform_stage3(self, lo: int) -> None:
        D, L, S = self.D, self.tree.L, self.tree.scratch
        for k in range(L, lo - 1, -1):
            if k != L:
                self.stage3_projection(k)
            lv = self._topo(k).leaves
            if not lv.size:
                continue
            dt = self.dtk(k)
            f3 = level_rhs(self.tree, self.model, k, D["q_dstar"][k], S[k + 1] if k < L else None, dt)
            D["q_new"][k][:, lv] = ts.rk3_stage3(D["q_n"][k][:, lv], D["q_dstar"][k][:, lv], f3, dt)

    # -- driver ------------------------------------------------------------------
    def iteration(self, n: int) -> None:
        self.clock.n = n
        lo, cross = self.refresh_before_stage1(n)
        if n > 0:
            if self.lt_remesh(n, lo):
                self._after_remesh(lo, cross)
        self.predict_fine_virtuals(lo)
        self.stage1(lo)
        self.refresh_before_stage2(lo, cross)
        self.perform_stage2(lo)
        if self.rk3:
            self.refresh_before_stage3(lo, cross)
            self.perform_stage3(lo)
        check_leaves(self.tree, self.model)

    def _after_remesh(self, lo: int, cross: bool) -> None:
        # newly created cells inherit start-of-step values; nothing else moves
        for k in range(lo, self.tree.L + 1):
            self.tree.clock[k] = self.clock.n

    def start_cycle(self, dt_max: float, dt_fixed: float | None = None) -> int:
        """Synchronize, remesh freely and pick ``dt``; returns the cycle length."""
        tree, D = self.tree, self.D
        self.clock.n = 0
        for k in range(tree.L + 1):
            lv = self._topo(k).leaves
            D["q_n"][k][:, lv] = D["q_new"][k][:, lv]
        for k in range(tree.L - 1, -1, -1):
            it = self._topo(k).internal
            if it.size:
                D["q_n"][k][:, it] = self._mean_children(k, D["q_n"][k + 1])
        if self.model.begin_cycle is not None:
            self.model.begin_cycle(tree, "q_n")
        self.lt_remesh(0, 0)
        for k in range(tree.L + 1):
            lv = self._topo(k).leaves
            D["q_new"][k][:, lv] = D["q_n"][k][:, lv]
        self.clock.coarse_level = tree.coarsest_leaf_level()
        m = self.clock.cycle_length
        if dt_fixed is not None:
            dt = dt_fixed
        else:
            dt = ts.cfl_timestep(self.model, tree, self.sigma, slot="q_n")
        self.clock.dt = min(dt, dt_max / m)
        return m

    def lt_cycle(self, dt_max: float = math.inf, dt_fixed: float | None = None) -> float:
        """One coarsest-level cycle; returns the time advanced."""
        m = self.start_cycle(dt_max, dt_fixed)
        for n in range(m):
            self.iteration(n)
        return m * self.clock.dt


def run_lt(
    model: ModelSpec,
    scheme: SchemeKind,
    tree: GradedTree,
    sigma: float,
    tend: float,
    epsilon: float | None,
    dt_fixed: float | None = None,
    on_cycle: Callable | None = None,
) -> SimulationResult:
    """Run to ``tend``; ``epsilon=None`` freezes the grid."""
    policy = None if epsilon is None else ThresholdPolicy(epsilon, model.threshold_scale)
    stepper = LtStepper(tree, model, scheme, policy, sigma)
    t, fine_steps, cycles = 0.0, 0, 0
    percents, counts, times = [], [], []
    total = int(round(tend / dt_fixed)) if dt_fixed is not None else None
    start = time.perf_counter()
    while True:
        if total is not None:
            remaining = total - fine_steps
            if remaining <= 0:
                break
            m = stepper.start_cycle(math.inf, dt_fixed)
            if remaining < m:
                stepper.clock.dt = dt_fixed * remaining / m
                fine_steps = total
            else:
                fine_steps += m
        else:
            if t >= tend * (1 - 1e-14):
                break
            m = stepper.start_cycle(tend - t)
            fine_steps += m
        for n in range(m):
            stepper.iteration(n)
        t += m * stepper.clock.dt
        cycles += 1
        nl, _, pct = leaf_statistics(tree)
        percents.append(pct)
        counts.append(nl)
        times.append(t)
        if on_cycle is not None:
            on_cycle(cycles, t, tree)
    if total is not None:
        t = total * dt_fixed
    wall = time.perf_counter() - start
    return SimulationResult(scheme, tree.L, t, fine_steps, wall, tree.to_uniform("q_new"), tree, percents, counts, times)

