"""Spatial operator on the tree, global MR stepping, uniform FV, run driver."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import time_schemes as ts
from .mr_analysis import (
    ThresholdPolicy,
    adapt_grid,
    build_adaptive_tree,
    predict_virtuals,
    project_tree,
)
from .models import ModelSpec
from .time_schemes import SchemeKind
from .tree_mesh import GradedTree, leaf_statistics, pad_with_ghosts, uniform_tree

_GAUSS = (
    (-math.sqrt(3.0 / 5.0), 5.0 / 18.0),
    (0.0, 8.0 / 18.0),
    (math.sqrt(3.0 / 5.0), 5.0 / 18.0),
)


# ---------------------------------------------------------------------------
# initial data


def cell_averages(model: ModelSpec, level: int) -> np.ndarray:
    """Three-point Gauss averages of the initial condition on a uniform level."""
    n = 2**level
    dx = [(b - a) / n for a, b in model.bounds]
    centers = [model.bounds[a][0] + (np.arange(n) + 0.5) * dx[a] for a in range(model.d)]
    grids = np.meshgrid(*centers, indexing="ij")
    total = np.zeros((model.ncomp,) + (n,) * model.d)
    for combo in np.ndindex(*(3,) * model.d):
        w = 1.0
        pts = []
        for a, j in enumerate(combo):
            off, wj = _GAUSS[j]
            w *= wj
            pts.append(grids[a] + 0.5 * off * dx[a])
        total += w * np.asarray(model.initial_condition(np.stack(pts)), dtype=float)
    return total


def initial_tree(model: ModelSpec, max_level: int, epsilon: float) -> GradedTree:
    fine = cell_averages(model, max_level)
    policy = ThresholdPolicy(epsilon, model.threshold_scale)
    return build_adaptive_tree(fine, max_level, policy, model.bounds, model.boundary)


# ---------------------------------------------------------------------------
# spatial operator


def level_rhs(
    tree: GradedTree,
    model: ModelSpec,
    k: int,
    Vk: np.ndarray,
    Vk1: np.ndarray | None,
    dt: float,
) -> np.ndarray:
    """Right-hand side for the leaves of level ``k``.

    ``Vk`` holds level-``k`` values for leaves and their same-level
    neighbors; ``Vk1`` holds level ``k+1`` values for the virtual children
    and for children of internal neighbors.
    """
    topo = tree.topology(k)
    leaves = topo.leaves
    q = Vk[:, leaves]
    rhs = np.zeros_like(q)
    if not leaves.size:
        return rhs
    dxs = tree.dx(k)
    flux = model.numerical_flux
    for axis, fs in enumerate(tree.faces(k)):
        dx = float(dxs[axis])
        Fp = flux(q, fs.plus(Vk), axis, dx, dt)
        pos, left, right = fs.fine_plus
        if pos.size:
            Fp[:, pos] = _fine_face_flux(flux, Vk1, left, right, axis, 0.5 * dx, dt)
        Fm = np.empty_like(Fp)
        Fm[:, fs.minus_same] = Fp[:, fs.minus_from]
        if fs.minus_other.size:
            Fm[:, fs.minus_other] = flux(fs.minus_gather(Vk), q[:, fs.minus_other], axis, dx, dt)
        pos, left, right = fs.fine_minus
        if pos.size:
            Fm[:, pos] = _fine_face_flux(flux, Vk1, left, right, axis, 0.5 * dx, dt)
        rhs -= (Fp - Fm) / dx
    if model.source is not None:
        rhs += model.source(q)
    return rhs


def _fine_face_flux(flux, Vk1, left, right, axis, dx, dt):
    m, n = left.shape
    F = flux(Vk1[:, left.reshape(-1)], Vk1[:, right.reshape(-1)], axis, dx, dt)
    return F.reshape(F.shape[0], m, n).mean(axis=1)


def refresh_slot(tree: GradedTree, slot: str) -> None:
    """Project internal nodes and predict virtual leaves for one slot."""
    project_tree(tree, slot)
    predict_virtuals(tree, slot)


def tree_rhs(tree: GradedTree, model: ModelSpec, slot: str, dt: float) -> list[np.ndarray | None]:
    arr = tree.data[slot]
    out = []
    for k in range(tree.L + 1):
        if tree.topology(k).leaves.size:
            out.append(level_rhs(tree, model, k, arr[k], arr[k + 1] if k < tree.L else None, dt))
        else:
            out.append(None)
    return out


def _leafwise(tree: GradedTree, fn: Callable, *slots_and_rhs, out: str):
    for k in range(tree.L + 1):
        leaves = tree.topology(k).leaves
        if not leaves.size:
            continue
        args = []
        for s in slots_and_rhs:
            args.append(s[k] if isinstance(s, list) else tree.data[s][k][:, leaves])
        tree.data[out][k][:, leaves] = fn(*args)


def check_leaves(tree: GradedTree, model: ModelSpec, slot: str = "q_new") -> None:
    for k in range(tree.L + 1):
        leaves = tree.topology(k).leaves
        if leaves.size:
            model.check(tree.data[slot][k][:, leaves])


def mr_step(
    tree: GradedTree,
    model: ModelSpec,
    scheme: SchemeKind,
    policy: ThresholdPolicy | None,
    sigma: float,
    dt_max: float,
    dt_fixed: float | None = None,
) -> float:
    """One global step of the adaptive scheme; returns the step taken."""
    for k in range(tree.L + 1):
        tree.data["q_n"][k][:] = tree.data["q_new"][k]
    if model.begin_cycle is not None:
        model.begin_cycle(tree, "q_n")
    if policy is not None:
        adapt_grid(tree, policy, "q_n")
    if dt_fixed is not None:
        dt = dt_fixed
    else:
        dt = min(ts.cfl_timestep(model, tree, sigma, slot="q_n"), dt_max)
    dt = min(dt, dt_max)
    refresh_slot(tree, "q_n")
    f1 = tree_rhs(tree, model, "q_n", dt)
    _leafwise(tree, lambda qn, f: ts.rk_stage1(qn, f, dt), "q_n", f1, out="q_star")
    refresh_slot(tree, "q_star")
    f2 = tree_rhs(tree, model, "q_star", dt)
    if scheme.order == 2:
        _leafwise(tree, lambda qn, qs, f: ts.rk2_stage2(qn, qs, f, dt), "q_n", "q_star", f2, out="q_new")
    else:
        _leafwise(tree, lambda qn, qs, f: ts.rk3_stage2(qn, qs, f, dt), "q_n", "q_star", f2, out="q_dstar")
        refresh_slot(tree, "q_dstar")
        f3 = tree_rhs(tree, model, "q_dstar", dt)
        _leafwise(tree, lambda qn, qss, f: ts.rk3_stage3(qn, qss, f, dt), "q_n", "q_dstar", f3, out="q_new")
    check_leaves(tree, model)
    return dt


# ---------------------------------------------------------------------------
# uniform finite volumes


def uniform_rhs(model: ModelSpec, q: np.ndarray, dx: np.ndarray, dt: float) -> np.ndarray:
    d = model.d
    padded = pad_with_ghosts(q, model.boundary)
    rhs = np.zeros_like(q)
    for axis in range(d):
        ax = axis + 1
        core = [slice(None)] + [slice(1, -1)] * d
        core[ax] = slice(None)
        strip = padded[tuple(core)]
        n = q.shape[ax]
        qL = np.take(strip, range(0, n + 1), axis=ax)
        qR = np.take(strip, range(1, n + 2), axis=ax)
        F = model.numerical_flux(qL, qR, axis, float(dx[axis]), dt)
        Fp = np.take(F, range(1, n + 1), axis=ax)
        Fm = np.take(F, range(0, n), axis=ax)
        rhs -= (Fp - Fm) / float(dx[axis])
    if model.source is not None:
        rhs += model.source(q)
    return rhs


def uniform_step(model: ModelSpec, q: np.ndarray, dx: np.ndarray, dt: float, order: int) -> np.ndarray:
    f1 = uniform_rhs(model, q, dx, dt)
    qs = ts.rk_stage1(q, f1, dt)
    f2 = uniform_rhs(model, qs, dx, dt)
    if order == 2:
        out = ts.rk2_stage2(q, qs, f2, dt)
    else:
        qss = ts.rk3_stage2(q, qs, f2, dt)
        f3 = uniform_rhs(model, qss, dx, dt)
        out = ts.rk3_stage3(q, qss, f3, dt)
    model.check(out.reshape(model.ncomp, -1))
    return out


class _UniformView:
    """Just enough of the tree interface for ``begin_cycle`` hooks."""

    def __init__(self, q: np.ndarray, level: int, bounds):
        self.L = 0
        self._q = q.reshape(q.shape[0], -1)
        self._dx = np.array([(b - a) / 2**level for a, b in bounds])

    class _Topo:
        def __init__(self, n):
            self.leaves = np.arange(n)

    def topology(self, k):
        return self._Topo(self._q.shape[1])

    def dx(self, k):
        return self._dx

    @property
    def data(self):
        return {"q_new": [self._q], "q_n": [self._q]}


# ---------------------------------------------------------------------------
# run driver


@dataclass
class SimulationResult:
    scheme: SchemeKind
    max_level: int
    time: float
    steps: int
    wall_time: float
    uniform: np.ndarray
    tree: GradedTree | None = None
    leaf_percent: list[float] = field(default_factory=list)
    leaf_count: list[int] = field(default_factory=list)
    times: list[float] = field(default_factory=list)

    @property
    def mean_compression(self) -> float:
        return float(np.mean(self.leaf_percent)) if self.leaf_percent else 100.0

    @property
    def final_compression(self) -> float:
        return self.leaf_percent[-1] if self.leaf_percent else 100.0


def _n_steps(tend: float, dt: float) -> int:
    return max(1, int(round(tend / dt)))


def run_uniform(
    model: ModelSpec,
    order: int,
    level: int,
    sigma: float,
    tend: float,
    dt_fixed: float | None = None,
    q0: np.ndarray | None = None,
    on_step: Callable | None = None,
) -> SimulationResult:
    q = cell_averages(model, level) if q0 is None else q0.copy()
    dx = np.array([(b - a) / 2**level for a, b in model.bounds])
    t, steps = 0.0, 0
    start = time.perf_counter()
    nfixed = _n_steps(tend, dt_fixed) if dt_fixed is not None else None
    while True:
        if nfixed is not None:
            if steps >= nfixed:
                break
            dt = dt_fixed
        else:
            if t >= tend * (1 - 1e-14):
                break
            if model.begin_cycle is not None:
                model.begin_cycle(_UniformView(q, level, model.bounds))
            speed = model.max_wave_speed(q.reshape(model.ncomp, -1))
            dt = min(ts.timestep_from_speed(speed, float(dx.min()), sigma, model.d, model.nu), tend - t)
        if nfixed is not None and model.begin_cycle is not None:
            model.begin_cycle(_UniformView(q, level, model.bounds))
        q = uniform_step(model, q, dx, dt, order)
        t += dt
        steps += 1
        if on_step is not None:
            on_step(steps, t, q)
    wall = time.perf_counter() - start
    kind = SchemeKind.FV_RK3 if order == 3 else SchemeKind.FV_RK2
    return SimulationResult(kind, level, t, steps, wall, q, None, [100.0], [q[0].size], [t])


def run_mr(
    model: ModelSpec,
    scheme: SchemeKind,
    tree: GradedTree,
    sigma: float,
    tend: float,
    epsilon: float | None,
    dt_fixed: float | None = None,
    on_step: Callable | None = None,
) -> SimulationResult:
    """Global-step adaptive run.  ``epsilon=None`` freezes the grid."""
    policy = None if epsilon is None else ThresholdPolicy(epsilon, model.threshold_scale)
    t, steps = 0.0, 0
    percents, counts, times = [], [], []
    nfixed = _n_steps(tend, dt_fixed) if dt_fixed is not None else None
    start = time.perf_counter()
    while True:
        if nfixed is not None:
            if steps >= nfixed:
                break
            dt = mr_step(tree, model, scheme, policy, sigma, math.inf, dt_fixed)
        else:
            if t >= tend * (1 - 1e-14):
                break
            dt = mr_step(tree, model, scheme, policy, sigma, tend - t)
        t += dt
        steps += 1
        nl, _, pct = leaf_statistics(tree)
        percents.append(pct)
        counts.append(nl)
        times.append(t)
        if on_step is not None:
            on_step(steps, t, tree)
    wall = time.perf_counter() - start
    return SimulationResult(scheme, tree.L, t, steps, wall, tree.to_uniform("q_new"), tree, percents, counts, times)


def two_block_tree(model: ModelSpec, max_level: int) -> GradedTree:
    """Left half at ``max_level``, right half one level coarser (1-D)."""
    if model.d != 1:
        raise ValueError("two-block layout is one-dimensional")
    from .tree_mesh import build_kinds

    L = max_level
    tree = uniform_tree(1, L - 1, model.ncomp, model.bounds, model.boundary, max_level=L)
    desired = [np.zeros(tree.shape(k), dtype=bool) for k in range(L + 1)]
    for k in range(L - 1):
        desired[k][:] = True
    desired[L - 1][: 2 ** (L - 2)] = True
    kinds = build_kinds(tree, desired)
    tree.set_kinds(kinds)
    fine = cell_averages(model, L)
    tree.data["q_new"][L][:] = fine.reshape(model.ncomp, -1)
    project_tree(tree, "q_new")
    for k in range(L + 1):
        tree.data["q_n"][k][:] = tree.data["q_new"][k]
    predict_virtuals(tree, "q_new")
    return tree
