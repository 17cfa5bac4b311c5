"""Cell-average multiresolution: projection, prediction, details, remeshing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tree_mesh import (
    BoundarySpec,
    GradedTree,
    NodeKind,
    apply_kinds,
    build_kinds,
    dilate,
    pad_with_ghosts,
)

# rows: child 0 / child 1; columns: uncle offsets -1, 0, +1
PREDICTION_WEIGHTS = np.array([[1.0 / 8.0, 1.0, -1.0 / 8.0], [-1.0 / 8.0, 1.0, 1.0 / 8.0]])
_REAL = (NodeKind.LEAF, NodeKind.INTERNAL)


@dataclass(frozen=True)
class ThresholdPolicy:
    epsilon: float
    scale: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be nonnegative")

    def significant(self, details: np.ndarray) -> np.ndarray:
        """``details`` has shape (ncomp, nchildren, n); returns a flag per n."""
        if self.epsilon == 0:
            return np.ones(details.shape[-1], dtype=bool)
        mag = np.abs(details)
        if self.scale is not None:
            mag = mag / np.asarray(self.scale, dtype=float).reshape(-1, 1, 1)
        return mag.max(axis=(0, 1)) > self.epsilon


def project(children) -> np.ndarray:
    """Mean of the children along the first axis."""
    return np.mean(np.asarray(children, dtype=float), axis=0)


def predict(stencil) -> np.ndarray:
    """Children predicted from a ``(3,)*d`` stencil (optionally with trailing components).

    Output has shape ``(2,)*d`` (plus components); index ``[a0, a1, ...]``
    selects the child with offset ``a_i`` along axis ``i``.
    """
    s = np.asarray(stencil, dtype=float)
    d = next(i for i, n in enumerate(s.shape + (0,)) if n != 3)
    for axis in range(d):
        s = np.moveaxis(np.tensordot(PREDICTION_WEIGHTS, s, axes=([1], [axis])), 0, axis)
    return s


def detail(actual_child, predicted_child) -> np.ndarray:
    return np.asarray(actual_child, dtype=float) - np.asarray(predicted_child, dtype=float)


def predict_children(stencil_values: np.ndarray, d: int) -> np.ndarray:
    """Batched prediction.

    ``stencil_values`` is ``(ncomp, 3^d * n)`` as produced by
    ``GradedTree.stencil_gather``; the result is ``(ncomp, 2^d, n)`` with
    children ordered like ``GradedTree.children_flat``.
    """
    ncomp = stencil_values.shape[0]
    n = stencil_values.shape[1] // 3**d
    s = stencil_values.reshape((ncomp,) + (3,) * d + (n,))
    for axis in range(d):
        s = np.moveaxis(np.tensordot(PREDICTION_WEIGHTS, s, axes=([1], [axis + 1])), 0, axis + 1)
    return s.reshape(ncomp, 2**d, n)


def predict_dense(coarse: np.ndarray, boundary: BoundarySpec) -> np.ndarray:
    """Predict a full ``(ncomp, n, n, ...)`` level onto the next finer level."""
    d = coarse.ndim - 1
    s = pad_with_ghosts(coarse, boundary)
    for axis in range(d):
        ax = axis + 1
        n = s.shape[ax] - 2
        left = np.take(s, range(0, n), axis=ax)
        mid = np.take(s, range(1, n + 1), axis=ax)
        right = np.take(s, range(2, n + 2), axis=ax)
        slope = (right - left) / 8.0
        pair = np.stack([mid - slope, mid + slope], axis=ax + 1)
        shp = list(mid.shape)
        shp[ax] = 2 * n
        s = pair.reshape(shp)
        # strip ghosts of later axes only after they are consumed
    return s


def project_dense(fine: np.ndarray) -> np.ndarray:
    ncomp = fine.shape[0]
    d = fine.ndim - 1
    n = fine.shape[1] // 2
    shp = (ncomp,) + sum(((n, 2) for _ in range(d)), ())
    return fine.reshape(shp).mean(axis=tuple(range(2, 2 * d + 1, 2)))


def _as_components(field: np.ndarray, d: int | None):
    field = np.asarray(field, dtype=float)
    if d is None or field.ndim == d:
        return field[None], True
    return field, False


def mr_transform(fine_field: np.ndarray, boundary: BoundarySpec | None = None, d: int | None = None):
    """Details for levels L..1 (finest first) and the root average.

    ``fine_field`` is either ``(n,)*d`` or ``(ncomp, n, ...)`` when ``d`` is
    given explicitly.
    """
    f = np.asarray(fine_field, dtype=float)
    if d is None:
        d = f.ndim
    cur, scalar = _as_components(f, d)
    boundary = boundary or BoundarySpec.uniform(d, "neumann")
    details = []
    while cur.shape[1] > 1:
        coarse = project_dense(cur)
        details.append(cur - predict_dense(coarse, boundary))
        cur = coarse
    if scalar:
        return [x[0] for x in details], cur[0].reshape(())
    return details, cur.reshape(cur.shape[0])


def inverse_transform(details, root, boundary: BoundarySpec | None = None, d: int | None = None):
    details = list(details)
    scalar = np.ndim(root) == 0
    if d is None:
        d = np.ndim(details[0]) if scalar else np.ndim(details[0]) - 1
    boundary = boundary or BoundarySpec.uniform(d, "neumann")
    cur = np.asarray(root, dtype=float).reshape((-1,) + (1,) * d)
    for det in reversed(details):
        det = np.asarray(det, dtype=float)
        if scalar:
            det = det[None]
        cur = predict_dense(cur, boundary) + det
    return cur[0] if scalar else cur


# ---------------------------------------------------------------------------
# tree operations


def project_level(tree: GradedTree, k: int, source: np.ndarray, target: np.ndarray) -> None:
    """Internal nodes at ``k`` (in ``target``) = mean of children in ``source``."""
    topo = tree.topology(k)
    if topo.internal.size:
        target[:, topo.internal] = source[:, topo.children].mean(axis=1)


def project_tree(tree: GradedTree, slot: str, min_level: int = 0) -> None:
    arr = tree.data[slot]
    for k in range(tree.L - 1, min_level - 1, -1):
        project_level(tree, k, arr[k + 1], arr[k])


def update_virtual_leaves(
    tree: GradedTree,
    level: int,
    slot: str = "q_n",
    source: np.ndarray | None = None,
    target: np.ndarray | None = None,
) -> None:
    """Predict the virtual leaves of ``level`` from level ``level-1`` values."""
    if level == 0:
        return
    topo = tree.topology(level - 1)
    if topo.vparents is None or topo.vparents.size == 0:
        return
    src = tree.data[slot][level - 1] if source is None else source
    dst = tree.data[slot][level] if target is None else target
    pred = predict_children(topo.vstencil(src), tree.d)
    ch = topo.vchildren
    for j in range(ch.shape[0]):
        dst[:, ch[j]] = pred[:, j]


def predict_virtuals(tree: GradedTree, slot: str, min_level: int = 1) -> None:
    for k in range(max(min_level, 1), tree.L + 1):
        update_virtual_leaves(tree, k, slot)


def compute_details(tree: GradedTree, k: int, slot: str) -> np.ndarray:
    """Details of the children of the internal nodes at ``k``: (ncomp, 2^d, n)."""
    topo = tree.topology(k)
    vals = tree.data[slot]
    st = tree.stencil_gather(k, topo.internal)
    pred = predict_children(st(vals[k]), tree.d)
    det = vals[k + 1][:, topo.children] - pred
    dst = tree.data["detail"][k + 1]
    for j in range(topo.children.shape[0]):
        dst[:, topo.children[j]] = det[:, j]
    return det


def adapt_grid(
    tree: GradedTree,
    policy: ThresholdPolicy,
    slot: str = "q_n",
    min_level: int = 0,
) -> bool:
    """Threshold details and rebuild a graded tree; returns True on change.

    Only nodes at levels >= ``min_level`` may change status, which is what
    the local time-stepping restriction needs.  A node is kept refined when
    any child detail is significant or when its own detail is; its
    same-level neighbors are refined as a safety layer.
    """
    L = tree.L
    project_tree(tree, slot, min_level)
    old = tree.masks()
    keep = [np.zeros(tree.size(k), dtype=bool) for k in range(L + 1)]
    for k in range(min_level, L):
        topo = tree.topology(k)
        if not topo.internal.size:
            continue
        det = compute_details(tree, k, slot)
        keep[k][topo.internal] |= policy.significant(det)
        if k + 1 < L:
            # a cell with a significant detail of its own gets (or keeps)
            # children; otherwise a freshly refined cell, whose predicted
            # children carry no detail, would be coarsened again next time
            kids = topo.children
            sig = policy.significant(det.reshape(det.shape[0], 1, -1)).reshape(kids.shape)
            keep[k + 1][kids[sig]] = True
    if 0 < min_level < L:
        # parents of this level are not synchronous with it here, so a
        # cell's own detail is the one stored by the last evaluation
        real = np.isin(tree.kind[min_level], _REAL)
        own = tree.data["detail"][min_level]
        keep[min_level] |= real & policy.significant(own.reshape(own.shape[0], 1, -1))
    desired = []
    for k in range(L + 1):
        if k < min_level or k == L:
            desired.append(old[k] == NodeKind.INTERNAL)
        else:
            desired.append(dilate(keep[k].reshape(tree.shape(k)), tree.boundary))
    kinds = build_kinds(tree, desired, min_level, old)
    changed = apply_kinds(tree, kinds, slots=(slot,))
    if changed:
        for k in range(1, L + 1):
            # new cells hold exact predictions: zero detail
            born = np.isin(tree.kind[k], _REAL) & ~np.isin(old[k].reshape(-1), _REAL)
            tree.data["detail"][k][:, born] = 0.0
        for k in range(min_level, L + 1):
            leaves = tree.topology(k).leaves
            if slot != "q_new":
                tree.data["q_new"][k][:, leaves] = tree.data[slot][k][:, leaves]
    return changed


def build_adaptive_tree(
    fine: np.ndarray,
    max_level: int,
    policy: ThresholdPolicy,
    bounds=None,
    boundary: BoundarySpec | None = None,
) -> GradedTree:
    """Adaptive tree from uniform finest-level averages ``(ncomp, n, ...)``."""
    from .tree_mesh import uniform_tree

    ncomp = fine.shape[0]
    d = fine.ndim - 1
    tree = uniform_tree(d, max_level, ncomp, bounds, boundary)
    tree.data["q_n"][max_level][:] = fine.reshape(ncomp, -1)
    adapt_grid(tree, policy, "q_n")
    project_tree(tree, "q_n")
    for k in range(max_level + 1):
        tree.data["q_new"][k][:] = tree.data["q_n"][k]
    predict_virtuals(tree, "q_n")
    predict_virtuals(tree, "q_new")
    return tree


def threshold_reconstruct(fine: np.ndarray, epsilon: float, boundary: BoundarySpec | None = None, d: int | None = None):
    """Zero all details with magnitude <= epsilon and reconstruct."""
    details, root = mr_transform(fine, boundary, d)
    kept = [np.where(np.abs(x) > epsilon, x, 0.0) for x in details]
    return inverse_transform(kept, root, boundary, d)
