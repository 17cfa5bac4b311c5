"""Dyadic graded tree over a rectangular domain.

Each level ``k`` owns dense arrays of length ``2**(k*d)`` addressed by the
flat (C-order) index of the cell coordinates.  A cell is *present* when its
kind is not ``ABSENT``; the dense layout acts as a perfect hash keyed by
``CellIndex`` so insertions and removals are O(1) flag flips and every level
sweep vectorizes over index arrays.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

SLOTS = (
    "q_n",
    "q_star",
    "q_dstar",
    "nerk_quarter",
    "nerk_half",
    "nerk_threequarter",
    "q_new",
    "detail",
    "flux_acc",
)


class MeshError(Exception):
    """Base class for structural errors of the tree."""


class LevelOverflowError(MeshError):
    pass


class UngradedTreeError(MeshError):
    pass


class MissingStencilError(MeshError):
    pass


class NodeKind(IntEnum):
    ABSENT = 0
    INTERNAL = 1
    LEAF = 2
    VIRTUAL = 3


@dataclass(frozen=True, order=True)
class CellIndex:
    level: int
    coords: tuple[int, ...]

    def __post_init__(self):
        coords = tuple(int(c) for c in self.coords)
        object.__setattr__(self, "coords", coords)
        if not 1 <= len(coords) <= 3:
            raise ValueError(f"dimension must be 1, 2 or 3, got {len(coords)}")
        if self.level < 0:
            raise ValueError("negative level")
        n = 2**self.level
        if any(c < 0 or c >= n for c in coords):
            raise ValueError(f"coords {coords} out of range for level {self.level}")

    @property
    def d(self) -> int:
        return len(self.coords)

    def parent(self) -> "CellIndex":
        if self.level == 0:
            raise MeshError("the root has no parent")
        return CellIndex(self.level - 1, tuple(c // 2 for c in self.coords))


def child_indices(idx: CellIndex, max_level: int | None = None) -> list[CellIndex]:
    """The ``2**d`` children of ``idx``, axis 0 varying fastest."""
    if max_level is not None and idx.level >= max_level:
        raise LevelOverflowError(f"cell at level {idx.level} cannot be split (L={max_level})")
    out = []
    for offs in itertools.product((0, 1), repeat=idx.d):
        offs = offs[::-1]
        out.append(CellIndex(idx.level + 1, tuple(2 * c + o for c, o in zip(idx.coords, offs))))
    return out


# ---------------------------------------------------------------------------
# boundary conditions


@dataclass(frozen=True)
class FaceBC:
    kind: str
    value: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("periodic", "neumann", "dirichlet"):
            raise ValueError(f"unknown boundary kind {self.kind!r}")


@dataclass(frozen=True)
class BoundarySpec:
    """Per-axis (low, high) face conditions."""

    faces: tuple[tuple[FaceBC, FaceBC], ...]

    @classmethod
    def uniform(cls, d: int, kind: str, value: Sequence[float] = ()) -> "BoundarySpec":
        bc = FaceBC(kind, tuple(value))
        return cls(tuple((bc, bc) for _ in range(d)))

    @property
    def d(self) -> int:
        return len(self.faces)

    def periodic(self, axis: int) -> bool:
        return self.faces[axis][0].kind == "periodic"

    def face(self, axis: int, side: int) -> FaceBC:
        return self.faces[axis][0 if side < 0 else 1]


def ghost_value(bc: FaceBC, interior):
    """Ghost average behind a wall given the adjacent interior average."""
    if bc.kind == "neumann":
        return interior
    if bc.kind == "dirichlet":
        g = np.asarray(bc.value, dtype=float)
        if np.ndim(interior) >= 1 and np.ndim(g) == 1 and g.size == np.shape(interior)[0]:
            g = g.reshape((-1,) + (1,) * (np.ndim(interior) - 1))
        return 2.0 * g - interior
    raise ValueError("periodic faces have no ghost")


def pad_with_ghosts(field: np.ndarray, boundary: BoundarySpec) -> np.ndarray:
    """Pad a dense ``(ncomp, n0, n1, ...)`` array by one ghost layer per axis."""
    out = field
    for axis in range(boundary.d):
        ax = axis + 1
        if boundary.periodic(axis):
            out = np.concatenate([np.take(out, [-1], axis=ax), out, np.take(out, [0], axis=ax)], axis=ax)
            continue
        lo = ghost_value(boundary.face(axis, -1), np.take(out, [0], axis=ax))
        hi = ghost_value(boundary.face(axis, +1), np.take(out, [-1], axis=ax))
        out = np.concatenate([lo, out, hi], axis=ax)
    return out


class Gather:
    """Precomputed neighbor lookup returning ghost-corrected values."""

    __slots__ = ("index", "fixes")

    def __init__(self, index: np.ndarray, fixes: list):
        self.index = index
        self.fixes = fixes

    def __call__(self, values: np.ndarray) -> np.ndarray:
        out = values[:, self.index]
        for pos, g in self.fixes:
            out[:, pos] = 2.0 * g - out[:, pos]
        return out


# ---------------------------------------------------------------------------
# dense boolean helpers


def _shift(mask: np.ndarray, axis: int, step: int, periodic: bool, fill: bool) -> np.ndarray:
    """Value of the neighbor at ``+step`` along ``axis`` for every cell."""
    if periodic:
        return np.roll(mask, -step, axis=axis)
    out = np.full_like(mask, fill)
    src = [slice(None)] * mask.ndim
    dst = [slice(None)] * mask.ndim
    if step > 0:
        src[axis] = slice(step, None)
        dst[axis] = slice(None, -step)
    else:
        src[axis] = slice(None, step)
        dst[axis] = slice(-step, None)
    out[tuple(dst)] = mask[tuple(src)]
    return out


def dilate(mask: np.ndarray, boundary: BoundarySpec) -> np.ndarray:
    out = mask
    for axis in range(mask.ndim):
        p = boundary.periodic(axis)
        out = out | _shift(out, axis, 1, p, False) | _shift(out, axis, -1, p, False)
    return out


def erode(mask: np.ndarray, boundary: BoundarySpec) -> np.ndarray:
    out = mask
    for axis in range(mask.ndim):
        p = boundary.periodic(axis)
        out = out & _shift(out, axis, 1, p, True) & _shift(out, axis, -1, p, True)
    return out


def coarsen_any(mask: np.ndarray) -> np.ndarray:
    d = mask.ndim
    n = mask.shape[0] // 2
    return mask.reshape(sum(((n, 2) for _ in range(d)), ())).any(axis=tuple(range(1, 2 * d, 2)))


def coarsen_all(mask: np.ndarray) -> np.ndarray:
    d = mask.ndim
    n = mask.shape[0] // 2
    return mask.reshape(sum(((n, 2) for _ in range(d)), ())).all(axis=tuple(range(1, 2 * d, 2)))


def refine_mask(mask: np.ndarray) -> np.ndarray:
    out = mask
    for axis in range(mask.ndim):
        out = np.repeat(out, 2, axis=axis)
    return out


# ---------------------------------------------------------------------------
# records


@dataclass
class CellRecord:
    kind: NodeKind
    q_n: np.ndarray
    q_star: np.ndarray
    q_dstar: np.ndarray
    nerk_quarter: np.ndarray
    nerk_half: np.ndarray
    nerk_threequarter: np.ndarray
    q_new: np.ndarray
    detail: np.ndarray
    flux_acc: np.ndarray


@dataclass(frozen=True)
class SameLevelLeaf:
    index: CellIndex


@dataclass(frozen=True)
class SameLevelVirtual:
    index: CellIndex


@dataclass(frozen=True)
class FinerViaVirtualChildren:
    indices: tuple[CellIndex, ...]


@dataclass(frozen=True)
class BoundaryFace:
    """Face on a non-periodic wall; the partner is a ghost cell."""

    axis: int
    side: int


FluxPartner = SameLevelLeaf | SameLevelVirtual | FinerViaVirtualChildren | BoundaryFace


@dataclass
class FaceSet:
    """Per-axis flux plumbing for the leaves of one level."""

    plus: Gather
    minus_same: np.ndarray
    minus_from: np.ndarray
    minus_other: np.ndarray
    minus_gather: Gather
    fine_plus: tuple[np.ndarray, np.ndarray, np.ndarray]
    fine_minus: tuple[np.ndarray, np.ndarray, np.ndarray]


@dataclass
class LevelTopology:
    leaves: np.ndarray
    internal: np.ndarray
    virtual: np.ndarray
    leafpos: np.ndarray
    children: np.ndarray | None = None
    vparents: np.ndarray | None = None
    vchildren: np.ndarray | None = None
    vstencil: Gather | None = None
    faces: list[FaceSet] | None = None
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------


class GradedTree:
    """Graded dyadic tree with per-level dense slot storage."""

    def __init__(
        self,
        d: int,
        max_level: int,
        ncomp: int = 1,
        bounds: Sequence[tuple[float, float]] | None = None,
        boundary: BoundarySpec | None = None,
    ):
        if d not in (1, 2, 3):
            raise ValueError("d must be 1, 2 or 3")
        if max_level < 0:
            raise ValueError("max_level must be nonnegative")
        self.d = d
        self.L = max_level
        self.ncomp = ncomp
        self.bounds = tuple(tuple(map(float, b)) for b in (bounds or [(0.0, 1.0)] * d))
        self.boundary = boundary or BoundarySpec.uniform(d, "neumann")
        if self.boundary.d != d:
            raise ValueError("boundary dimension mismatch")
        self.kind = [np.zeros(self.size(k), dtype=np.int8) for k in range(max_level + 1)]
        self.kind[0][0] = NodeKind.LEAF
        self.data = {s: [np.zeros((ncomp, self.size(k))) for k in range(max_level + 1)] for s in SLOTS}
        self.scratch = [np.zeros((ncomp, self.size(k))) for k in range(max_level + 1)]
        self.clock = np.zeros(max_level + 1, dtype=np.int64)
        self._topo: dict[int, LevelTopology] = {}
        self.version = 0
        self._child_offsets = np.array(list(itertools.product((0, 1), repeat=d)), dtype=np.int64)
        self._stencil_offsets = np.array(list(itertools.product((-1, 0, 1), repeat=d)), dtype=np.int64)

    # -- geometry -----------------------------------------------------------
    def size(self, k: int) -> int:
        return 2 ** (k * self.d)

    def shape(self, k: int) -> tuple[int, ...]:
        return (2**k,) * self.d

    def dx(self, k: int) -> np.ndarray:
        return np.array([(b - a) / 2**k for a, b in self.bounds])

    def cell_volume(self, k: int) -> float:
        return float(np.prod(self.dx(k)))

    def flat(self, idx: CellIndex) -> int:
        return int(np.ravel_multi_index(idx.coords, self.shape(idx.level)))

    def cell(self, k: int, flat: int) -> CellIndex:
        return CellIndex(k, tuple(int(c) for c in np.unravel_index(flat, self.shape(k))))

    def centers(self, k: int, flat: np.ndarray) -> np.ndarray:
        coords = np.unravel_index(flat, self.shape(k))
        dx = self.dx(k)
        return np.stack([self.bounds[a][0] + (coords[a] + 0.5) * dx[a] for a in range(self.d)])

    # -- node access --------------------------------------------------------
    def node_kind(self, idx: CellIndex) -> NodeKind:
        if idx.level > self.L:
            return NodeKind.ABSENT
        return NodeKind(int(self.kind[idx.level][self.flat(idx)]))

    def record(self, idx: CellIndex) -> CellRecord:
        k, f = idx.level, self.flat(idx)
        vals = {s: self.data[s][k][:, f].copy() for s in SLOTS}
        return CellRecord(kind=self.node_kind(idx), **vals)

    def set_value(self, idx: CellIndex, slot: str, value) -> None:
        self.data[slot][idx.level][:, self.flat(idx)] = value

    def value(self, idx: CellIndex, slot: str = "q_new") -> np.ndarray:
        return self.data[slot][idx.level][:, self.flat(idx)].copy()

    def same_level_neighbor(self, idx: CellIndex, axis: int, side: int) -> CellIndex | None:
        return same_level_neighbor(idx, axis, side, self.boundary)

    # -- index plumbing -----------------------------------------------------
    def neighbor_flat(self, k: int, flat: np.ndarray, offset: Sequence[int]):
        """Flat neighbor indices with walls folded back onto the boundary cell.

        Returns ``(index, fixes, outside)`` where ``fixes`` lists Dirichlet
        corrections and ``outside`` flags cells whose neighbor is a ghost.
        """
        shape = self.shape(k)
        coords = list(np.unravel_index(flat, shape))
        n = 2**k
        fixes = []
        outside = np.zeros(flat.shape, dtype=bool)
        for a, o in enumerate(offset):
            if o == 0:
                continue
            c = coords[a] + o
            bad = (c < 0) | (c >= n)
            if self.boundary.periodic(a):
                c = c % n
            elif bad.any():
                outside |= bad
                c = np.where(bad, coords[a], c)
                bc = self.boundary.face(a, o)
                if bc.kind == "dirichlet":
                    pos = np.nonzero(bad)[0]
                    fixes.append((pos, np.asarray(bc.value, dtype=float).reshape(-1, 1)))
            coords[a] = c
        return np.ravel_multi_index(tuple(coords), shape), fixes, outside

    def gather(self, k: int, flat: np.ndarray, offset: Sequence[int]) -> Gather:
        index, fixes, _ = self.neighbor_flat(k, flat, offset)
        return Gather(index, fixes)

    def stencil_gather(self, k: int, flat: np.ndarray) -> Gather:
        """Gather of the 3^d neighborhood, laid out as (3^d, n) flattened."""
        idx_parts, fixes = [], []
        n = len(flat)
        for j, off in enumerate(self._stencil_offsets):
            index, fx, _ = self.neighbor_flat(k, flat, off)
            idx_parts.append(index)
            fixes.extend((pos + j * n, g) for pos, g in fx)
        index = np.concatenate(idx_parts) if idx_parts else np.zeros(0, dtype=np.int64)
        return Gather(index, _merge_fixes(fixes))

    def children_flat(self, k: int, flat: np.ndarray) -> np.ndarray:
        """Children at ``k+1`` as a ``(2^d, n)`` array (axis 0 slowest)."""
        coords = np.unravel_index(flat, self.shape(k))
        rows = []
        for off in self._child_offsets:
            rows.append(np.ravel_multi_index(tuple(2 * coords[a] + off[a] for a in range(self.d)), self.shape(k + 1)))
        return np.array(rows, dtype=np.int64).reshape(len(self._child_offsets), len(flat))

    def parent_flat(self, k: int, flat: np.ndarray) -> np.ndarray:
        coords = np.unravel_index(flat, self.shape(k))
        return np.ravel_multi_index(tuple(c // 2 for c in coords), self.shape(k - 1))

    # -- topology -------------------------------------------------------------
    def invalidate(self) -> None:
        self._topo.clear()
        self.version += 1

    def topology(self, k: int) -> LevelTopology:
        topo = self._topo.get(k)
        if topo is None:
            topo = self._build_topology(k)
            self._topo[k] = topo
        return topo

    def _build_topology(self, k: int) -> LevelTopology:
        kind = self.kind[k]
        leaves = np.nonzero(kind == NodeKind.LEAF)[0]
        internal = np.nonzero(kind == NodeKind.INTERNAL)[0]
        virtual = np.nonzero(kind == NodeKind.VIRTUAL)[0]
        leafpos = np.full(kind.size, -1, dtype=np.int64)
        leafpos[leaves] = np.arange(leaves.size)
        topo = LevelTopology(leaves, internal, virtual, leafpos)
        if k < self.L:
            topo.children = self.children_flat(k, internal)
            vp = leaves[self.kind[k + 1][self.children_flat(k, leaves)[0]] == NodeKind.VIRTUAL] if leaves.size else leaves
            topo.vparents = vp
            topo.vchildren = self.children_flat(k, vp)
            topo.vstencil = self.stencil_gather(k, vp)
        return topo

    def faces(self, k: int) -> list[FaceSet]:
        topo = self.topology(k)
        if topo.faces is None:
            topo.faces = [self._build_faces(k, topo, a) for a in range(self.d)]
        return topo.faces

    def _build_faces(self, k: int, topo: LevelTopology, axis: int) -> FaceSet:
        leaves = topo.leaves
        kind = self.kind[k]
        e = np.zeros(self.d, dtype=np.int64)
        e[axis] = 1
        pidx, pfix, pout = self.neighbor_flat(k, leaves, e)
        midx, mfix, mout = self.neighbor_flat(k, leaves, -e)
        pkind = np.where(pout, NodeKind.LEAF, kind[pidx])
        mkind = np.where(mout, NodeKind.LEAF, kind[midx])
        if np.any((pkind == NodeKind.ABSENT) | (mkind == NodeKind.ABSENT)):
            raise UngradedTreeError(f"level {k} leaf lacks a same-level face neighbor")
        same = (~mout) & (mkind == NodeKind.LEAF)
        minus_same = np.nonzero(same)[0]
        minus_other = np.nonzero(~same)[0]
        remap = np.full(len(leaves), -1, dtype=np.int64)
        remap[minus_other] = np.arange(minus_other.size)
        mfix_other = []
        for pos, g in mfix:
            keep = remap[pos]
            keep = keep[keep >= 0]
            if keep.size:
                mfix_other.append((keep, g))
        minus_gather = Gather(midx[minus_other], mfix_other)

        def fine(side: int, nbidx, nbkind, outside):
            pos = np.nonzero((~outside) & (nbkind == NodeKind.INTERNAL))[0]
            if pos.size == 0:
                empty = np.zeros((0, 0), dtype=np.int64)
                return pos, empty, empty
            own = self.children_flat(k, leaves[pos])
            nb = self.children_flat(k, nbidx[pos])
            if np.any(self.kind[k + 1][own] != NodeKind.VIRTUAL):
                raise UngradedTreeError(f"leaf at level {k} facing a finer cell lacks virtual children")
            near = self._child_offsets[:, axis] == (1 if side > 0 else 0)
            far = ~near
            own_near = own[near]
            nb_near = nb[far]
            if side > 0:
                return pos, own_near, nb_near
            return pos, nb_near, own_near

        return FaceSet(
            plus=Gather(pidx, pfix),
            minus_same=minus_same,
            minus_from=topo.leafpos[midx[minus_same]],
            minus_other=minus_other,
            minus_gather=minus_gather,
            fine_plus=fine(+1, pidx, pkind, pout),
            fine_minus=fine(-1, midx, mkind, mout),
        )

    # -- bulk queries -------------------------------------------------------
    def leaf_levels(self) -> list[int]:
        return [k for k in range(self.L + 1) if self.topology(k).leaves.size]

    def coarsest_leaf_level(self) -> int:
        return self.leaf_levels()[0]

    def leaf_values(self, slot: str = "q_new") -> np.ndarray:
        parts = [self.data[slot][k][:, self.topology(k).leaves] for k in range(self.L + 1)]
        return np.concatenate(parts, axis=1)

    def iter_leaves(self):
        for k in range(self.L + 1):
            for f in self.topology(k).leaves:
                yield self.cell(k, int(f))

    def masks(self) -> list[np.ndarray]:
        return [self.kind[k].reshape(self.shape(k)).copy() for k in range(self.L + 1)]

    def set_kinds(self, kinds: list[np.ndarray]) -> None:
        for k in range(self.L + 1):
            self.kind[k][:] = kinds[k].reshape(-1)
        self.invalidate()

    def to_uniform(self, slot: str = "q_new", level: int | None = None) -> np.ndarray:
        """Leaf data on the uniform grid of ``level`` (default L).

        Cells covered by finer leaves get exact averages; cells inside a
        coarser leaf are refined by prediction with zero details.
        """
        level = self.L if level is None else level
        vals: list = [None] * (self.L + 1)
        covered: list = [None] * (self.L + 1)
        for k in range(self.L, -1, -1):
            leaves = self.topology(k).leaves
            if k == self.L:
                v = np.zeros((self.ncomp, self.size(k)))
                c = np.zeros(self.size(k), dtype=bool)
            else:
                v = _uniform_project(vals[k + 1], k + 1, self.d)
                c = coarsen_all(covered[k + 1].reshape(self.shape(k + 1))).reshape(-1)
            v[:, leaves] = self.data[slot][k][:, leaves]
            c[leaves] = True
            vals[k], covered[k] = v, c
        rec = vals[0]
        for k in range(1, level + 1):
            pred = _uniform_predict(rec, k - 1, self.d, self.boundary)
            rec = np.where(covered[k], vals[k], pred)
        return rec.reshape((self.ncomp,) + self.shape(level))

    def copy_structure(self) -> "GradedTree":
        t = GradedTree(self.d, self.L, self.ncomp, self.bounds, self.boundary)
        t.set_kinds(self.masks())
        for s in SLOTS:
            for k in range(self.L + 1):
                t.data[s][k][:] = self.data[s][k]
        t.clock[:] = self.clock
        return t


def _merge_fixes(fixes):
    return [(pos, g) for pos, g in fixes if len(pos)]


def _uniform_project(vals: np.ndarray, k: int, d: int) -> np.ndarray:
    ncomp = vals.shape[0]
    n = 2 ** (k - 1)
    shp = (ncomp,) + sum(((n, 2) for _ in range(d)), ())
    return vals.reshape(shp).mean(axis=tuple(range(2, 2 * d + 1, 2))).reshape(ncomp, -1)


def _uniform_predict(vals: np.ndarray, k: int, d: int, boundary: BoundarySpec) -> np.ndarray:
    from .mr_analysis import predict_dense

    ncomp = vals.shape[0]
    return predict_dense(vals.reshape((ncomp,) + (2**k,) * d), boundary).reshape(ncomp, -1)


# ---------------------------------------------------------------------------
# public operations


def same_level_neighbor(idx: CellIndex, axis: int, side: int, boundary: BoundarySpec | None = None) -> CellIndex | None:
    if axis >= idx.d:
        raise ValueError("axis out of range")
    n = 2**idx.level
    c = list(idx.coords)
    c[axis] += 1 if side > 0 else -1
    if 0 <= c[axis] < n:
        return CellIndex(idx.level, tuple(c))
    if boundary is not None and boundary.periodic(axis):
        c[axis] %= n
        return CellIndex(idx.level, tuple(c))
    return None


def build_kinds(
    tree: GradedTree,
    desired: list[np.ndarray],
    min_level: int = 0,
    old: list[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Turn a requested set of internal nodes into a graded, virtual-complete tree.

    ``desired[k]`` flags nodes at level ``k`` that should be refined.  The
    request is closed upward so that every internal node has a fully present
    3^d neighborhood, then filtered top-down so that levels below
    ``min_level`` keep their previous status.
    """
    L, bnd = tree.L, tree.boundary
    old = old if old is not None else tree.masks()
    D = [m.copy() for m in desired]
    D[L] = np.zeros_like(D[L])
    for k in range(L - 1, 0, -1):
        if D[k].any():
            D[k - 1] |= coarsen_any(dilate(D[k], bnd))
    internal: list[np.ndarray] = []
    real: list[np.ndarray] = []
    for k in range(L + 1):
        if k == 0:
            R = np.ones(tree.shape(0), dtype=bool)
        else:
            R = refine_mask(internal[k - 1])
        if k == L:
            I = np.zeros_like(R)
        elif k < min_level:
            I = old[k] == NodeKind.INTERNAL
        else:
            I = D[k] & R & erode(R, bnd)
        real.append(R)
        internal.append(I)
    kinds = []
    for k in range(L + 1):
        kd = np.zeros(tree.shape(k), dtype=np.int8)
        leaf = real[k] & ~internal[k]
        kd[leaf] = NodeKind.LEAF
        kd[internal[k]] = NodeKind.INTERNAL
        if k > 0:
            pl = (kinds[k - 1] == NodeKind.LEAF) & dilate(internal[k - 1], bnd)
            kd[refine_mask(pl)] = NodeKind.VIRTUAL
        kinds.append(kd)
    return kinds


def apply_kinds(tree: GradedTree, kinds: list[np.ndarray], slots: Sequence[str] = ("q_n", "q_new")) -> bool:
    """Install new kinds; newly real cells receive predicted values in ``slots``."""
    from .mr_analysis import predict_children

    old = [tree.kind[k].copy() for k in range(tree.L + 1)]
    changed = any(not np.array_equal(old[k], kinds[k].reshape(-1)) for k in range(tree.L + 1))
    if not changed:
        return False
    tree.set_kinds(kinds)
    realset = (NodeKind.LEAF, NodeKind.INTERNAL)
    for k in range(1, tree.L + 1):
        new = tree.kind[k]
        born = np.isin(new, realset) & ~np.isin(old[k], realset)
        if not born.any():
            continue
        born_idx = np.nonzero(born)[0]
        parents = np.unique(tree.parent_flat(k, born_idx))
        ch = tree.children_flat(k - 1, parents)
        st = tree.stencil_gather(k - 1, parents)
        for s in slots:
            pred = predict_children(st(tree.data[s][k - 1]), tree.d)
            arr = tree.data[s][k]
            sel = np.isin(ch, born_idx)
            for j in range(ch.shape[0]):
                m = sel[j]
                arr[:, ch[j][m]] = pred[:, j, m]
    return True


def ensure_graded_with_virtuals(tree: GradedTree) -> GradedTree:
    desired = [tree.kind[k].reshape(tree.shape(k)) == NodeKind.INTERNAL for k in range(tree.L + 1)]
    kinds = build_kinds(tree, desired)
    apply_kinds(tree, kinds)
    return tree


def check_graded(tree: GradedTree) -> None:
    """Exhaustive face scan; raises ``UngradedTreeError`` on violation."""
    levels = {}
    for k in range(tree.L + 1):
        for f in tree.topology(k).leaves:
            levels[tree.cell(k, int(f))] = k
    for idx, k in levels.items():
        for axis in range(tree.d):
            for side in (-1, 1):
                nb = same_level_neighbor(idx, axis, side, tree.boundary)
                if nb is None:
                    continue
                kind = tree.node_kind(nb)
                if kind == NodeKind.INTERNAL:
                    for c in child_indices(nb):
                        if tree.node_kind(c) == NodeKind.INTERNAL and _touches(c, idx, axis, side, tree):
                            raise UngradedTreeError(f"{idx} faces leaves two levels finer")
                if kind == NodeKind.ABSENT:
                    p = nb.parent()
                    if tree.node_kind(p) not in (NodeKind.LEAF,):
                        raise UngradedTreeError(f"{idx} faces a cell two levels coarser")


def _touches(child: CellIndex, leaf: CellIndex, axis: int, side: int, tree: GradedTree) -> bool:
    n = 2**child.level
    target = (2 * leaf.coords[axis] + (2 if side > 0 else -1)) % n if tree.boundary.periodic(axis) else 2 * leaf.coords[axis] + (2 if side > 0 else -1)
    return child.coords[axis] == target


def find_flux_partner(tree: GradedTree, leaf: CellIndex, face: tuple[int, int]) -> FluxPartner:
    axis, side = face
    if tree.node_kind(leaf) != NodeKind.LEAF:
        raise MeshError(f"{leaf} is not a leaf")
    nb = same_level_neighbor(leaf, axis, side, tree.boundary)
    if nb is None:
        return BoundaryFace(axis, side)
    kind = tree.node_kind(nb)
    if kind == NodeKind.LEAF:
        return SameLevelLeaf(nb)
    if kind == NodeKind.VIRTUAL:
        return SameLevelVirtual(nb)
    if kind == NodeKind.INTERNAL:
        near = [c for c in child_indices(leaf) if c.coords[axis] % 2 == (1 if side > 0 else 0)]
        for c in child_indices(nb):
            if tree.node_kind(c) == NodeKind.INTERNAL and _touches(c, leaf, axis, side, tree):
                raise UngradedTreeError(f"neighbor of {leaf} is refined more than one level")
        if any(tree.node_kind(c) != NodeKind.VIRTUAL for c in near):
            raise UngradedTreeError(f"{leaf} lacks virtual children toward a finer neighbor")
        return FinerViaVirtualChildren(tuple(near))
    raise UngradedTreeError(f"neighbor of {leaf} is more than one level coarser")


def leaf_statistics(tree: GradedTree) -> tuple[int, int, float]:
    leaves = sum(int(np.count_nonzero(tree.kind[k] == NodeKind.LEAF)) for k in range(tree.L + 1))
    virtual = sum(int(np.count_nonzero(tree.kind[k] == NodeKind.VIRTUAL)) for k in range(tree.L + 1))
    return leaves, virtual, 100.0 * leaves / tree.size(tree.L)


def uniform_tree(
    d: int,
    level: int,
    ncomp: int = 1,
    bounds=None,
    boundary: BoundarySpec | None = None,
    max_level: int | None = None,
) -> GradedTree:
    """Tree whose leaves all sit at ``level``."""
    L = level if max_level is None else max_level
    tree = GradedTree(d, L, ncomp, bounds, boundary)
    kinds = []
    for k in range(L + 1):
        kd = np.zeros(tree.shape(k), dtype=np.int8)
        if k < level:
            kd[:] = NodeKind.INTERNAL
        elif k == level:
            kd[:] = NodeKind.LEAF
        kinds.append(kd)
    tree.set_kinds(kinds)
    return tree
