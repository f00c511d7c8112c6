"""Tree-aware evaluation: skeletonization, branch decomposition, and the
length / branch / DSC triplet, all computed on the largest component of
the prediction.

Skeletonization is iterative topology-preserving thinning: six directional
subiterations per sweep, each deleting border voxels that are simple
(removal changes neither the foreground's 26-connectivity nor the
background's 6-connectivity in the 3x3x3 neighborhood) and not curve
endpoints. Deletion is sequential in scan order with the simple-point test
re-evaluated against the current state, so topology preservation holds
voxel by voxel and the result is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product

import numpy as np

from .volcore import Volume, largest_component

# --- 3x3x3 neighborhood tables ---------------------------------------------

OFFSETS26 = [(dz, dy, dx) for dz, dy, dx in product((-1, 0, 1), repeat=3)
             if (dz, dy, dx) != (0, 0, 0)]
_IDX = {off: i for i, off in enumerate(OFFSETS26)}
_N18 = [i for i, (dz, dy, dx) in enumerate(OFFSETS26)
        if abs(dz) + abs(dy) + abs(dx) <= 2]
_FACES = [i for i, (dz, dy, dx) in enumerate(OFFSETS26)
          if abs(dz) + abs(dy) + abs(dx) == 1]

_ADJ26 = [[j for j, b in enumerate(OFFSETS26)
           if j != i and max(abs(a[0] - b[0]), abs(a[1] - b[1]),
                             abs(a[2] - b[2])) <= 1]
          for i, a in enumerate(OFFSETS26)]
_N18_SET = set(_N18)
_ADJ6_18 = [[j for j, b in enumerate(OFFSETS26)
             if j in _N18_SET and abs(a[0] - b[0]) + abs(a[1] - b[1])
             + abs(a[2] - b[2]) == 1]
            if i in _N18_SET else []
            for i, a in enumerate(OFFSETS26)]

_POW2 = (np.int64(1) << np.arange(26, dtype=np.int64))


@lru_cache(maxsize=None)
def _is_simple(key: int) -> bool:
    fg = [i for i in range(26) if (key >> i) & 1]
    if not fg:
        return False
    fg_set = set(fg)
    seen: set[int] = set()
    comps = 0
    for c in fg:
        if c in seen:
            continue
        comps += 1
        if comps > 1:
            return False
        stack = [c]
        seen.add(c)
        while stack:
            cur = stack.pop()
            for nb in _ADJ26[cur]:
                if nb in fg_set and nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
    bg18 = [i for i in _N18 if not (key >> i) & 1]
    if not bg18:
        return False
    bg_set = set(bg18)
    faces = set(_FACES)
    seen.clear()
    face_comps = 0
    for c in bg18:
        if c in seen:
            continue
        stack = [c]
        seen.add(c)
        has_face = False
        while stack:
            cur = stack.pop()
            if cur in faces:
                has_face = True
            for nb in _ADJ6_18[cur]:
                if nb in bg_set and nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if has_face:
            face_comps += 1
            if face_comps > 1:
                return False
    return face_comps == 1


@dataclass
class Skeleton:
    data: np.ndarray  # bool volume, unit-width centerline
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def voxels(self) -> np.ndarray:
        return np.argwhere(self.data)


def skeletonize(mask, spacing=(1.0, 1.0, 1.0)) -> Skeleton:
    """Thin a mask to a unit-width, topology-preserving centerline."""
    if isinstance(mask, Volume):
        spacing = mask.spacing
        mask = mask.data
    m = np.asarray(mask) != 0
    if not m.any():
        raise ValueError("cannot skeletonize an empty mask")
    padded = np.pad(m, 1)
    flat = padded.ravel()
    sz = padded.shape
    offs = np.array([dz * sz[1] * sz[2] + dy * sz[2] + dx
                     for dz, dy, dx in OFFSETS26], dtype=np.int64)
    face_offs = [offs[i] for i in _FACES]

    while True:
        deleted = 0
        for doff in face_offs:
            fgidx = np.flatnonzero(flat)
            cand = fgidx[~flat[fgidx + doff]]
            for i in cand:
                nb = flat[i + offs]
                n_fg = int(nb.sum())
                if n_fg <= 1:
                    continue  # endpoint or isolated: keep
                key = int(nb @ _POW2)
                if _is_simple(key):
                    flat[i] = False
                    deleted += 1
        if deleted == 0:
            break
    out = padded[1:-1, 1:-1, 1:-1]
    return Skeleton(data=out, spacing=tuple(float(s) for s in spacing))


# --- branch decomposition ----------------------------------------------------


@dataclass
class Branch:
    voxels: np.ndarray  # (L, 3) int voxel path, node anchors included
    length_mm: float
    generation: int | None = None


@dataclass
class BranchSet:
    branches: list[Branch] = field(default_factory=list)

    @property
    def total_length(self) -> float:
        return float(sum(b.length_mm for b in self.branches))

    def __len__(self):
        return len(self.branches)


def _path_length(vox: np.ndarray, spacing) -> float:
    if len(vox) < 2:
        return 0.0
    steps = np.diff(vox.astype(np.float64), axis=0) * np.asarray(spacing)
    return float(np.linalg.norm(steps, axis=1).sum())


def skeleton_nodes(skel: Skeleton):
    """(endpoints, junction clusters, adjacency) of a skeleton.

    Endpoints have <= 1 skeleton neighbor; junction voxels (>= 3 neighbors)
    that touch under 26-connectivity are merged into one cluster.
    """
    coords = [tuple(int(v) for v in c) for c in np.argwhere(skel.data)]
    vox_set = set(coords)
    adj = {}
    for c in coords:
        nbs = []
        for dz, dy, dx in OFFSETS26:
            nb = (c[0] + dz, c[1] + dy, c[2] + dx)
            if nb in vox_set:
                nbs.append(nb)
        adj[c] = nbs
    endpoints = [c for c in coords if len(adj[c]) <= 1]
    junction = {c for c in coords if len(adj[c]) >= 3}
    clusters = []
    seen = set()
    for c in sorted(junction):
        if c in seen:
            continue
        comp = [c]
        seen.add(c)
        stack = [c]
        while stack:
            cur = stack.pop()
            for nb in adj[cur]:
                if nb in junction and nb not in seen:
                    seen.add(nb)
                    comp.append(nb)
                    stack.append(nb)
        clusters.append(sorted(comp))
    return endpoints, clusters, adj


def parse_branches(skel: Skeleton, spacing=None) -> BranchSet:
    """Decompose a skeleton into maximal simple paths between nodes."""
    spacing = skel.spacing if spacing is None else spacing
    endpoints, clusters, adj = skeleton_nodes(skel)
    node_of: dict[tuple, int] = {}
    for i, c in enumerate(endpoints):
        node_of[c] = i
    for k, cluster in enumerate(clusters):
        for c in cluster:
            node_of[c] = len(endpoints) + k

    branches: list[Branch] = []
    visited_path: set[tuple] = set()
    direct_edges: set[frozenset] = set()

    for v in sorted(node_of):
        for nb in sorted(adj[v]):
            if nb in node_of:
                if node_of[nb] != node_of[v]:
                    edge = frozenset((v, nb))
                    if edge not in direct_edges:
                        direct_edges.add(edge)
                        vox = np.array([v, nb])
                        branches.append(Branch(vox, _path_length(vox, spacing)))
                continue
            if nb in visited_path:
                continue
            path = [v, nb]
            visited_path.add(nb)
            prev, cur = v, nb
            while True:
                nxt = [n for n in adj[cur] if n != prev]
                if not nxt:
                    break  # endpoint path voxel (degenerate)
                step = nxt[0]
                path.append(step)
                if step in node_of:
                    break
                if step in visited_path:
                    break  # closed back on itself
                visited_path.add(step)
                prev, cur = cur, step
            vox = np.array(path)
            branches.append(Branch(vox, _path_length(vox, spacing)))

    # components with no nodes at all are pure cycles
    remaining = sorted(set(adj) - visited_path - set(node_of))
    seen = set()
    for c in remaining:
        if c in seen or len(adj[c]) != 2:
            continue
        path = [c]
        seen.add(c)
        prev, cur = None, c
        while True:
            nxt = [n for n in adj[cur] if n != prev]
            if not nxt:
                break
            step = nxt[0]
            if step == path[0]:
                path.append(step)
                break
            path.append(step)
            seen.add(step)
            prev, cur = cur, step
        vox = np.array(path)
        branches.append(Branch(vox, _path_length(vox, spacing)))

    branches.sort(key=lambda b: tuple(b.voxels[0]) + tuple(b.voxels[-1]))
    return BranchSet(branches=[b for b in branches if b.length_mm > 0])


def branchset_from_centerline(centerline, spacing) -> BranchSet:
    """Voxelize phantom centerline polylines into a branch set."""
    branches = []
    for b in centerline:
        vox = np.rint(np.asarray(b.points, dtype=np.float64)).astype(int)
        keep = np.ones(len(vox), dtype=bool)
        keep[1:] = np.any(vox[1:] != vox[:-1], axis=1)
        vox = vox[keep]
        length = _path_length(vox, spacing)
        if length > 0:
            branches.append(Branch(vox, length, generation=b.generation))
    return BranchSet(branches=branches)


# --- rates -------------------------------------------------------------------


def length_rate(gt: BranchSet, pred: np.ndarray) -> float:
    """Percent of centerline length whose segments lie fully inside pred.

    A segment is one consecutive voxel pair; both endpoints must be inside.
    """
    total = gt.total_length
    if total <= 0:
        raise ValueError("ground-truth centerline is empty")
    pred = np.asarray(pred) != 0
    credit = 0.0
    for b in gt.branches:
        vox = b.voxels
        inside = pred[vox[:, 0], vox[:, 1], vox[:, 2]]
        if len(vox) < 2:
            continue
        both = inside[:-1] & inside[1:]
        if not both.any():
            continue
        steps = np.linalg.norm(
            np.diff(vox.astype(np.float64), axis=0), axis=1)
        credit += float(steps[both].sum())
    return 100.0 * credit / total


def branch_rate(gt: BranchSet, pred: np.ndarray, frac: float = 0.8):
    """Percent of branches with >= frac of centerline voxels inside pred.

    Returns (rate, per-branch detected flags).
    """
    if len(gt) == 0:
        raise ValueError("ground-truth branch set is empty")
    pred = np.asarray(pred) != 0
    flags = []
    for b in gt.branches:
        vox = b.voxels
        inside = pred[vox[:, 0], vox[:, 1], vox[:, 2]]
        flags.append(bool(inside.mean() >= frac))
    return 100.0 * sum(flags) / len(flags), flags


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred) != 0
    gt = np.asarray(gt) != 0
    p, g = int(pred.sum()), int(gt.sum())
    if p + g == 0:
        return 100.0
    return 100.0 * 2.0 * int((pred & gt).sum()) / (p + g)


@dataclass
class MetricsReport:
    length_rate: float
    branch_rate: float
    dsc: float
    branch_detected: list[bool]
    gt_total_length_mm: float
    gt_branch_count: int
    branch_frac: float = 0.8
    connectivity: int = 26

    def to_dict(self) -> dict:
        return {
            "length_rate": self.length_rate,
            "branch_rate": self.branch_rate,
            "dsc": self.dsc,
            "branch_detected": list(self.branch_detected),
            "gt_total_length_mm": self.gt_total_length_mm,
            "gt_branch_count": self.gt_branch_count,
            "branch_frac": self.branch_frac,
            "connectivity": self.connectivity,
        }


def evaluate(pred: Volume, gt: Volume, centerline=None, frac: float = 0.8,
             connectivity: int = 26) -> MetricsReport:
    """Score a prediction against ground truth on the tree metrics.

    Uses the supplied phantom centerline when present; otherwise the
    ground-truth mask is skeletonized and decomposed. The prediction is
    reduced to its largest component first.
    """
    pred_lc = largest_component(pred, connectivity=connectivity)
    if centerline:
        gt_branches = branchset_from_centerline(centerline, gt.spacing)
    else:
        gt_branches = parse_branches(skeletonize(gt.data, gt.spacing))
    length = length_rate(gt_branches, pred_lc.data)
    brate, flags = branch_rate(gt_branches, pred_lc.data, frac)
    return MetricsReport(
        length_rate=length,
        branch_rate=brate,
        dsc=dsc(pred_lc.data, gt.data),
        branch_detected=flags,
        gt_total_length_mm=gt_branches.total_length,
        gt_branch_count=len(gt_branches),
        branch_frac=frac,
        connectivity=connectivity,
    )
