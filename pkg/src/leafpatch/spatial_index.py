"""Leaf KD-tree partitioning, similarity padding and patch layouts.

Sensors are split by alternating latitude/longitude median cuts down to a
fixed depth so that every leaf holds at most ``capacity`` points. Unfull
leaves are topped up with copies of the most similar sensors, and runs of
sibling leaves are merged into equally sized patches.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx

LAT, LNG = 0, 1
AXIS_NAMES = ("lat", "lng")
PAD_MODES = ("similarity", "distance", "zero")


@dataclass(frozen=True)
class GeoPoint:
    original_index: int
    lat: float
    lng: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lng <= 180.0:
            raise ValueError(f"longitude {self.lng} outside [-180, 180]")


@dataclass(frozen=True, eq=False)
class LeafKdTree:
    """Complete binary partition tree; internal nodes are stored in heap order.

    ``axes[k]``/``thresholds[k]`` describe internal node ``k`` (root is 0,
    children of ``k`` are ``2k+1`` and ``2k+2``). ``leaves`` lists the
    original indices of each leaf, left to right.
    """

    depth: int
    capacity: int
    coords: np.ndarray
    axes: tuple[int, ...]
    thresholds: tuple[float, ...]
    leaves: tuple[tuple[int, ...], ...]

    @property
    def n_points(self) -> int:
        return int(self.coords.shape[0])

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    def leaf_sizes(self) -> list[int]:
        return [len(leaf) for leaf in self.leaves]

    def subtree_members(self, level: int, position: int) -> list[int]:
        """Original indices under the node at ``level`` (0 = root), ``position`` from the left."""
        span = 2 ** (self.depth - level)
        out: list[int] = []
        for leaf in self.leaves[position * span : (position + 1) * span]:
            out.extend(leaf)
        return out


def tree_depth(n_points: int, capacity: int) -> int:
    """Smallest D with capacity * 2**D >= n_points, i.e. ceil(log2(max(1, N/C)))."""
    if n_points < 1:
        raise ValueError("at least one point is required")
    if capacity < 1:
        raise ValueError(f"leaf capacity must be positive, got {capacity}")
    depth = 0
    while capacity * (1 << depth) < n_points:
        depth += 1
    return depth


def _as_coords(points) -> np.ndarray:
    if len(points) and isinstance(points[0], GeoPoint):
        ordered = sorted(points, key=lambda p: p.original_index)
        if [p.original_index for p in ordered] != list(range(len(ordered))):
            raise ValueError("original indices must be exactly 0..N-1")
        return np.array([[p.lat, p.lng] for p in ordered], dtype=np.float64)
    coords = np.asarray(points, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError(f"coordinates must have shape (N, 2), got {coords.shape}")
    return coords


def _sorted_on(coords: np.ndarray, members: np.ndarray, axis: int) -> np.ndarray:
    # tie-break: (split-axis coordinate, other-axis coordinate, original index)
    sub = coords[members]
    order = np.lexsort((members, sub[:, 1 - axis], sub[:, axis]))
    return members[order]


def _build(coords: np.ndarray, capacity: int, sort_fn) -> LeafKdTree:
    n = coords.shape[0]
    depth = tree_depth(n, capacity)
    axes: list[int] = []
    thresholds: list[float] = []
    level = [np.arange(n)]
    for k in range(depth):
        axis = k % 2
        nxt = []
        for members in level:
            ordered = sort_fn(members, axis)
            half = len(ordered) // 2
            if len(ordered) == 0:
                thr = math.nan
            elif half == 0:
                thr = float(coords[ordered[0], axis])
            else:
                thr = 0.5 * (coords[ordered[half - 1], axis] + coords[ordered[half], axis])
            axes.append(axis)
            thresholds.append(float(thr))
            nxt.extend([ordered[:half], ordered[half:]])
        level = nxt
    leaves = tuple(tuple(int(i) for i in sort_fn(m, depth % 2)) for m in level)
    coords = coords.copy()
    coords.setflags(write=False)
    return LeafKdTree(depth, capacity, coords, tuple(axes), tuple(thresholds), leaves)


def build_leaf_kdtree(points, capacity: int) -> LeafKdTree:
    """Partition points into a complete leaf KD-tree with leaves of at most ``capacity`` points.

    ``points`` is either a list of :class:`GeoPoint` or an ``(N, 2)`` array of
    ``(lat, lng)`` rows. Every node down to the fixed depth is split, so empty
    children are possible when a node already fits in one leaf.
    """
    coords = _as_coords(points)
    if coords.shape[0] == 0:
        raise ValueError("cannot build a tree over zero points")
    return _build(coords, capacity, lambda m, axis: _sorted_on(coords, m, axis))


def index_order_partition(points, capacity: int) -> LeafKdTree:
    """Same leaf geometry as the KD-tree but leaves are runs of the original index order.

    Stands in for a partition without spatial locality (ablation fixture).
    """
    coords = _as_coords(points)
    if coords.shape[0] == 0:
        raise ValueError("cannot build a tree over zero points")
    return _build(coords, capacity, lambda m, axis: np.sort(m))


def leaf_order(tree: LeafKdTree) -> list[int]:
    """Original indices in left-to-right leaf order (breadth-first over the last level)."""
    return [i for leaf in tree.leaves for i in leaf]


# ---------------------------------------------------------------------------
# Padding
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PadAssignment:
    """Slots to fill in the C-per-leaf index space and the point copied into each.

    A source of ``-1`` marks a zero-filled slot (only in ``"zero"`` mode).
    """

    padded_slots: np.ndarray
    pad_sources: np.ndarray
    leaf_pads: tuple[tuple[int, ...], ...]
    leaves_per_patch: int
    mode: str


def cosine_similarity_matrix(series: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity between columns; zero-norm columns score 0."""
    series = np.asarray(series, dtype=np.float64)
    norms = np.linalg.norm(series, axis=0)
    unit = np.divide(series, norms, out=np.zeros_like(series), where=norms > 0)
    return unit.T @ unit


def _reference_members(tree: LeafKdTree, leaf: int) -> list[int]:
    members = list(tree.leaves[leaf])
    level = tree.depth
    pos = leaf
    while not members and level > 0:
        level -= 1
        pos //= 2
        members = tree.subtree_members(level, pos)
    return members


def pad_assignments(
    tree: LeafKdTree,
    train_series=None,
    leaves_per_patch: int = 1,
    mode: str = "similarity",
) -> PadAssignment:
    """Choose pad sources for every unfull leaf.

    In ``"similarity"`` mode the candidate maximising the mean cosine similarity
    (over ``train_series`` columns) with the leaf's real members is taken,
    repeatedly, until the leaf holds ``capacity`` slots. Candidates exclude
    every point already present in the same patch of ``leaves_per_patch``
    leaves, so a patch never repeats a point. Ties go to the smaller index.
    ``"distance"`` ranks by mean euclidean distance in (lat, lng) instead and
    ``"zero"`` fills slots with zeros. An empty leaf borrows the members of its
    nearest non-empty ancestor as the reference set.
    """
    if mode not in PAD_MODES:
        raise ValueError(f"unknown padding mode {mode!r}; expected one of {PAD_MODES}")
    _check_leaves_per_patch(tree, leaves_per_patch)
    n, cap = tree.n_points, tree.capacity
    if mode == "similarity":
        if train_series is None:
            raise ValueError("similarity padding needs the training series")
        series = np.asarray(train_series, dtype=np.float64)
        if series.ndim != 2 or series.shape[1] != n:
            raise ValueError(f"training series must be (T, {n}), got {series.shape}")
        score = cosine_similarity_matrix(series)
    elif mode == "distance":
        diff = tree.coords[:, None, :] - tree.coords[None, :, :]
        score = -np.sqrt((diff**2).sum(-1))
    else:
        score = None

    slots: list[int] = []
    sources: list[int] = []
    leaf_pads: list[tuple[int, ...]] = []
    for first in range(0, tree.n_leaves, leaves_per_patch):
        group = range(first, first + leaves_per_patch)
        taken = np.zeros(n, dtype=bool)
        for leaf in group:
            taken[list(tree.leaves[leaf])] = True
        for leaf in group:
            members = tree.leaves[leaf]
            need = cap - len(members)
            chosen: list[int] = []
            if need > 0 and score is not None:
                ref = _reference_members(tree, leaf)
                base = score[ref].mean(axis=0)
                for _ in range(need):
                    masked = np.where(taken, -np.inf, base)
                    if not np.isfinite(masked).any():
                        raise ValueError(
                            "not enough distinct points to pad a patch without repetition; "
                            "reduce leaves_per_patch or capacity"
                        )
                    pick = int(np.argmax(masked))
                    taken[pick] = True
                    chosen.append(pick)
            elif need > 0:
                chosen = [-1] * need
            for j, src in enumerate(chosen):
                slots.append(leaf * cap + len(members) + j)
                sources.append(src)
            leaf_pads.append(tuple(chosen))
    return PadAssignment(
        padded_slots=np.asarray(slots, dtype=np.intp),
        pad_sources=np.asarray(sources, dtype=np.intp),
        leaf_pads=tuple(leaf_pads),
        leaves_per_patch=leaves_per_patch,
        mode=mode,
    )


def _check_leaves_per_patch(tree: LeafKdTree, leaves_per_patch: int) -> None:
    if leaves_per_patch < 1 or leaves_per_patch & (leaves_per_patch - 1):
        raise ValueError(
            f"leaves per patch must be a power of 2 (leaves merge by binary subtree), got {leaves_per_patch}"
        )
    if leaves_per_patch > tree.n_leaves:
        raise ValueError(
            f"leaves per patch ({leaves_per_patch}) exceeds the leaf count 2**{tree.depth} = {tree.n_leaves}"
        )


# ---------------------------------------------------------------------------
# Patch layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PatchLayout:
    """Slot map from the R x P patched grid back to original sensor indices.

    ``new_order[s]`` is the original index shown at slot ``s`` (``-1`` for a
    zero pad); ``home_slots[n]`` is the unique real slot of sensor ``n``.
    """

    new_order: np.ndarray
    padded_slots: np.ndarray
    pad_sources: np.ndarray
    home_slots: np.ndarray
    n_patches: int
    patch_size: int
    capacity: int
    leaves_per_patch: int
    n_points: int

    @property
    def R(self) -> int:
        return self.n_patches

    @property
    def P(self) -> int:
        return self.patch_size

    @property
    def M(self) -> int:
        return self.n_patches * self.patch_size

    @property
    def n_padded(self) -> int:
        return int(self.padded_slots.size)

    def padded_mask(self) -> np.ndarray:
        mask = np.zeros(self.M, dtype=bool)
        mask[self.padded_slots] = True
        return mask

    def patch_of_slot(self, slot: int) -> int:
        return slot // self.patch_size

    def to_dict(self) -> dict:
        return {
            "new_order": self.new_order.tolist(),
            "padded_slots": self.padded_slots.tolist(),
            "pad_sources": self.pad_sources.tolist(),
            "n_patches": self.n_patches,
            "patch_size": self.patch_size,
            "capacity": self.capacity,
            "leaves_per_patch": self.leaves_per_patch,
            "n_points": self.n_points,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatchLayout":
        new_order = np.asarray(d["new_order"], dtype=np.intp)
        padded = np.asarray(d["padded_slots"], dtype=np.intp)
        return cls(
            new_order=new_order,
            padded_slots=padded,
            pad_sources=np.asarray(d["pad_sources"], dtype=np.intp),
            home_slots=_home_slots(new_order, padded, d["n_points"]),
            n_patches=d["n_patches"],
            patch_size=d["patch_size"],
            capacity=d["capacity"],
            leaves_per_patch=d["leaves_per_patch"],
            n_points=d["n_points"],
        )


def _home_slots(new_order: np.ndarray, padded_slots: np.ndarray, n_points: int) -> np.ndarray:
    real = np.ones(new_order.size, dtype=bool)
    real[padded_slots] = False
    slots = np.flatnonzero(real)
    owners = new_order[slots]
    if owners.size != n_points or not np.array_equal(np.sort(owners), np.arange(n_points)):
        raise ValueError("every original index must occupy exactly one non-padded slot")
    home = np.empty(n_points, dtype=np.intp)
    home[owners] = slots
    return home


def assemble_patches(tree: LeafKdTree, padded: PadAssignment, leaves_per_patch: int) -> PatchLayout:
    """Merge runs of ``leaves_per_patch`` sibling leaves (after padding) into patches."""
    _check_leaves_per_patch(tree, leaves_per_patch)
    cap = tree.capacity
    m = cap * tree.n_leaves
    new_order = np.full(m, -2, dtype=np.intp)
    for leaf, members in enumerate(tree.leaves):
        base = leaf * cap
        new_order[base : base + len(members)] = members
    new_order[padded.padded_slots] = padded.pad_sources
    if (new_order == -2).any():
        raise ValueError("padding does not fill every leaf to capacity")
    patch_size = cap * leaves_per_patch
    n_patches = tree.n_leaves // leaves_per_patch
    for r in range(n_patches):
        block = new_order[r * patch_size : (r + 1) * patch_size]
        block = block[block >= 0]
        if np.unique(block).size != block.size:
            raise ValueError(
                f"patch {r} repeats a point; pad with leaves_per_patch >= {leaves_per_patch}"
            )
    new_order.setflags(write=False)
    return PatchLayout(
        new_order=new_order,
        padded_slots=padded.padded_slots.copy(),
        pad_sources=padded.pad_sources.copy(),
        home_slots=_home_slots(new_order, padded.padded_slots, tree.n_points),
        n_patches=n_patches,
        patch_size=patch_size,
        capacity=cap,
        leaves_per_patch=leaves_per_patch,
        n_points=tree.n_points,
    )


def make_layout(
    coords,
    capacity: int,
    leaves_per_patch: int,
    train_series=None,
    padding: str = "similarity",
    spatial: bool = True,
) -> tuple[LeafKdTree, PatchLayout]:
    """Tree + padding + patching in one call. ``spatial=False`` ignores coordinates."""
    builder = build_leaf_kdtree if spatial else index_order_partition
    tree = builder(coords, capacity)
    pads = pad_assignments(tree, train_series, leaves_per_patch=leaves_per_patch, mode=padding)
    return tree, assemble_patches(tree, pads, leaves_per_patch)


def leaves_per_patch_for(n_points: int, capacity: int, n_patches: int) -> int:
    """Leaves per patch that yields ``n_patches`` patches for this geometry."""
    n_leaves = 1 << tree_depth(n_points, capacity)
    if n_patches < 1 or n_patches > n_leaves or n_leaves % n_patches:
        raise ValueError(
            f"{n_patches} patches impossible with {n_leaves} leaves; leaves per patch must be a power of 2"
        )
    return n_leaves // n_patches


def apply_layout(layout: PatchLayout, embeddings):
    """Reorder and pad ``(..., N, d)`` rows into ``(..., R, P, d)`` patches.

    Accepts numpy arrays or :class:`~leafpatch.numerics.Tensor` (differentiable).
    """
    is_tensor = isinstance(embeddings, nx.Tensor)
    shape = embeddings.shape
    if len(shape) < 2 or shape[-2] != layout.n_points:
        raise ValueError(f"expected (..., {layout.n_points}, d) embeddings, got {tuple(shape)}")
    zero_slots = layout.new_order < 0
    index = np.where(zero_slots, 0, layout.new_order)
    lead = tuple(shape[:-2])
    out_shape = lead + (layout.n_patches, layout.patch_size, shape[-1])
    if is_tensor:
        out = nx.take(embeddings, index, axis=len(shape) - 2)
        if zero_slots.any():
            keep = (~zero_slots).astype(embeddings.dtype)[:, None]
            out = nx.mul(out, keep)
        return nx.reshape(out, out_shape)
    arr = np.asarray(embeddings)
    out = np.take(arr, index, axis=arr.ndim - 2)
    if zero_slots.any():
        out[..., zero_slots, :] = 0
    return out.reshape(out_shape)


def invert_layout(layout: PatchLayout, patched):
    """Drop padded slots and restore original index order: ``(..., R, P, d) -> (..., N, d)``."""
    shape = tuple(patched.shape)
    if len(shape) < 3 or shape[-3:-1] != (layout.n_patches, layout.patch_size):
        raise ValueError(
            f"expected (..., {layout.n_patches}, {layout.patch_size}, d) input, got {shape}"
        )
    flat_shape = shape[:-3] + (layout.M, shape[-1])
    if isinstance(patched, nx.Tensor):
        flat = nx.reshape(patched, flat_shape)
        return nx.take(flat, layout.home_slots, axis=len(flat_shape) - 2)
    flat = np.asarray(patched).reshape(flat_shape)
    return np.take(flat, layout.home_slots, axis=flat.ndim - 2)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


@dataclass
class PartitionReport:
    geojson_path: str
    csv_path: str
    n_features: int
    leaf_sizes: list[int]
    patch_occupancy: list[int]
    extras: dict = field(default_factory=dict)


def export_partition(tree: LeafKdTree, layout: PatchLayout, points=None, out_dir=".") -> PartitionReport:
    """Write ``partition.geojson`` (one feature per sensor) and ``partition.csv`` (one row per leaf)."""
    coords = tree.coords if points is None else _as_coords(points)
    cap = tree.capacity
    leaf_of = np.empty(tree.n_points, dtype=np.intp)
    for leaf, members in enumerate(tree.leaves):
        leaf_of[list(members)] = leaf
    pads_by_leaf: dict[int, list[int]] = {}
    padded_into: dict[int, list[int]] = {}
    for slot, src in zip(layout.padded_slots.tolist(), layout.pad_sources.tolist()):
        leaf = slot // cap
        pads_by_leaf.setdefault(leaf, []).append(src)
        if src >= 0:
            padded_into.setdefault(src, []).append(leaf)

    features = []
    for n in range(tree.n_points):
        leaf = int(leaf_of[n])
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [float(coords[n, LNG]), float(coords[n, LAT])]},
                "properties": {
                    "original_index": n,
                    "leaf_id": leaf,
                    "patch_id": leaf // layout.leaves_per_patch,
                    "leaf_pad_sources": pads_by_leaf.get(leaf, []),
                    "padded_into_leaves": padded_into.get(n, []),
                },
            }
        )
    os.makedirs(out_dir, exist_ok=True)
    geojson_path = os.path.join(out_dir, "partition.geojson")
    with open(geojson_path, "w") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh)

    csv_path = os.path.join(out_dir, "partition.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["leaf_id", "patch_id", "size_before_pad", "pad_source_indices"])
        for leaf, members in enumerate(tree.leaves):
            srcs = pads_by_leaf.get(leaf, [])
            writer.writerow([leaf, leaf // layout.leaves_per_patch, len(members), ";".join(map(str, srcs))])

    occupancy = np.bincount(np.arange(layout.M) // layout.patch_size, minlength=layout.n_patches)
    return PartitionReport(
        geojson_path=geojson_path,
        csv_path=csv_path,
        n_features=len(features),
        leaf_sizes=tree.leaf_sizes(),
        patch_occupancy=occupancy.tolist(),
        extras={"R": layout.R, "P": layout.P, "M": layout.M, "n_padded": layout.n_padded},
    )


def check_sibling_separation(tree: LeafKdTree) -> bool:
    """True when every internal node separates its children on its split axis."""
    for k, (axis, thr) in enumerate(zip(tree.axes, tree.thresholds)):
        level = int(math.floor(math.log2(k + 1)))
        pos = k - (2**level - 1)
        left = tree.subtree_members(level + 1, 2 * pos)
        right = tree.subtree_members(level + 1, 2 * pos + 1)
        if left and tree.coords[left, axis].max() > thr:
            return False
        if right and tree.coords[right, axis].min() < thr:
            return False
    return True


def points_from_arrays(lat: Sequence[float], lng: Sequence[float]) -> list[GeoPoint]:
    return [GeoPoint(i, float(a), float(b)) for i, (a, b) in enumerate(zip(lat, lng))]
