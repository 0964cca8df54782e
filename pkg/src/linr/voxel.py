"""Integer voxel sets, multiscale pyramids, and octree child occupancy.

Coordinates are non-negative integers below 2^16, ordered lexicographically
on (x, y, z).  Every operation here is exact integer arithmetic; the learned
part of the codec never touches coordinates directly, only the occupancy
features derived from them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    DepthError,
    EmptyCloudError,
    InvalidOccupancyError,
    PyramidMismatchError,
)

MAX_BIT_DEPTH = 16

# Component shifts for packing one (x, y, z) into a single int64 key.  The
# 21-bit lanes leave headroom above 16-bit coordinates, so adding a +-1
# neighbor offset can never borrow into the next lane.
_SHIFT_X = 42
_SHIFT_Y = 21
_LANE_MASK = (1 << 21) - 1

# The seven occupancy probes in fixed channel order; channel 6 is "self".
NEIGHBOR_OFFSETS = (
    (1, 0, 0),
    (-1, 0, 0),
    (0, 1, 0),
    (0, -1, 0),
    (0, 0, 1),
    (0, 0, -1),
    (0, 0, 0),
)

# 3x3x3 kernel offsets in lexicographic order; index 13 is the center.
KERNEL_OFFSETS_3 = tuple(
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
)
KERNEL_OFFSETS_1 = ((0, 0, 0),)


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Pack (n, 3) integer coordinates into sorted-compatible int64 keys."""
    c = coords.astype(np.int64, copy=False)
    return (c[:, 0] << _SHIFT_X) | (c[:, 1] << _SHIFT_Y) | c[:, 2]


def unpack_coords(keys: np.ndarray) -> np.ndarray:
    """Inverse of :func:`pack_coords`."""
    out = np.empty((keys.shape[0], 3), dtype=np.int64)
    out[:, 0] = keys >> _SHIFT_X
    out[:, 1] = (keys >> _SHIFT_Y) & _LANE_MASK
    out[:, 2] = keys & _LANE_MASK
    return out


def _offset_delta(offset) -> int:
    dx, dy, dz = offset
    return (dx << _SHIFT_X) + (dy << _SHIFT_Y) + dz


class SparseVoxelSet:
    """Sorted, deduplicated set of occupied voxel coordinates.

    ``coords`` is an (n, 3) int64 array, strictly increasing in
    lexicographic order.  ``feats`` is an optional per-point feature matrix
    whose rows align with ``coords``; when absent, the conventional
    initialization is a single all-ones channel.
    """

    __slots__ = ("coords", "feats", "_keys", "_kernel_pairs")

    def __init__(self, coords: np.ndarray, feats: Optional[np.ndarray] = None,
                 *, assume_sorted: bool = False):
        coords = np.asarray(coords, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"coords must be (n, 3), got {coords.shape}")
        if coords.shape[0] and coords.min() < 0:
            raise DepthError("negative voxel coordinates")
        if coords.shape[0] and coords.max() >= (1 << MAX_BIT_DEPTH):
            raise DepthError(f"coordinates exceed {MAX_BIT_DEPTH}-bit range")
        if not assume_sorted and coords.shape[0]:
            keys = pack_coords(coords)
            if np.any(np.diff(keys) <= 0):
                order = np.unique(keys)
                if feats is not None and order.shape[0] != keys.shape[0]:
                    raise ValueError("cannot deduplicate coords carrying features")
                coords = unpack_coords(order)
                if feats is not None:
                    feats = feats[np.argsort(keys, kind="stable")]
        if feats is not None:
            feats = np.asarray(feats)
            if feats.shape[0] != coords.shape[0]:
                raise ValueError("feature rows must match coordinate count")
        self.coords = coords
        self.feats = feats
        self._keys: Optional[np.ndarray] = None
        self._kernel_pairs: dict = {}

    def __len__(self) -> int:
        return self.coords.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseVoxelSet):
            return NotImplemented
        return self.coords.shape == other.coords.shape and bool(
            np.array_equal(self.coords, other.coords)
        )

    def __repr__(self) -> str:
        return f"SparseVoxelSet({len(self)} points)"

    @property
    def keys(self) -> np.ndarray:
        """Packed int64 keys, sorted ascending (same order as coords)."""
        if self._keys is None:
            self._keys = pack_coords(self.coords)
        return self._keys

    def features(self, dtype=np.float32) -> np.ndarray:
        """Stored features, or the all-ones initialization."""
        if self.feats is not None:
            return np.asarray(self.feats, dtype=dtype)
        return np.ones((len(self), 1), dtype=dtype)

    def check_bit_depth(self, bit_depth: int) -> None:
        if not 1 <= bit_depth <= MAX_BIT_DEPTH:
            raise DepthError(f"bit depth must be in [1, {MAX_BIT_DEPTH}]")
        if len(self) and self.coords.max() >= (1 << bit_depth):
            raise DepthError(
                f"coordinates exceed {bit_depth}-bit range "
                f"(max component {int(self.coords.max())})"
            )

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index of each query coordinate, or -1 when unoccupied."""
        target = pack_coords(np.asarray(coords, dtype=np.int64))
        return self._lookup_keys(target)

    def _lookup_keys(self, target: np.ndarray) -> np.ndarray:
        keys = self.keys
        idx = np.searchsorted(keys, target)
        idx_c = np.minimum(idx, len(keys) - 1) if len(keys) else idx
        found = np.zeros(target.shape[0], dtype=bool)
        if len(keys):
            found = keys[idx_c] == target
        out = np.where(found, idx_c, -1)
        return out.astype(np.int64)

    def kernel_pairs(self, kernel_size: int = 3):
        """Gather lists for a submanifold convolution over this set.

        Returns, per kernel offset in fixed lexicographic order, a pair of
        index arrays ``(out_rows, in_rows)``: point ``out_rows[i]`` sees
        point ``in_rows[i]`` at that offset.  Cached per kernel size.
        """
        if kernel_size not in (1, 3):
            raise ValueError("kernel size must be 1 or 3")
        cached = self._kernel_pairs.get(kernel_size)
        if cached is not None:
            return cached
        offsets = KERNEL_OFFSETS_3 if kernel_size == 3 else KERNEL_OFFSETS_1
        keys = self.keys
        n = len(self)
        identity = np.arange(n, dtype=np.int64)
        pairs = []
        for off in offsets:
            if off == (0, 0, 0):
                pairs.append((identity, identity))
                continue
            target = keys + _offset_delta(off)
            idx = self._lookup_keys(target)
            out_rows = np.nonzero(idx >= 0)[0].astype(np.int64)
            pairs.append((out_rows, idx[out_rows]))
        self._kernel_pairs[kernel_size] = pairs
        return pairs


@dataclass
class ScalePyramid:
    """Chain of voxel sets from full resolution down to the coarsest level.

    ``levels[0]`` is the input cloud; ``levels[i + 1]`` is its floor-div-2
    downsampling.  ``parent_maps[i][p]`` is the row in ``levels[i + 1]`` of
    point ``p``'s parent.
    """

    levels: list
    parent_maps: list
    _masks: dict = field(default_factory=dict, repr=False)

    @property
    def num_scales(self) -> int:
        """Number of scale transitions (levels minus one)."""
        return len(self.levels) - 1

    def masks(self, i: int) -> np.ndarray:
        """Child-occupancy masks of transition i (levels i+1 -> i), cached."""
        if i not in self._masks:
            self._masks[i] = child_occupancy(self.levels[i], self.levels[i + 1])
        return self._masks[i]


def downsample(pc: SparseVoxelSet) -> SparseVoxelSet:
    """Halve the resolution: floor-div-2 then deduplicate.

    The output carries no features (the all-ones initialization applies).
    """
    if len(pc) == 0:
        raise EmptyCloudError("cannot downsample an empty cloud")
    keys = np.unique(pack_coords(pc.coords >> 1))
    return SparseVoxelSet(unpack_coords(keys), assume_sorted=True)


def build_pyramid(pc: SparseVoxelSet, stop_at: int = 64,
                  num_scales: Optional[int] = None) -> ScalePyramid:
    """Repeatedly downsample ``pc`` into a ScalePyramid.

    Stops once a level has at most ``stop_at`` points, unless ``num_scales``
    pins the number of transitions (used so every frame of a sequence shares
    the scale count fixed by its first frame).
    """
    if len(pc) == 0:
        raise EmptyCloudError("cannot build a pyramid from an empty cloud")
    if num_scales is None and stop_at < 1:
        raise ValueError("stop_at must be >= 1")
    levels = [pc]
    parent_maps = []
    while True:
        if num_scales is not None:
            if len(levels) - 1 >= num_scales:
                break
        elif len(levels[-1]) <= stop_at:
            break
        coarse = downsample(levels[-1])
        parent_maps.append(coarse._lookup_keys(pack_coords(levels[-1].coords >> 1)))
        levels.append(coarse)
    return ScalePyramid(levels=levels, parent_maps=parent_maps)


def child_index(coords: np.ndarray) -> np.ndarray:
    """Octant slot of each point under its parent: 4*(x&1) + 2*(y&1) + (z&1)."""
    c = np.asarray(coords, dtype=np.int64)
    return ((c[:, 0] & 1) << 2) | ((c[:, 1] & 1) << 1) | (c[:, 2] & 1)


def child_occupancy(fine: SparseVoxelSet, coarse: SparseVoxelSet) -> np.ndarray:
    """8-bit child mask per coarse point; bit j set iff child slot j exists.

    Raises PyramidMismatchError unless ``coarse`` is exactly the
    downsampling of ``fine``.
    """
    parents = coarse._lookup_keys(pack_coords(fine.coords >> 1))
    if len(fine) and parents.min() < 0:
        raise PyramidMismatchError("fine level has a point with no parent")
    masks = np.zeros(len(coarse), dtype=np.uint8)
    bits = (1 << child_index(fine.coords)).astype(np.uint8)
    np.bitwise_or.at(masks, parents, bits)
    if len(coarse) and masks.min() == 0:
        raise PyramidMismatchError("coarse level has a point with no children")
    return masks


def reconstruct_children(masks: np.ndarray, coarse: SparseVoxelSet) -> SparseVoxelSet:
    """Exact inverse of :func:`child_occupancy`; output is sorted."""
    masks = np.asarray(masks, dtype=np.uint8)
    if masks.shape[0] != len(coarse):
        raise PyramidMismatchError("mask count must match coarse point count")
    if masks.shape[0] and masks.min() == 0:
        raise InvalidOccupancyError("zero child mask")
    slots = np.arange(8, dtype=np.uint8)
    present = (masks[:, None] >> slots[None, :]) & 1  # (n, 8)
    parent_rows, slot_cols = np.nonzero(present)
    base = coarse.coords[parent_rows] << 1
    delta = np.stack(
        [(slot_cols >> 2) & 1, (slot_cols >> 1) & 1, slot_cols & 1], axis=1
    ).astype(np.int64)
    children = base + delta
    order = np.argsort(pack_coords(children))
    return SparseVoxelSet(children[order], assume_sorted=True)


def neighbor_occupancy(pc: SparseVoxelSet, dtype=np.float32) -> np.ndarray:
    """Seven binary channels per point probing the six face neighbors + self.

    Channel order follows NEIGHBOR_OFFSETS; the final "self" channel is
    always 1.
    """
    n = len(pc)
    out = np.zeros((n, 7), dtype=dtype)
    keys = pc.keys
    for ch, off in enumerate(NEIGHBOR_OFFSETS):
        if off == (0, 0, 0):
            out[:, ch] = 1
            continue
        idx = pc._lookup_keys(keys + _offset_delta(off))
        out[idx >= 0, ch] = 1
    return out
