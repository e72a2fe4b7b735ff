"""Skeletons, motion sequences and their triplane-aligned 2D encodings.

A skeleton is projected orthographically onto the XY, XZ and YZ planes of a
fixed world cube.  Each projection is rasterized into an occupancy map
(pixels covered by a joint disc or a bone band) and an index map carrying the
normalized joint index ``i / (N - 1)`` on joints and the bone midpoint index
``(i + j) / (2 (N - 1))`` on bones.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError


class Plane(enum.IntEnum):
    XY = 0
    XZ = 1
    YZ = 2

    @property
    def axes(self) -> tuple[int, int]:
        """World axes kept by the projection: (column axis, row axis)."""
        return _PLANE_AXES[self]


_PLANE_AXES = {Plane.XY: (0, 1), Plane.XZ: (0, 2), Plane.YZ: (1, 2)}
PLANES = (Plane.XY, Plane.XZ, Plane.YZ)


def as_plane(plane) -> Plane:
    if isinstance(plane, Plane):
        return plane
    if isinstance(plane, str):
        try:
            return Plane[plane.upper()]
        except KeyError:
            pass
    elif isinstance(plane, (int, np.integer)) and not isinstance(plane, bool):
        if 0 <= int(plane) < 3:
            return Plane(int(plane))
    raise ValueError(f"invalid plane id {plane!r}; expected one of XY, XZ, YZ")


@dataclass(frozen=True)
class WorldBounds:
    """Axis-aligned projection cube shared by every frame of a sequence."""

    lo: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    hi: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("bounds need three coordinates per corner")
        if not all(math.isfinite(v) for v in lo + hi):
            raise ValueError("bounds must be finite")
        if not all(h > l for l, h in zip(lo, hi)):
            raise ValueError(f"bounds max must exceed min componentwise: {lo} {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, half: float = 1.0, center=(0.0, 0.0, 0.0)) -> "WorldBounds":
        c = [float(v) for v in center]
        return cls(tuple(v - half for v in c), tuple(v + half for v in c))

    @property
    def size(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    def translated(self, delta) -> "WorldBounds":
        d = [float(v) for v in delta]
        return WorldBounds(
            tuple(a + b for a, b in zip(self.lo, d)),
            tuple(a + b for a, b in zip(self.hi, d)),
        )

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)

    def to_list(self) -> list[float]:
        return list(self.lo) + list(self.hi)

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "WorldBounds":
        if len(values) != 6:
            raise ValueError("bounds list needs 6 values")
        return cls(tuple(values[:3]), tuple(values[3:]))


def _normalize_bones(bones, n_joints: int) -> tuple[tuple[int, int], ...]:
    out = []
    seen = set()
    for bone in bones:
        if len(bone) != 2:
            raise ValueError(f"bone {bone!r} is not an index pair")
        a, b = int(bone[0]), int(bone[1])
        if a == b:
            raise ValueError(f"bone ({a}, {b}) connects a joint to itself")
        i, j = min(a, b), max(a, b)
        if i < 0 or j >= n_joints:
            raise ValueError(f"bone ({a}, {b}) out of range for {n_joints} joints")
        if (i, j) in seen:
            raise ValueError(f"duplicate bone ({i}, {j})")
        seen.add((i, j))
        out.append((i, j))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class Skeleton:
    """N joints in world coordinates plus an undirected bone list (i < j)."""

    joints: np.ndarray
    bones: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        joints = np.array(self.joints, dtype=np.float64)
        if joints.ndim != 2 or joints.shape[1] != 3:
            raise ValueError(f"joints must have shape (N, 3), got {joints.shape}")
        if joints.shape[0] < 2:
            raise ValueError("a skeleton needs at least 2 joints")
        if not np.all(np.isfinite(joints)):
            raise ValueError("joint coordinates must be finite")
        joints.setflags(write=False)
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "bones", _normalize_bones(self.bones, len(joints)))

    @property
    def n_joints(self) -> int:
        return self.joints.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Skeleton):
            return NotImplemented
        return self.bones == other.bones and np.array_equal(self.joints, other.joints)

    def translated(self, delta) -> "Skeleton":
        return Skeleton(self.joints + np.asarray(delta, dtype=np.float64), self.bones)

    def with_joints(self, joints) -> "Skeleton":
        return Skeleton(joints, self.bones)

    def to_json(self) -> dict:
        return {"joints": self.joints.tolist(), "bones": [list(b) for b in self.bones]}

    @classmethod
    def from_json(cls, obj) -> "Skeleton":
        try:
            return cls(obj["joints"], [tuple(b) for b in obj.get("bones", [])])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed skeleton: {exc}", "schema") from exc


@dataclass(frozen=True, eq=False)
class MotionSequence:
    """K skeleton frames sharing one topology."""

    frames: tuple[Skeleton, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("a motion sequence needs at least one frame")
        n, bones = frames[0].n_joints, frames[0].bones
        for k, f in enumerate(frames):
            if f.n_joints != n or f.bones != bones:
                raise ValueError(f"frame {k} topology differs from frame 0")
        object.__setattr__(self, "frames", frames)

    @property
    def bones(self) -> tuple[tuple[int, int], ...]:
        return self.frames[0].bones

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, k) -> Skeleton:
        return self.frames[k]

    def to_json(self) -> dict:
        return {
            "bones": [list(b) for b in self.bones],
            "frames": [f.joints.tolist() for f in self.frames],
        }

    @classmethod
    def from_json(cls, obj) -> "MotionSequence":
        try:
            bones = [tuple(b) for b in obj["bones"]]
            return cls(tuple(Skeleton(j, bones) for j in obj["frames"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed motion: {exc}", "schema") from exc


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})", "schema") from exc


def load_skeleton(path) -> Skeleton:
    return Skeleton.from_json(_read_json(path))


def save_skeleton(skeleton: Skeleton, path) -> None:
    Path(path).write_text(json.dumps(skeleton.to_json()))


def load_motion(path) -> MotionSequence:
    return MotionSequence.from_json(_read_json(path))


def save_motion(motion: MotionSequence, path) -> None:
    Path(path).write_text(json.dumps(motion.to_json()))


# -- projection ------------------------------------------------------------


def project_points(points, plane, bounds: WorldBounds, H: int, W: int) -> np.ndarray:
    """Map 3D points to continuous pixel coordinates (u, v) on ``plane``.

    The first kept axis runs along columns, the second along rows with row 0
    at the axis maximum.  Points outside the bounds land outside
    ``[0, W) x [0, H)``; nothing is clamped.
    """
    plane = as_plane(plane)
    if H < 2 or W < 2:
        raise ValueError("grid must be at least 2x2")
    p = np.asarray(points, dtype=np.float64)
    a, b = plane.axes
    lo, hi = bounds.lo, bounds.hi
    u = (p[..., a] - lo[a]) / (hi[a] - lo[a]) * W
    v = (hi[b] - p[..., b]) / (hi[b] - lo[b]) * H
    return np.stack([u, v], axis=-1)


def project(skeleton: Skeleton, plane, bounds: WorldBounds, H: int, W: int) -> np.ndarray:
    return project_points(skeleton.joints, plane, bounds, H, W)


# -- rasterization ---------------------------------------------------------


def default_joint_radius(H: int) -> float:
    return max(1.0, H / 64)


def default_bone_halfwidth(H: int) -> float:
    return max(0.5, H / 128)


@dataclass(eq=False)
class SkeletonEncoding:
    """Occupancy and index maps for the (XY, XZ, YZ) planes, each (3, H, W)."""

    occupancy: np.ndarray
    index: np.ndarray

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=np.uint8)
        self.index = np.asarray(self.index, dtype=np.float64)
        if self.occupancy.ndim != 3 or self.occupancy.shape[0] != 3:
            raise ValueError("encoding maps must have shape (3, H, W)")
        if self.index.shape != self.occupancy.shape:
            raise ValueError("occupancy and index shapes differ")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.occupancy.shape[1], self.occupancy.shape[2]

    def check(self) -> None:
        if np.any((self.index > 0) & (self.occupancy == 0)):
            raise ValueError("index support leaves occupancy support")
        if np.any((self.index < 0) | (self.index > 1)):
            raise ValueError("index values outside [0, 1]")


@dataclass(eq=False)
class HeatmapEncoding:
    """Gaussian joint heatmaps for the (XY, XZ, YZ) planes, shape (3, H, W)."""

    maps: np.ndarray

    @property
    def resolution(self) -> tuple[int, int]:
        return self.maps.shape[1], self.maps.shape[2]


def _pixel_centers(H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    pu = (np.arange(W, dtype=np.float64) + 0.5)[None, :]
    pv = (np.arange(H, dtype=np.float64) + 0.5)[:, None]
    return np.broadcast_to(pu, (H, W)), np.broadcast_to(pv, (H, W))


def _segment_dist2(pu, pv, au, av, bu, bv):
    du = bu - au
    dv = bv - av
    length2 = du * du + dv * dv
    if length2 == 0.0:
        t = 0.0
    else:
        t = np.clip(((pu - au) * du + (pv - av) * dv) / length2, 0.0, 1.0)
    eu = pu - (au + t * du)
    ev = pv - (av + t * dv)
    return eu * eu + ev * ev


def rasterize_encoding(
    skeleton: Skeleton,
    plane,
    bounds: WorldBounds,
    H: int,
    W: int,
    joint_radius_px: float | None = None,
    bone_halfwidth_px: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Occupancy (uint8) and index (float64) grids of shape (H, W).

    Overlaps resolve as: joints beat bones, lower joint index beats higher,
    and among bones the smallest ``(i + j, i)`` wins.
    """
    r = default_joint_radius(H) if joint_radius_px is None else float(joint_radius_px)
    hw = default_bone_halfwidth(H) if bone_halfwidth_px is None else float(bone_halfwidth_px)
    if r < 0.5 or hw < 0.5:
        raise ValueError("joint radius and bone half-width must be >= 0.5 px")
    n = skeleton.n_joints
    uv = project(skeleton, plane, bounds, H, W)
    pu, pv = _pixel_centers(H, W)
    occ = np.zeros((H, W), dtype=bool)
    index = np.zeros((H, W), dtype=np.float64)

    # painter's order: lowest-precedence primitive first, winners overwrite
    for i, j in sorted(skeleton.bones, key=lambda b: (b[0] + b[1], b[0]), reverse=True):
        hit = _segment_dist2(pu, pv, uv[i, 0], uv[i, 1], uv[j, 0], uv[j, 1]) <= hw * hw
        index[hit] = (i + j) / (2 * (n - 1))
        occ |= hit
    for i in reversed(range(n)):
        du = pu - uv[i, 0]
        dv = pv - uv[i, 1]
        hit = du * du + dv * dv <= r * r
        index[hit] = i / (n - 1)
        occ |= hit
    return occ.astype(np.uint8), index


def encode_skeleton(
    skeleton: Skeleton,
    bounds: WorldBounds,
    H: int,
    W: int,
    joint_radius_px: float | None = None,
    bone_halfwidth_px: float | None = None,
) -> SkeletonEncoding:
    occ, idx = zip(*(
        rasterize_encoding(skeleton, p, bounds, H, W, joint_radius_px, bone_halfwidth_px)
        for p in PLANES
    ))
    return SkeletonEncoding(np.stack(occ), np.stack(idx))


def encode_motion(motion: MotionSequence, bounds: WorldBounds, H: int, W: int, **params):
    return [encode_skeleton(f, bounds, H, W, **params) for f in motion.frames]


def encode_skeleton_heatmap(
    skeleton: Skeleton, bounds: WorldBounds, H: int, W: int, sigma_px: float
) -> HeatmapEncoding:
    """Per plane, the max over joints of an isotropic Gaussian; bones are ignored."""
    if not sigma_px > 0:
        raise ValueError("sigma_px must be positive")
    pu, pv = _pixel_centers(H, W)
    maps = np.zeros((3, H, W), dtype=np.float64)
    for k, plane in enumerate(PLANES):
        uv = project(skeleton, plane, bounds, H, W)
        for u, v in uv:
            d2 = (pu - u) ** 2 + (pv - v) ** 2
            np.maximum(maps[k], np.exp(-d2 / (2.0 * sigma_px**2)), out=maps[k])
    return HeatmapEncoding(maps)


def expand_to_channels(enc, C: int) -> np.ndarray:
    """Repeat the two maps into a (3, 2C, H, W) conditioning block.

    Channels ``[0, C)`` hold the occupancy map and ``[C, 2C)`` the index map.
    A heatmap encoding fills both blocks with its single map so that both
    variants present the same channel count to the denoiser.
    """
    if C < 1:
        raise ValueError("C must be >= 1")
    if isinstance(enc, HeatmapEncoding):
        first = second = enc.maps.astype(np.float32)
    else:
        first = enc.occupancy.astype(np.float32)
        second = enc.index.astype(np.float32)
    return np.concatenate(
        [np.repeat(first[:, None], C, axis=1), np.repeat(second[:, None], C, axis=1)], axis=1
    )


def encode(
    skeleton: Skeleton,
    bounds: WorldBounds,
    H: int,
    W: int,
    mode: str = "index",
    sigma_px: float | None = None,
    joint_radius_px: float | None = None,
    bone_halfwidth_px: float | None = None,
):
    """Dispatch on the encoding variant used to condition the denoiser."""
    if mode == "index":
        return encode_skeleton(skeleton, bounds, H, W, joint_radius_px, bone_halfwidth_px)
    if mode == "heatmap":
        sigma = default_joint_radius(H) if sigma_px is None else sigma_px
        return encode_skeleton_heatmap(skeleton, bounds, H, W, sigma)
    raise ValueError(f"unknown skeleton encoding {mode!r}")


def random_skeleton(rng: np.random.Generator, n_joints: int, half: float = 0.95) -> Skeleton:
    """Joints uniform inside ``[-half, half]^3`` connected by a random tree."""
    joints = rng.uniform(-half, half, size=(n_joints, 3))
    bones = [(int(rng.integers(0, k)), k) for k in range(1, n_joints)]
    return Skeleton(joints, bones)


def bone_lengths(skeleton: Skeleton) -> np.ndarray:
    j = skeleton.joints
    return np.array([np.linalg.norm(j[b] - j[a]) for a, b in skeleton.bones])
