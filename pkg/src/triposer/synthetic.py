"""Procedural capsule characters with analytically known triplanes.

Every character is a bone tree rooted at joint 0 whose bodies are capsules
(a segment dilated by a per-bone radius).  Posing is plain forward
kinematics with one axis-angle rotation per bone.  Ground-truth triplanes are
rasterized from the projected capsules so training targets are exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .skeleton import PLANES, MotionSequence, Skeleton, WorldBounds, save_skeleton
from .triplane import Triplane, save

HUMANOID_JOINTS = (
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_hand",
    "r_shoulder", "r_elbow", "r_hand",
    "l_hip", "l_knee", "l_foot",
    "r_hip", "r_knee", "r_foot",
)
HUMANOID_PARENTS = (-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14)

DATASET_FORMAT = "triposer-dataset"
DATASET_VERSION = 1
MOTION_STYLES = ("walk", "wave", "spin")


@dataclass(eq=False)
class CapsuleCharacter:
    skeleton: Skeleton
    bone_radii: np.ndarray
    bone_colors: np.ndarray
    identity: int = 0
    parents: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.bone_radii = np.asarray(self.bone_radii, dtype=np.float64)
        self.bone_colors = np.asarray(self.bone_colors, dtype=np.float64)
        nb = len(self.skeleton.bones)
        if self.bone_radii.shape != (nb,) or np.any(self.bone_radii <= 0):
            raise ValueError("need one positive radius per bone")
        if self.bone_colors.shape != (nb, 3) or np.any((self.bone_colors < 0) | (self.bone_colors > 1)):
            raise ValueError("need one RGB color in [0, 1] per bone")
        if not self.parents:
            self.parents = _parents_from_bones(self.skeleton.bones, self.skeleton.n_joints)

    @property
    def is_humanoid(self) -> bool:
        return self.skeleton.n_joints == len(HUMANOID_JOINTS) and self.parents == HUMANOID_PARENTS

    def bone_of_child(self) -> dict[int, int]:
        """Map child joint -> index of the bone ending there."""
        out = {}
        for k, (i, j) in enumerate(self.skeleton.bones):
            child = j if self.parents[j] == i else i
            out[child] = k
        return out

    def to_json(self) -> dict:
        return {
            "identity": self.identity,
            "skeleton": self.skeleton.to_json(),
            "parents": list(self.parents),
            "bone_radii": self.bone_radii.tolist(),
            "bone_colors": self.bone_colors.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "CapsuleCharacter":
        return cls(Skeleton.from_json(d["skeleton"]), d["bone_radii"], d["bone_colors"],
                   d.get("identity", 0), tuple(d.get("parents", ())))


def _parents_from_bones(bones, n: int) -> tuple[int, ...]:
    adj = {k: [] for k in range(n)}
    for i, j in bones:
        adj[i].append(j)
        adj[j].append(i)
    parents = [-2] * n
    parents[0] = -1
    stack = [0]
    while stack:
        a = stack.pop()
        for b in adj[a]:
            if parents[b] == -2:
                parents[b] = a
                stack.append(b)
    if -2 in parents or len(bones) != n - 1:
        raise ValueError("bones must form a tree spanning every joint")
    return tuple(parents)


def _distinct_colors(rng: np.random.Generator, n: int, min_dist: float = 0.15) -> np.ndarray:
    colors: list[np.ndarray] = []
    while len(colors) < n:
        c = rng.uniform(0.15, 1.0, size=3)
        if all(np.linalg.norm(c - o) >= min_dist for o in colors) or len(colors) > 200:
            colors.append(c)
    return np.array(colors)


def _humanoid_rest(rng: np.random.Generator) -> np.ndarray:
    torso = rng.uniform(0.9, 1.05)
    arm = rng.uniform(0.85, 1.05)
    leg = rng.uniform(0.85, 1.05)
    shoulder = rng.uniform(0.14, 0.2)
    hip = rng.uniform(0.09, 0.14)
    pelvis_y = -0.05
    spine_y = pelvis_y + 0.25 * torso
    neck_y = spine_y + 0.25 * torso
    head_y = neck_y + 0.18 * torso
    arm_y = neck_y - 0.03
    j = np.zeros((16, 3))
    j[0] = (0, pelvis_y, 0)
    j[1] = (0, spine_y, 0)
    j[2] = (0, neck_y, 0)
    j[3] = (0, head_y, 0)
    for side, base in ((1.0, 4), (-1.0, 7)):
        j[base] = (side * shoulder, arm_y, 0)
        j[base + 1] = (side * (shoulder + 0.27 * arm), arm_y, 0)
        j[base + 2] = (side * (shoulder + 0.54 * arm), arm_y, 0)
    for side, base in ((1.0, 10), (-1.0, 13)):
        j[base] = (side * hip, pelvis_y - 0.05, 0)
        j[base + 1] = (side * hip, pelvis_y - 0.05 - 0.35 * leg, 0)
        j[base + 2] = (side * hip, pelvis_y - 0.05 - 0.7 * leg, 0)
    return j


def make_character(rng: np.random.Generator, n_joints: int = 16, identity: int = 0) -> CapsuleCharacter:
    """Humanoid T-pose for 16 joints, otherwise a random tree inside [-0.9, 0.9]^3."""
    if n_joints < 2:
        raise ValueError("n_joints must be >= 2")
    if n_joints == len(HUMANOID_JOINTS):
        joints = _humanoid_rest(rng)
        parents = HUMANOID_PARENTS
    else:
        parents = (-1,) + tuple(int(rng.integers(0, k)) for k in range(1, n_joints))
        joints = np.zeros((n_joints, 3))
        step = 0.9 / max(1.0, np.sqrt(n_joints))
        for k in range(1, n_joints):
            d = rng.normal(size=3)
            joints[k] = joints[parents[k]] + step * d / np.linalg.norm(d)
        joints -= joints.mean(axis=0)
        peak = np.abs(joints).max()
        if peak > 0.9:
            joints *= 0.9 / peak
    bones = [(parents[k], k) for k in range(1, n_joints)]
    skel = Skeleton(joints, bones)
    nb = len(skel.bones)
    return CapsuleCharacter(
        skel, rng.uniform(0.03, 0.08, size=nb), _distinct_colors(rng, nb), identity, parents
    )


def pose_character(char: CapsuleCharacter, pose_params) -> Skeleton:
    """Forward kinematics: bone k rotates by ``pose_params[k]`` (axis-angle) about its parent joint.

    Rotations accumulate down the tree; the root joint never moves and bone
    lengths are preserved.  Subtrees with no accumulated rotation keep their
    rest coordinates bit for bit.
    """
    rest = char.skeleton.joints
    angles = np.asarray(pose_params, dtype=np.float64).reshape(len(char.skeleton.bones), 3)
    if not np.all(np.isfinite(angles)):
        raise ValueError("pose angles must be finite")
    n = rest.shape[0]
    bone_of = char.bone_of_child()
    eye = np.eye(3)
    R = [eye] * n  # accumulated rotation of the bone ending at each joint; identity at the root
    moved = [False] * n
    out = rest.copy()
    for child in _topological(char.parents):
        p = char.parents[child]
        if p < 0:
            continue
        local = Rotation.from_rotvec(angles[bone_of[child]]).as_matrix()
        Rc = R[p] @ local
        R[child] = Rc
        if not moved[p] and np.array_equal(Rc, eye):
            continue
        out[child] = out[p] + Rc @ (rest[child] - rest[p])
        moved[child] = True
    return Skeleton(out, char.skeleton.bones)


def _topological(parents) -> list[int]:
    order, seen = [], set()

    def visit(k):
        if k in seen:
            return
        if parents[k] >= 0:
            visit(parents[k])
        seen.add(k)
        order.append(k)

    for k in range(len(parents)):
        visit(k)
    return order


# -- ground-truth triplanes ------------------------------------------------


def _plane_pixel_world(plane, bounds: WorldBounds, H: int, W: int):
    a, b = plane.axes
    lo, hi = bounds.lo, bounds.hi
    wa = lo[a] + (np.arange(W) + 0.5) / W * (hi[a] - lo[a])
    wb = hi[b] - (np.arange(H) + 0.5) / H * (hi[b] - lo[b])
    return np.broadcast_to(wa[None, :], (H, W)), np.broadcast_to(wb[:, None], (H, W))


def smoothing_band(bounds: WorldBounds, H: int, W: int) -> float:
    """Two pixels in world units (the smaller pixel extent over all axes)."""
    size = bounds.size
    return 2.0 * float(min(size.min() / W, size.min() / H))


def positional_channel(k: int, s):
    """Recipe for geometry channel ``k >= 1``: alternating sin/cos of the arclength fraction."""
    freq = (k + 1) // 2
    return np.sin(freq * np.pi * s) if k % 2 else np.cos(freq * np.pi * s)


def ground_truth_triplane(char: CapsuleCharacter, posed: Skeleton, C: int, H: int, W: int,
                          bounds: WorldBounds | None = None) -> Triplane:
    """Analytic triplane of the posed capsule body.

    Geometry channel 0 is a clamped signed-distance ramp to the nearest
    projected capsule (1 inside, 0 beyond two pixels); channels ``1..C-1``
    carry :func:`positional_channel` of the arclength fraction along the
    nearest bone, scaled by channel 0.  Color channels 0..2 hold the nearest
    bone's RGB wherever channel 0 is positive.
    """
    if C < 4:
        raise ValueError("ground-truth triplanes need C >= 4")
    bounds = bounds or WorldBounds()
    tau = smoothing_band(bounds, H, W)
    bone_of = char.bone_of_child()
    # orient every bone parent -> child so the arclength fraction starts at the parent
    segs = [None] * len(posed.bones)
    for child, k in bone_of.items():
        segs[k] = (char.parents[child], child)
    geometry = np.zeros((3, C, H, W))
    color = np.zeros((3, C, H, W))
    for pi, plane in enumerate(PLANES):
        a, b = plane.axes
        pa, pb = _plane_pixel_world(plane, bounds, H, W)
        best = np.full((H, W), np.inf)
        best_s = np.zeros((H, W))
        best_k = np.zeros((H, W), dtype=np.int64)
        for k, (i, j) in enumerate(segs):
            ax, ay = posed.joints[i, a], posed.joints[i, b]
            bx, by = posed.joints[j, a], posed.joints[j, b]
            dx, dy = bx - ax, by - ay
            length2 = dx * dx + dy * dy
            if length2 == 0.0:
                s = np.zeros((H, W))
            else:
                s = np.clip(((pa - ax) * dx + (pb - ay) * dy) / length2, 0.0, 1.0)
            ex = pa - (ax + s * dx)
            ey = pb - (ay + s * dy)
            d = np.sqrt(ex * ex + ey * ey) - char.bone_radii[k]
            closer = d < best
            best = np.where(closer, d, best)
            best_s = np.where(closer, s, best_s)
            best_k = np.where(closer, k, best_k)
        g0 = np.clip(1.0 - best / tau, 0.0, 1.0)
        geometry[pi, 0] = g0
        for c in range(1, C):
            geometry[pi, c] = g0 * positional_channel(c, best_s)
        on = g0 > 0
        for c in range(3):
            color[pi, c] = np.where(on, char.bone_colors[best_k, c], 0.0)
    return Triplane(geometry, color, bounds)


# -- poses, motions and datasets -------------------------------------------


def _pose_limits(char: CapsuleCharacter) -> np.ndarray:
    limits = np.full(len(char.skeleton.bones), 0.8)
    if char.is_humanoid:
        bone_of = char.bone_of_child()
        for joint in ("spine", "neck", "head", "l_shoulder", "r_shoulder", "l_hip", "r_hip"):
            limits[bone_of[HUMANOID_JOINTS.index(joint)]] = 0.3
    return limits


def random_pose(char: CapsuleCharacter, rng: np.random.Generator, scale: float = 1.0,
                margin: float = 0.92, max_tries: int = 100) -> np.ndarray:
    """Per-bone axis-angle rotations with bounded magnitude, resampled until the pose stays inside ``[-margin, margin]^3``."""
    limits = _pose_limits(char) * scale
    for _ in range(max_tries):
        axes = rng.normal(size=(len(limits), 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        angles = axes * (rng.uniform(0.0, 1.0, size=len(limits)) * limits)[:, None]
        posed = pose_character(char, angles)
        if np.all(np.abs(posed.joints) + char.bone_radii.max() <= margin):
            return angles
    raise RuntimeError("could not sample an in-bounds pose")


@dataclass(eq=False)
class DatasetSample:
    init_triplane: Triplane
    target_triplane: Triplane
    target_skeleton: Skeleton
    character: int
    pose: int

    @property
    def target_encoding(self):
        from .skeleton import encode_skeleton

        H, W = self.target_triplane.resolution
        return encode_skeleton(self.target_skeleton, self.target_triplane.bounds, H, W)


def character_rng(seed: int, c: int) -> np.random.Generator:
    return np.random.default_rng([seed, c])


def pose_rng(seed: int, c: int, p: int) -> np.random.Generator:
    return np.random.default_rng([seed, c, p + 1])


def make_dataset(n_chars: int, n_poses: int, C: int = 4, H: int = 32, W: int | None = None,
                 seed: int = 0, out_dir=None, n_joints: int = 16, bounds: WorldBounds | None = None,
                 pose_offset: int = 0) -> tuple[list[DatasetSample], dict]:
    """Characters x poses with T-pose init triplanes; optionally written to ``out_dir``.

    ``pose_offset`` shifts the pose streams so held-out poses can be drawn
    from the same characters without colliding with the training poses.
    """
    if n_chars < 1 or n_poses < 1:
        raise ValueError("n_chars and n_poses must be >= 1")
    W = H if W is None else W
    bounds = bounds or WorldBounds()
    samples, entries, characters = [], [], []
    g_min, g_max = np.inf, -np.inf
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for c in range(n_chars):
        char = make_character(character_rng(seed, c), n_joints, identity=c)
        init = ground_truth_triplane(char, char.skeleton, C, H, W, bounds)
        characters.append(char)
        init_name = f"char{c:04d}_init.trpl"
        if out is not None:
            save(init, out / init_name)
            (out / f"char{c:04d}.json").write_text(json.dumps(char.to_json()))
        for p in range(pose_offset, pose_offset + n_poses):
            posed = pose_character(char, random_pose(char, pose_rng(seed, c, p)))
            target = ground_truth_triplane(char, posed, C, H, W, bounds)
            g_min = min(g_min, float(target.geometry.min()))
            g_max = max(g_max, float(target.geometry.max()))
            samples.append(DatasetSample(init, target, posed, c, p))
            stem = f"char{c:04d}_pose{p:04d}"
            entries.append({
                "character": c, "pose": p, "init": init_name,
                "target": stem + ".trpl", "skeleton": stem + ".json",
            })
            if out is not None:
                save(target, out / (stem + ".trpl"))
                save_skeleton(posed, out / (stem + ".json"))
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "seed": int(seed),
        "params": {
            "n_chars": n_chars, "n_poses": n_poses, "C": C, "H": H, "W": W,
            "n_joints": n_joints, "bounds": bounds.to_list(), "pose_offset": pose_offset,
        },
        "value_ranges": {"geometry": [g_min, g_max], "color": [0.0, 1.0]},
        "samples": entries,
    }
    if out is not None:
        write_manifest(manifest, out / "manifest.json")
    return samples, manifest


def dataset_size(n_chars: int, n_poses: int) -> int:
    return n_chars * n_poses


def write_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    from .errors import FormatError

    try:
        manifest = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot read dataset manifest ({exc})", "schema") from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: not a dataset manifest", "magic")
    if manifest.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version", "version")
    return manifest


def _smoothstep_ramp(x):
    """0 at x=0, 1 at x=1, zero slope at both ends."""
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def motion_angles(char: CapsuleCharacter, K: int, style: str, seed: int = 0, period: float = 14.0) -> np.ndarray:
    """(K, n_bones, 3) angle trajectories; frame 0 is all zeros."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if style not in MOTION_STYLES:
        raise ValueError(f"style must be one of {MOTION_STYLES}")
    rng = np.random.default_rng([seed, 7])
    nb = len(char.skeleton.bones)
    k = np.arange(K, dtype=np.float64)
    w = 2.0 * np.pi / period
    angles = np.zeros((K, nb, 3))
    amp = rng.uniform(0.85, 1.15)
    if not char.is_humanoid:
        axes = rng.normal(size=(nb, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        base = {"walk": 0.4, "wave": 0.6, "spin": 0.25}[style]
        angles[:] = (amp * base * np.sin(w * k))[:, None, None] * axes[None]
        return angles
    bone = {name: char.bone_of_child()[HUMANOID_JOINTS.index(name)] for name in HUMANOID_JOINTS[1:]}
    s = np.sin(w * k)
    if style == "walk":
        angles[:, bone["l_knee"], 0] = amp * 0.45 * s
        angles[:, bone["r_knee"], 0] = -amp * 0.45 * s
        angles[:, bone["l_foot"], 0] = -amp * 0.3 * np.sin(w * k) ** 2
        angles[:, bone["r_foot"], 0] = -amp * 0.3 * np.sin(w * k) ** 2
        angles[:, bone["l_elbow"], 1] = amp * 0.35 * s
        angles[:, bone["r_elbow"], 1] = amp * 0.35 * s
    elif style == "wave":
        raise_ = _smoothstep_ramp(k / max(1.0, period / 2))
        angles[:, bone["r_elbow"], 2] = -amp * 1.2 * raise_
        angles[:, bone["r_hand"], 2] = -amp * 0.6 * s
    else:  # spin: the whole body turns about the vertical axis through the pelvis
        theta = amp * w * 0.5 * k
        for name in ("spine", "l_hip", "r_hip"):
            angles[:, bone[name], 1] = theta
    return angles


def make_motion(char: CapsuleCharacter, K: int = 14, style: str = "walk", seed: int = 0) -> MotionSequence:
    angles = motion_angles(char, K, style, seed)
    return MotionSequence(tuple(pose_character(char, a) for a in angles))
