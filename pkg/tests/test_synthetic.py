import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from triposer.errors import FormatError
from triposer.skeleton import Skeleton, WorldBounds, load_motion, save_motion
from triposer.synthetic import (
    HUMANOID_JOINTS, MOTION_STYLES, CapsuleCharacter, ground_truth_triplane, make_character,
    make_dataset, make_motion, motion_angles, pose_character, random_pose, read_manifest,
)
from triposer.triplane import load


def bone_lengths(skel, bones):
    return np.array([np.linalg.norm(skel.joints[i] - skel.joints[j]) for i, j in bones])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 24))
def test_fk_preserves_bone_lengths(seed, n):
    rng = np.random.default_rng(seed)
    char = make_character(rng, n)
    posed = pose_character(char, rng.uniform(-np.pi, np.pi, size=(n - 1, 3)))
    rest = bone_lengths(char.skeleton, char.skeleton.bones)
    assert np.abs(bone_lengths(posed, posed.bones) - rest).max() <= 1e-9
    assert np.array_equal(posed.joints[0], char.skeleton.joints[0])


def test_zero_pose_is_rest_bitwise():
    for n in (2, 7, 16):
        char = make_character(np.random.default_rng(n), n)
        posed = pose_character(char, np.zeros((n - 1, 3)))
        assert np.array_equal(posed.joints, char.skeleton.joints)


def test_pi_rotation_reflects_child():
    skel = Skeleton(np.array([[0.0, 0.0, 0.0], [0.0, 0.5, 0.0]]), [(0, 1)])
    char = CapsuleCharacter(skel, [0.05], [[1.0, 0.0, 0.0]])
    posed = pose_character(char, [[np.pi, 0.0, 0.0]])
    assert np.allclose(posed.joints[1], [0.0, -0.5, 0.0], atol=1e-12)


def test_pose_rejects_nonfinite():
    char = make_character(np.random.default_rng(0), 3)
    with pytest.raises(ValueError):
        pose_character(char, [[np.nan, 0, 0], [0, 0, 0]])


def test_humanoid_layout():
    char = make_character(np.random.default_rng(0))
    assert char.is_humanoid and len(char.skeleton.bones) == 15
    assert char.skeleton.n_joints == len(HUMANOID_JOINTS)
    assert np.all(np.abs(char.skeleton.joints) + char.bone_radii.max() <= 1.0)
    # T-pose arms are horizontal and mirror-symmetric
    J = char.skeleton.joints
    l, r = HUMANOID_JOINTS.index("l_hand"), HUMANOID_JOINTS.index("r_hand")
    assert np.allclose(J[l] * [-1, 1, 1], J[r])


def test_character_validation():
    skel = Skeleton(np.zeros((2, 3)), [(0, 1)])
    with pytest.raises(ValueError):
        CapsuleCharacter(skel, [-0.1], [[0, 0, 0]])
    with pytest.raises(ValueError):
        CapsuleCharacter(skel, [0.1], [[0, 0, 2.0]])
    char = make_character(np.random.default_rng(3), 5)
    back = CapsuleCharacter.from_json(json.loads(json.dumps(char.to_json())))
    assert np.array_equal(back.skeleton.joints, char.skeleton.joints) and back.parents == char.parents


def test_random_pose_in_bounds():
    for s in range(10):
        rng = np.random.default_rng(s)
        char = make_character(rng)
        posed = pose_character(char, random_pose(char, rng))
        assert np.all(np.abs(posed.joints) + char.bone_radii.max() <= 0.92)


def test_ground_truth_matches_oracle():
    skel = Skeleton(np.array([[-0.4, -0.2, 0.1], [0.1, 0.3, -0.2], [0.5, 0.0, 0.4]]), [(0, 1), (1, 2)])
    char = CapsuleCharacter(skel, [0.08, 0.05], [[0.9, 0.1, 0.1], [0.1, 0.2, 0.8]])
    bounds = WorldBounds()
    C, H, W = 5, 32, 32
    tri = ground_truth_triplane(char, skel, C, H, W, bounds)
    tau = 2.0 * 2.0 / 32
    for pi in range(3):
        geo, col = oracles.capsule_plane_grid(skel.joints.tolist(), [(0, 1), (1, 2)], [0.08, 0.05],
                                              char.bone_colors.tolist(), pi, bounds.lo, bounds.hi,
                                              H, W, C, tau)
        assert np.abs(tri.geometry[pi] - geo).max() <= 1e-6  # stored as float32
        assert np.array_equal(tri.color[pi], col.astype(np.float32))


def test_ground_truth_value_ranges():
    char = make_character(np.random.default_rng(0))
    tri = ground_truth_triplane(char, char.skeleton, 4, 32, 32)
    g0 = tri.geometry[:, 0]
    assert g0.min() == 0.0 and g0.max() == 1.0
    assert np.all(np.abs(tri.geometry) <= 1.0) and np.all((tri.color >= 0) & (tri.color <= 1))
    assert not tri.color[:, 3:].any()
    with pytest.raises(ValueError):
        ground_truth_triplane(char, char.skeleton, 3, 32, 32)


def test_dataset_count_and_reproducibility(tmp_path):
    samples, manifest = make_dataset(3, 2, C=4, H=16, seed=5, out_dir=tmp_path)
    assert len(samples) == 6 == len(manifest["samples"])
    again, _ = make_dataset(3, 2, C=4, H=16, seed=5)
    for a, b in zip(samples, again):
        assert np.array_equal(a.target_triplane.geometry, b.target_triplane.geometry)
        assert np.array_equal(a.target_skeleton.joints, b.target_skeleton.joints)
    other, _ = make_dataset(3, 2, C=4, H=16, seed=6)
    assert not np.array_equal(samples[0].target_triplane.geometry, other[0].target_triplane.geometry)
    assert read_manifest(tmp_path / "manifest.json") == json.loads(json.dumps(manifest))
    e = manifest["samples"][3]
    assert np.array_equal(load(tmp_path / e["target"]).geometry, samples[3].target_triplane.geometry)


def test_pose_offset_gives_disjoint_poses():
    a, _ = make_dataset(1, 2, C=4, H=16, seed=0)
    b, _ = make_dataset(1, 2, C=4, H=16, seed=0, pose_offset=2)
    c, _ = make_dataset(1, 4, C=4, H=16, seed=0)
    assert np.array_equal(b[0].target_skeleton.joints, c[2].target_skeleton.joints)
    assert not np.array_equal(a[0].target_skeleton.joints, b[0].target_skeleton.joints)


def test_manifest_errors(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"format": "x", "version": 1}))
    with pytest.raises(FormatError) as info:
        read_manifest(p)
    assert info.value.reason == "magic"
    p.write_text("{")
    with pytest.raises(FormatError):
        read_manifest(p)


@pytest.mark.parametrize("style", MOTION_STYLES)
def test_motion_frames(style, tmp_path):
    char = make_motion_char = make_character(np.random.default_rng(1))
    one = make_motion(char, 1, style)
    assert len(one) == 1 and np.array_equal(one.frames[0].joints, char.skeleton.joints)
    m = make_motion(make_motion_char, 14, style, seed=2)
    J = np.stack([f.joints for f in m.frames])
    assert len(m) == 14
    assert np.linalg.norm(np.diff(J, axis=0), axis=-1).max() < 0.25
    assert np.abs(J).max() < 1.0
    save_motion(m, tmp_path / "m.json")
    back = load_motion(tmp_path / "m.json")
    assert all(np.array_equal(a.joints, b.joints) for a, b in zip(m.frames, back.frames))


def test_motion_validation():
    char = make_character(np.random.default_rng(0), 5)
    with pytest.raises(ValueError):
        motion_angles(char, 0, "walk")
    with pytest.raises(ValueError):
        motion_angles(char, 3, "dance")
    assert len(make_motion(char, 6, "wave")) == 6
