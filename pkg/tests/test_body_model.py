import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaithealth import body_model as bm


def chain_tree(n_bones=2, blend=None):
    """Straight chain along +x with unit bones."""
    n = n_bones + 1
    parent = [-1] + list(range(n_bones))
    dirs = np.tile([1.0, 0, 0], (n, 1))
    base = np.array([0.0] + [1.0] * n_bones)
    blend = np.zeros((n, bm.SHAPE_DIM)) if blend is None else blend
    return bm.KinematicTree(parent, dirs, base, blend)


def params_for(tree, pose=None, shape=None, camera=(1.0, 0.0, 0.0)):
    pose = np.zeros((tree.joint_count, 3)) if pose is None else pose
    shape = np.zeros(bm.SHAPE_DIM) if shape is None else shape
    return bm.BodyParams(shape, pose, camera)


def rot_matrix(axis_angle):
    """Independent Rodrigues via the matrix exponential series."""
    w = np.asarray(axis_angle, dtype=np.float64)
    k = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    out, term = np.eye(3), np.eye(3)
    for n in range(1, 40):
        term = term @ k / n
        out = out + term
    return out


def naive_fk(tree, params):
    lengths = [tree.rest_lengths_base[i] + sum(tree.length_blend[i, k] * params.shape[k]
                                               for k in range(bm.SHAPE_DIM))
               for i in range(tree.joint_count)]
    joints = {}

    def global_rot(i):
        chain = []
        while i >= 0:
            chain.append(i)
            i = tree.parent[i]
        r = np.eye(3)
        for j in reversed(chain):
            r = r @ rot_matrix(params.pose[j])
        return r

    for i in range(tree.joint_count):
        path, j = [], i
        while j >= 0:
            path.append(j)
            j = tree.parent[j]
        pos = np.zeros(3)
        for j in reversed(path):
            p = tree.parent[j]
            if p >= 0:
                pos = pos + global_rot(p) @ (max(lengths[j], bm.MIN_BONE_LENGTH) * tree.rest_directions[j])
        joints[i] = pos
    return np.array([joints[i] for i in range(tree.joint_count)])


@pytest.fixture(scope="module")
def tree():
    return bm.smpl_tree()


def random_params(rng, tree, scale=0.6):
    return params_for(tree, rng.normal(scale=scale, size=(tree.joint_count, 3)), rng.normal(size=bm.SHAPE_DIM))


def test_tree_invariants(tree):
    assert tree.joint_count == 24
    assert (tree.parent < 0).sum() == 1
    assert np.allclose(np.linalg.norm(tree.rest_directions, axis=1), 1.0, atol=1e-9)
    assert len(tree.bones) == 23


def test_tree_rejects_cycles():
    with pytest.raises(bm.InvalidInputError):
        bm.KinematicTree([-1, 2, 1], np.tile([1.0, 0, 0], (3, 1)), np.ones(3), np.zeros((3, 10)))


def test_tree_json_roundtrip(tree):
    back = bm.KinematicTree.from_json(tree.to_json())
    assert json.loads(tree.to_json())["version"] == bm.TREE_FORMAT_VERSION
    np.testing.assert_array_equal(back.parent, tree.parent)
    np.testing.assert_array_equal(back.length_blend, tree.length_blend)
    np.testing.assert_array_equal(back.rest_directions, tree.rest_directions)


def test_bone_lengths_zero_shape(tree):
    lengths = bm.bone_lengths(tree, np.zeros(10))
    np.testing.assert_array_equal(lengths, tree.rest_lengths_base)


def test_bone_lengths_unit_blend_grows_one_cm():
    blend = np.zeros((3, 10))
    blend[:, 0] = 0.01
    t = chain_tree(2, blend)
    lengths = bm.bone_lengths(t, np.eye(10)[0])
    np.testing.assert_allclose(lengths, [0.0, 1.01, 1.01], atol=1e-15)


def test_bone_lengths_random_matches_dot_products(tree):
    rng = np.random.default_rng(3)
    for _ in range(20):
        shape = rng.normal(size=10)
        expected = []
        for i in range(24):
            v = tree.rest_lengths_base[i]
            for k in range(10):
                v += tree.length_blend[i, k] * shape[k]
            expected.append(0.0 if i == tree.root else max(v, 1e-3))
        np.testing.assert_allclose(bm.bone_lengths(tree, shape), expected, rtol=0, atol=1e-12)


def test_bone_lengths_reject_nonfinite(tree):
    with pytest.raises(bm.InvalidInputError):
        bm.bone_lengths(tree, np.full(10, np.nan))


def test_fk_zero_pose_is_rest_template(tree):
    joints = bm.forward_kinematics(tree, params_for(tree))
    np.testing.assert_allclose(joints, bm.rest_joints(tree), atol=1e-12)
    assert np.all(joints[0] == 0)


def test_fk_root_half_turn_negates_horizontal(tree):
    pose = np.zeros((24, 3))
    pose[0] = [0, np.pi, 0]
    rest = bm.rest_joints(tree)
    turned = bm.forward_kinematics(tree, params_for(tree, pose))
    np.testing.assert_allclose(turned[:, [0, 2]], -rest[:, [0, 2]], atol=1e-12)
    np.testing.assert_allclose(turned[:, 1], rest[:, 1], atol=1e-12)


def test_fk_two_bone_right_angle():
    t = chain_tree(2)
    pose = np.zeros((3, 3))
    pose[1] = [0, 0, np.pi / 2]  # bend about z at the middle joint
    joints = bm.forward_kinematics(t, params_for(t, pose))
    # first bone along x to (1,0,0); second bone rotated +90 deg about z -> +y
    np.testing.assert_allclose(joints, [[0, 0, 0], [1, 0, 0], [1, 1, 0]], atol=1e-12)


def test_fk_matches_naive_oracle(tree):
    rng = np.random.default_rng(0)
    for _ in range(5):
        p = random_params(rng, tree)
        np.testing.assert_allclose(bm.forward_kinematics(tree, p), naive_fk(tree, p), atol=1e-10)


def test_fk_small_angle_branch_is_finite(tree):
    pose = np.full((24, 3), 1e-10)
    joints = bm.forward_kinematics(tree, params_for(tree, pose))
    np.testing.assert_allclose(joints, bm.rest_joints(tree), atol=1e-8)


def test_fk_preserves_bone_lengths_sweep(tree):
    rng = np.random.default_rng(1)
    child = [c for _, c in tree.bones]
    par = [p for p, _ in tree.bones]
    for _ in range(200):
        p = random_params(rng, tree, scale=1.0)
        joints = bm.forward_kinematics(tree, p)
        measured = np.linalg.norm(joints[child] - joints[par], axis=1)
        np.testing.assert_allclose(measured, bm.bone_lengths(tree, p.shape)[child], atol=1e-6)


def test_fk_continuity(tree):
    rng = np.random.default_rng(2)
    p = random_params(rng, tree)
    delta = rng.normal(size=(24, 3))
    delta *= 1e-6 / np.linalg.norm(delta)
    q = params_for(tree, p.pose + delta, p.shape)
    moved = np.linalg.norm(bm.forward_kinematics(tree, q) - bm.forward_kinematics(tree, p), axis=1)
    bound = bm.total_limb_length(bm.forward_kinematics(tree, p), tree) * 1e-6 + 1e-9
    assert moved.max() <= bound


def test_invalid_params_rejected(tree):
    with pytest.raises(bm.InvalidInputError):
        bm.forward_kinematics(tree, params_for(tree, camera=(0.0, 0, 0)))
    pose = np.zeros((24, 3))
    pose[3] = [7.0, 0, 0]
    with pytest.raises(bm.InvalidInputError):
        bm.forward_kinematics(tree, params_for(tree, pose))


def test_surface_points_count_and_rest_placement(tree):
    pts = bm.surface_points(tree, params_for(tree))
    assert pts.shape == (120, 3)
    rest = bm.rest_joints(tree)
    # every point sits 3 cm from its rest bone segment
    for i in range(24):
        p = tree.parent[i]
        a = rest[p] if p >= 0 else rest[i]
        b = rest[i]
        for q in pts[5 * i:5 * i + 5]:
            ab = b - a
            t = 0.0 if ab @ ab == 0 else np.clip((q - a) @ ab / (ab @ ab), 0, 1)
            assert np.linalg.norm(q - (a + t * ab)) == pytest.approx(bm.SURFACE_OFFSET, abs=1e-12)


def test_surface_points_naive_loop(tree):
    rng = np.random.default_rng(5)
    p = random_params(rng, tree)
    joints = naive_fk(tree, p)
    basis = tree.surface_basis()
    expected = []
    for i in range(24):
        par = tree.parent[i]
        if par < 0:
            rot, start = rot_matrix(p.pose[i]), joints[i]
        else:
            path, j = [], par
            while j >= 0:
                path.append(j)
                j = tree.parent[j]
            rot = np.eye(3)
            for j in reversed(path):
                rot = rot @ rot_matrix(p.pose[j])
            start = joints[par]
        for k in range(5):
            f = (k + 0.5) / 5
            expected.append(start + f * (joints[i] - start) + 0.03 * rot @ basis[i, k])
    np.testing.assert_allclose(bm.surface_points(tree, p), expected, atol=1e-10)


def test_surface_points_rigid_rotation_isometry(tree):
    rng = np.random.default_rng(6)
    p = random_params(rng, tree)
    pose = p.pose.copy()
    pose[0] = [0, 0, 0]
    a = bm.surface_points(tree, params_for(tree, pose, p.shape))
    pose[0] = [0.3, -1.1, 0.7]
    b = bm.surface_points(tree, params_for(tree, pose, p.shape))
    da = np.linalg.norm(a[:, None] - a[None], axis=-1)
    db = np.linalg.norm(b[:, None] - b[None], axis=-1)
    np.testing.assert_allclose(da, db, atol=1e-9)


def test_surface_points_bit_reproducible(tree):
    a = bm.surface_points(tree, params_for(tree))
    b = bm.surface_points(bm.smpl_tree(), params_for(tree))
    assert a.tobytes() == b.tobytes()


def test_total_limb_length_chain():
    t = chain_tree(2)
    assert bm.total_limb_length(bm.forward_kinematics(t, params_for(t)), t) == pytest.approx(2.0)


def test_total_limb_length_zero_pose_equals_bone_sum(tree):
    joints = bm.rest_joints(tree)
    assert bm.total_limb_length(joints, tree) == pytest.approx(bm.bone_lengths(tree, np.zeros(10)).sum(), abs=1e-12)


def test_total_limb_length_random_pose(tree):
    rng = np.random.default_rng(7)
    for _ in range(20):
        p = random_params(rng, tree, 1.0)
        got = bm.total_limb_length(bm.forward_kinematics(tree, p), tree)
        assert got == pytest.approx(bm.bone_lengths(tree, p.shape).sum(), abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_total_limb_length_rigid_invariance(aa, shift):
    tree = bm.smpl_tree()
    joints = bm.forward_kinematics(tree, random_params(np.random.default_rng(8), tree))
    moved = joints @ rot_matrix(aa).T + np.array(shift)
    a, b = bm.total_limb_length(joints, tree), bm.total_limb_length(moved, tree)
    assert abs(a - b) <= 1e-9 * a


def test_project_identity_camera(tree):
    joints = bm.rest_joints(tree)
    np.testing.assert_array_equal(bm.project_weak_perspective(joints, [1, 0, 0]), joints[:, :2])


def test_project_scale_doubles_distances(tree):
    joints = bm.forward_kinematics(tree, random_params(np.random.default_rng(9), tree))
    a = bm.project_weak_perspective(joints, [1, 0.2, -0.1])
    b = bm.project_weak_perspective(joints, [2, 0.2, -0.1])
    da = np.linalg.norm(a[:, None] - a[None], axis=-1)
    db = np.linalg.norm(b[:, None] - b[None], axis=-1)
    np.testing.assert_allclose(db, 2 * da, atol=1e-12)


def test_project_matches_scalar_oracle(tree):
    rng = np.random.default_rng(10)
    joints = bm.forward_kinematics(tree, random_params(rng, tree))
    cam = [rng.uniform(0.5, 2), rng.normal(), rng.normal()]
    got = bm.project_weak_perspective(joints, cam)
    for j in range(24):
        assert got[j, 0] == pytest.approx(cam[0] * joints[j, 0] + cam[1], abs=1e-14)
        assert got[j, 1] == pytest.approx(cam[0] * joints[j, 1] + cam[2], abs=1e-14)
