import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from graph_retarget.kinematics import (KinematicsError, PoseState, axis_angle_to_matrix,
                                       fk_tokens, forward_kinematics, leg_length,
                                       rewrite_from_fk, rot_axis_angle, scaled_reference_positions,
                                       scaling_factor)
from graph_retarget.skeleton import ConfigError, SkeletonGraph
from graph_retarget.synthetic import biped, clip_from_pose, humanoid, random_pose, random_tree

import oracles

rotvecs = st.lists(st.floats(-4, 4), min_size=3, max_size=3)


@settings(max_examples=60, deadline=None)
@given(rotvecs)
def test_rodrigues_matches_scipy(v):
    R = axis_angle_to_matrix(np.array(v)).numpy()
    np.testing.assert_allclose(R, Rotation.from_rotvec(v).as_matrix(), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(rotvecs)
def test_rotation_is_orthonormal(v):
    R = axis_angle_to_matrix(np.array(v)).numpy()
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_small_angle_branch_is_smooth():
    for scale in (0.0, 1e-12, 1e-9, 1e-7):
        v = np.array([1.0, -2.0, 0.5]) * scale
        np.testing.assert_allclose(axis_angle_to_matrix(v).numpy(), Rotation.from_rotvec(v).as_matrix(),
                                   atol=1e-15)
    r = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    axis_angle_to_matrix(r).sum().backward()
    assert torch.isfinite(r.grad).all()


def test_rotation_input_errors():
    with pytest.raises(KinematicsError):
        axis_angle_to_matrix([np.nan, 0, 0])
    with pytest.raises(KinematicsError):
        rot_axis_angle([0, 0, 2.0], 0.3)


def test_fk_two_link_planar_by_hand():
    g = SkeletonGraph.from_arrays(["b", "a", "c"], [-1, 0, 1], [[0, 0, 0], [0, 1, 0], [0, 1, 0]],
                                  [[0, 0, 0], [0, 0, -1], [0, 0, -1]], {})
    q = np.pi / 2
    pose = PoseState(torch.zeros(3, dtype=torch.float64), torch.tensor([0.0, 0, 2.0], dtype=torch.float64),
                     torch.tensor([q, 0.0], dtype=torch.float64))
    p = forward_kinematics(pose, g).numpy()
    # rotating +90 deg about y sends -z to -x
    np.testing.assert_allclose(p, [[0, 0, 2], [0, 0, 1], [-1, 0, 1]], atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_fk_matches_recursive_oracle(J, T, seed):
    rng = np.random.default_rng(seed)
    g = random_tree(rng, J)
    pose = random_pose(rng, T, J)
    got = forward_kinematics(pose, g).numpy()
    for t in range(T):
        want = oracles.fk_recursive(g.parent_index, g.axes, g.link_vectors, pose.base_orientation[t].numpy(),
                                    pose.base_position[t].numpy(), pose.joint_angles[t].numpy())
        np.testing.assert_allclose(got[t], want, rtol=1e-9, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_link_lengths_preserved(J, seed):
    rng = np.random.default_rng(seed)
    g = random_tree(rng, J)
    p = forward_kinematics(random_pose(rng, 3, J), g).numpy()
    for j in range(1, J):
        d = np.linalg.norm(p[:, j] - p[:, g.parent_index[j]], axis=-1)
        np.testing.assert_allclose(d, np.linalg.norm(g.link_vectors[j]), rtol=1e-10)


def test_fk_shape_errors():
    g = biped()
    with pytest.raises(KinematicsError):
        forward_kinematics(PoseState.zeros(2, 5), g)


def test_fk_gradients_finite_at_zero_pose():
    g = humanoid()
    pose = PoseState.zeros(2, g.joint_count)
    r0 = pose.base_orientation.requires_grad_(True)
    forward_kinematics(PoseState(r0, pose.base_position, pose.joint_angles), g).sum().backward()
    assert torch.isfinite(r0.grad).all()


def test_fk_tokens_reads_pose_lanes():
    rng = np.random.default_rng(0)
    g = humanoid()
    pose = random_pose(rng, 4, g.joint_count)
    clip = clip_from_pose(g, pose, t_max=6, j_max=20)
    np.testing.assert_array_equal(fk_tokens(clip.data[:4], g).numpy(), forward_kinematics(pose, g).numpy())


def test_leg_length_and_alpha():
    assert leg_length(biped()) == pytest.approx(0.8)
    assert leg_length(biped(thigh=0.3, calf=0.5)) == pytest.approx(0.8)
    assert scaling_factor(biped(scale=2.0), biped()) == pytest.approx(2.0)
    assert scaling_factor(humanoid(), biped()) == pytest.approx(1.0)
    armless = SkeletonGraph.from_arrays(["b", "a"], [-1, 0], [[0, 0, 0], [1, 0, 0]], [[0, 0, 0], [0, 0, 1]], {})
    with pytest.raises(ConfigError):
        leg_length(armless)


def test_scaled_reference_is_homothety():
    clip = clip_from_pose(biped(), random_pose(np.random.default_rng(1), 3, 7))
    p = scaled_reference_positions(clip, 1.5).numpy()
    np.testing.assert_allclose(p[:, :7], 1.5 * oracles.positions_of(clip.data, 7))
    with pytest.raises(KinematicsError):
        scaled_reference_positions(clip, 0.0)


def test_rewrite_from_fk_is_idempotent():
    g = humanoid()
    clip = clip_from_pose(g, random_pose(np.random.default_rng(2), 5, g.joint_count))
    once = rewrite_from_fk(clip.data, g, clip.fps)
    np.testing.assert_array_equal(once.numpy(), rewrite_from_fk(once, g, clip.fps).numpy())
    np.testing.assert_allclose(once.numpy(), clip.data, atol=1e-12)
