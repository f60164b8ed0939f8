import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meshfuse import body_model as bm
from meshfuse.body_model import BodyModel, BodyParams, ModelError
from meshfuse.geometry import RigidTransform


def chain_model():
    """Two joints (root at origin, elbow at x=1) and three vertices on a line."""
    return BodyModel(
        template_vertices=[[0, 0, 0], [1, 0, 0], [2, 0, 0]],
        faces=[[0, 1, 2]],
        shape_dirs=np.arange(9, dtype=float).reshape(3, 3, 1),
        joint_regressor=[[1, 0, 0], [0, 1, 0]],
        kinematic_parents=[-1, 0],
        skinning_weights=[[1, 0], [0, 1], [0, 1]],
        part_of_vertex=[0, 1, 1],
        part_of_joint=[0, 1],
        keypoint_map=[0, 1],
    )


def random_params(model, rng, scale=0.4):
    return BodyParams(rng.normal(0, 0.5, model.n_betas), rng.normal(0, scale, 3),
                      rng.normal(0, scale, (model.n_joints - 1, 3)), rng.normal(0, 1, 3))


# ---------------------------------------------------------------------------
# shape and joints


def test_zero_beta_gives_template(toy):
    np.testing.assert_array_equal(bm.shaped_template(toy, np.zeros(toy.n_betas)),
                                  toy.template_vertices)


def test_one_hot_beta_adds_direction(toy):
    e = np.zeros(toy.n_betas)
    e[1] = 1.0
    np.testing.assert_allclose(bm.shaped_template(toy, e),
                               toy.template_vertices + toy.shape_dirs[:, :, 1], atol=1e-15)


def test_beta_linearity(toy):
    e = np.zeros(toy.n_betas)
    e[0] = 1.0
    avg = 0.5 * (bm.shaped_template(toy, e) + bm.shaped_template(toy, -e))
    np.testing.assert_allclose(avg, toy.template_vertices, atol=1e-15)


def test_regressor_one_hot_and_midpoint():
    m = chain_model()
    np.testing.assert_array_equal(bm.regress_joints(m, m.template_vertices)[1], [1, 0, 0])
    m2 = BodyModel(**{**_fields(m), "joint_regressor": [[1, 0, 0], [0, 0.5, 0.5]]})
    np.testing.assert_allclose(bm.regress_joints(m2, m2.template_vertices)[1], [1.5, 0, 0])


def _fields(m):
    return {k: getattr(m, k) for k in ("template_vertices", "faces", "shape_dirs",
                                       "joint_regressor", "kinematic_parents",
                                       "skinning_weights", "part_of_vertex", "part_of_joint",
                                       "keypoint_map")}


def test_regressor_translation_equivariant(toy):
    d = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(bm.regress_joints(toy, toy.template_vertices + d),
                               bm.regress_joints(toy, toy.template_vertices) + d, atol=1e-12)


def test_joints_are_convex_combinations(toy):
    assert np.all(toy.joint_regressor >= 0)
    np.testing.assert_allclose(toy.joint_regressor.sum(1), 1.0)


# ---------------------------------------------------------------------------
# forward map


def test_rest_pose_unchanged(toy):
    V, J = bm.pose_mesh(toy, BodyParams.zeros(toy))
    np.testing.assert_allclose(V, toy.template_vertices, atol=1e-15)
    np.testing.assert_allclose(J, bm.regress_joints(toy, toy.template_vertices), atol=1e-15)


def test_elbow_bent_90_degrees_by_hand():
    m = chain_model()
    p = BodyParams([0.0], np.zeros(3), [[0, 0, math.pi / 2]], np.zeros(3))
    V, J = bm.pose_mesh(m, p)
    # the hand sits 1 m from the elbow along the rotated x axis: (1,0,0) + Rz(90)(1,0,0)
    np.testing.assert_allclose(V[2], [1, 1, 0], atol=1e-12)
    np.testing.assert_allclose(V[1], [1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(J[1], [1, 0, 0], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rigid_equivariance(toy, seed):
    rng = np.random.default_rng(seed)
    p = random_params(toy, rng)
    rest = p.replace(theta_global=np.zeros(3), t_cam=np.zeros(3))
    V0, J0 = bm.pose_mesh(toy, rest)
    V, J = bm.pose_mesh(toy, p)
    T = RigidTransform.from_axis_angle(p.theta_global, p.t_cam)
    np.testing.assert_allclose(V, T.apply(V0), atol=1e-7)
    np.testing.assert_allclose(J, T.apply(J0), atol=1e-7)


def test_global_pose_only_is_rigid(toy):
    p = BodyParams.zeros(toy).replace(theta_global=[0.1, 0.2, 0.3], t_cam=[1, 2, 3])
    T = RigidTransform.from_axis_angle([0.1, 0.2, 0.3], [1, 2, 3])
    np.testing.assert_allclose(bm.pose_mesh(toy, p)[0], T.apply(toy.template_vertices), atol=1e-12)


def test_vertices_linear_in_beta_at_fixed_pose(toy):
    rng = np.random.default_rng(1)
    p = random_params(toy, rng)
    h = 1e-3
    for k in range(toy.n_betas):
        b = p.beta.copy()
        b[k] += h
        Vp = bm.pose_mesh(toy, p.replace(beta=b))[0]
        b[k] -= 2 * h
        Vm = bm.pose_mesh(toy, p.replace(beta=b))[0]
        # second difference vanishes for a linear map
        b[k] += h
        V = bm.pose_mesh(toy, p.replace(beta=b))[0]
        np.testing.assert_allclose(Vp - V, V - Vm, atol=1e-7)


def test_backward_matches_finite_differences(toy_small):
    rng = np.random.default_rng(2)
    p = random_params(toy_small, rng)
    V, J, cache = bm.forward(toy_small, p)
    dV = rng.normal(size=V.shape)
    dJ = rng.normal(size=J.shape)
    g = bm.backward(toy_small, cache, dV, dJ)
    g = np.concatenate([np.ravel(a) for a in g]) if isinstance(g, tuple) else np.ravel(g)
    x = p.to_vector()
    h = 1e-6
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fp = bm.pose_mesh(toy_small, BodyParams.from_vector(xp, toy_small.n_betas, toy_small.n_joints))
        fm = bm.pose_mesh(toy_small, BodyParams.from_vector(xm, toy_small.n_betas, toy_small.n_joints))
        num = ((fp[0] - fm[0]) * dV).sum() / (2 * h) + ((fp[1] - fm[1]) * dJ).sum() / (2 * h)
        assert g[i] == pytest.approx(num, rel=1e-5, abs=1e-6)


def test_wrong_dimensions_raise(toy):
    with pytest.raises(ModelError):
        bm.pose_mesh(toy, BodyParams(np.zeros(2), np.zeros(3), np.zeros((toy.n_joints - 1, 3)),
                                     np.zeros(3)))


def test_non_finite_params_raise():
    with pytest.raises(ModelError):
        BodyParams([np.nan], np.zeros(3), np.zeros((1, 3)), np.zeros(3))


def test_beta_bound_enforced():
    with pytest.raises(ModelError):
        BodyParams([bm.BETA_BOUND + 1], np.zeros(3), np.zeros((1, 3)), np.zeros(3))


# ---------------------------------------------------------------------------
# edges


def test_edges_single_triangle():
    assert len(bm.mesh_edges([[0, 1, 2]])) == 3


def test_edges_shared_edge():
    assert len(bm.mesh_edges([[0, 1, 2], [0, 2, 3]])) == 5


def test_edges_empty():
    assert bm.mesh_edges(np.zeros((0, 3), int)).shape == (0, 2)


# ---------------------------------------------------------------------------
# model validation and archive


def test_cycle_rejected():
    with pytest.raises(ModelError):
        BodyModel(**{**_fields(chain_model()), "kinematic_parents": [-1, 1]})


def test_bad_skinning_rows_rejected():
    with pytest.raises(ModelError):
        BodyModel(**{**_fields(chain_model()), "skinning_weights": [[1, 0], [0.5, 0], [0, 1]]})


def test_archive_round_trip(toy, tmp_path):
    bm.save_model(toy, tmp_path / "m.bma")
    m = bm.load_model(tmp_path / "m.bma")
    for k in ("template_vertices", "faces", "shape_dirs", "joint_regressor", "kinematic_parents",
              "skinning_weights", "part_of_vertex", "part_of_joint", "keypoint_map",
              "hinge_joints"):
        np.testing.assert_array_equal(getattr(m, k), getattr(toy, k))
    assert m.part_joint_sets == toy.part_joint_sets
    assert m.joint_names == toy.joint_names and m.part_names == toy.part_names


def test_archive_bad_magic(tmp_path):
    (tmp_path / "x.bma").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ModelError):
        bm.load_model(tmp_path / "x.bma")


def test_archive_truncated(toy, tmp_path):
    bm.save_model(toy, tmp_path / "m.bma")
    data = (tmp_path / "m.bma").read_bytes()
    (tmp_path / "t.bma").write_bytes(data[: len(data) // 2])
    with pytest.raises(ModelError):
        bm.load_model(tmp_path / "t.bma")


@pytest.mark.parametrize("density,n_vertices", [(1, 186), (2, 686)])
def test_toy_model_sizes(density, n_vertices):
    m = bm.make_toy_model(density)
    assert m.n_vertices == n_vertices and m.n_joints == 8 and m.n_betas == 4
    # every face is non-degenerate and every vertex is used
    v = m.template_vertices[m.faces]
    area = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    assert area.min() > 0
    assert len(np.unique(m.faces)) == m.n_vertices


def test_occluded_joints_from_parts(toy):
    j = bm.occluded_joints_from_parts(toy, {1})
    assert j and all(toy.part_of_joint[k] == 1 for k in j) and 0 not in j
