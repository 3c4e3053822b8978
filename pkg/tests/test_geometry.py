import json

import numpy as np
import pytest

from disco.errors import DomainError
from disco.geometry import (Affine2D, Heatmap, KeypointSet, TPSTransform,
                            heatmap_to_affine, heatmap_translation,
                            invert_affine, relative_affine, tps_eval,
                            tps_eval_points, tps_fit, tps_radial,
                            transform_from_json, transform_to_json)
from disco.synthbench import gaussian_heatmap, moment_oracle, tps_oracle
from disco.tensorops import make_grid


def delta_heatmap(size, row, col):
    v = np.zeros((size, size))
    v[row, col] = 1.0
    return Heatmap(make_grid(size, size), v)


class TestHeatmapType:
    def test_negative_values_rejected(self):
        v = np.full((4, 4), 1.0 / 16.0)
        v[0, 0] = -v[0, 0]
        with pytest.raises(DomainError):
            Heatmap(make_grid(4, 4), v)

    def test_unnormalized_rejected(self):
        with pytest.raises(DomainError):
            Heatmap(make_grid(4, 4), np.full((4, 4), 0.9 / 16.0))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DomainError):
            Heatmap(make_grid(4, 4), np.full((3, 3), 1.0 / 9.0))


class TestHeatmapTranslation:
    def test_delta_at_center(self):
        assert np.array_equal(heatmap_translation(delta_heatmap(5, 2, 2)), [0, 0])

    def test_symmetric_two_point_mass(self):
        g = make_grid(5, 5)
        v = np.zeros((5, 5))
        # mass 0.5 at x = -0.5 and +0.5, both at y = 0
        v[2, 1] = 0.5
        v[2, 3] = 0.5
        t = heatmap_translation(Heatmap(g, v))
        assert np.allclose(t, [0.0, 0.0], atol=1e-15)

    def test_gaussian_mean_recovered(self):
        h = gaussian_heatmap(64, 64, [0.25, -0.5], 0.15 ** 2 * np.eye(2))
        t = heatmap_translation(h)
        # oracle: direct moment sum over the same discrete grid
        mean, _ = moment_oracle(h)
        assert np.max(np.abs(t - mean)) < 1e-12
        assert np.max(np.abs(t - [0.25, -0.5])) < 1e-3


class TestHeatmapToAffine:
    def test_delta_gives_isotropic_floor(self):
        a = heatmap_to_affine(delta_heatmap(5, 2, 2), eps_cov=1e-6)
        assert np.allclose(a.translation, [0, 0], atol=1e-15)
        assert np.allclose(a.linear, 1e-3 * np.eye(2), atol=1e-12)

    def test_isotropic_gaussian_scale(self):
        h = gaussian_heatmap(64, 64, [0.0, 0.0], 0.2 ** 2 * np.eye(2))
        a = heatmap_to_affine(h)
        assert np.max(np.abs(a.linear - 0.2 * np.eye(2))) < 2e-2

    def test_anisotropic_gaussian_covariance(self):
        c, s = np.cos(np.pi / 4), np.sin(np.pi / 4)
        r = np.array([[c, -s], [s, c]])
        cov = r @ np.diag([0.3 ** 2, 0.1 ** 2]) @ r.T
        h = gaussian_heatmap(64, 64, [0.0, 0.0], cov)
        a = heatmap_to_affine(h)
        # linear linear^T reproduces the covariance; linear^T linear need not
        assert np.max(np.abs(a.linear @ a.linear.T - cov)) < 2e-2

    def test_reconstructs_regularized_covariance(self):
        rng = np.random.default_rng(5)
        v = rng.uniform(0.1, 1.0, size=(16, 16))
        h = Heatmap(make_grid(16, 16), v / v.sum())
        eps = 1e-6
        a = heatmap_to_affine(h, eps_cov=eps)
        _, cov = moment_oracle(h)
        assert np.max(np.abs(a.linear @ a.linear.T - (cov + eps * np.eye(2)))) < 1e-10

    def test_deterministic_bitwise(self):
        h = gaussian_heatmap(32, 32, [0.1, -0.2], 0.1 ** 2 * np.eye(2))
        a1 = heatmap_to_affine(h)
        a2 = heatmap_to_affine(h)
        assert np.array_equal(a1.linear, a2.linear)
        assert np.array_equal(a1.translation, a2.translation)

    def test_eps_cov_must_be_positive(self):
        with pytest.raises(DomainError):
            heatmap_to_affine(delta_heatmap(3, 1, 1), eps_cov=0.0)


class TestRelativeAffine:
    def test_identity_driver_returns_source(self):
        src = Affine2D(np.array([[1.2, 0.1], [-0.3, 0.9]]), np.array([0.2, -0.1]))
        rel = relative_affine(src, Affine2D.identity())
        assert np.allclose(rel.linear, src.linear, atol=1e-15)
        assert np.allclose(rel.translation, src.translation, atol=1e-15)

    def test_self_cancellation(self):
        a = Affine2D(np.array([[0.8, 0.2], [-0.1, 1.1]]), np.array([0.3, 0.4]))
        rel = relative_affine(a, a)
        assert np.max(np.abs(rel.linear - np.eye(2))) < 1e-12
        assert np.max(np.abs(rel.translation)) < 1e-12

    def test_pure_translations_compose(self):
        # hand homogeneous product: [I|0.2,0] (inv [I|0.1,-0.1]) -> [I|0.3,-0.1]
        src = Affine2D(np.eye(2), np.array([0.2, 0.0]))
        drv = Affine2D(np.eye(2), np.array([-0.1, 0.1]))
        rel = relative_affine(src, drv)
        assert np.allclose(rel.linear, np.eye(2), atol=1e-15)
        assert np.allclose(rel.translation, [0.3, -0.1], atol=1e-15)

    def test_inverse_round_trip(self):
        a = Affine2D(np.array([[1.1, 0.2], [0.0, 0.95]]), np.array([-0.2, 0.05]))
        inv = invert_affine(a)
        p = np.array([0.3, -0.6])
        assert np.max(np.abs(inv.apply(a.apply(p)) - p)) < 1e-12

    def test_numerically_singular_driver_rejected(self):
        # subnormal determinant passes construction but its inverse overflows
        from disco.errors import NumericError
        src = Affine2D.identity()
        drv = Affine2D(np.array([[1e-320, 0.0], [0.0, 1.0]]), np.zeros(2))
        with pytest.raises(NumericError):
            relative_affine(src, drv)

    @pytest.mark.parametrize("seed", range(5))
    def test_transform_recovery_from_heatmap_pair(self, seed):
        # A similarity B moves heatmap content driving -> source; the affines
        # extracted per frame must compose into a map sending the driving
        # heatmap's moments onto the source's.
        rng = np.random.default_rng(seed)
        theta = rng.uniform(-np.pi / 6, np.pi / 6)
        scale = rng.uniform(0.8, 1.25)
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        b = Affine2D(scale * rot, rng.uniform(-0.25, 0.25, size=2))

        mean_d = rng.uniform(-0.1, 0.1, size=2)
        cov_d = rng.uniform(0.05, 0.1) ** 2 * np.eye(2)
        mean_s = b.apply(mean_d)
        cov_s = b.linear @ cov_d @ b.linear.T

        h_src = gaussian_heatmap(64, 64, mean_s, cov_s)
        h_drv = gaussian_heatmap(64, 64, mean_d, cov_d)
        rel = relative_affine(heatmap_to_affine(h_src), heatmap_to_affine(h_drv))

        om_d, oc_d = moment_oracle(h_drv)
        om_s, oc_s = moment_oracle(h_src)
        assert np.max(np.abs(rel.apply(om_d) - om_s)) < 2e-2
        assert np.max(np.abs(rel.linear @ oc_d @ rel.linear.T - oc_s)) < 2e-2


class TestTpsRadial:
    def test_limit_at_zero(self):
        assert tps_radial(0.0) == 0.0

    def test_unit_radius(self):
        assert tps_radial(1.0) == 0.0

    def test_radius_two(self):
        assert abs(tps_radial(2.0) - 4.0 * np.log(4.0)) < 1e-12
        assert abs(tps_radial(2.0) - 5.545177) < 1e-6

    def test_negative_radius_rejected(self):
        with pytest.raises(DomainError):
            tps_radial(-0.1)


def random_keypoints(rng, n):
    while True:
        pts = rng.uniform(-0.8, 0.8, size=(n, 2))
        d = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        if d.min() > 1e-3:
            return pts


class TestTpsFit:
    def test_identity_correspondence(self):
        pts = KeypointSet(np.array([[0.0, 0.0], [0.5, 0.1], [-0.3, 0.4], [0.2, -0.6]]))
        t = tps_fit(pts, pts)
        assert np.max(np.abs(t.affine - [[1, 0, 0], [0, 1, 0]])) < 1e-9
        assert np.max(np.abs(t.weights)) < 1e-9

    def test_constant_offset_is_pure_affine(self):
        pts = KeypointSet(np.array([[0.0, 0.0], [0.5, 0.1], [-0.3, 0.4], [0.2, -0.6]]))
        dst = KeypointSet(pts.points + np.array([0.1, -0.2]))
        t = tps_fit(pts, dst)
        assert np.max(np.abs(t.affine - [[1, 0, 0.1], [0, 1, -0.2]])) < 1e-9
        assert np.max(np.abs(t.weights)) < 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_interpolates_random_pairs(self, seed):
        rng = np.random.default_rng(seed)
        drv = KeypointSet(random_keypoints(rng, 5))
        src = KeypointSet(random_keypoints(rng, 5))
        t = tps_fit(drv, src)
        got = tps_eval_points(t, drv.points)
        assert np.max(np.abs(got - src.points)) < 1e-8

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_dense_solve_oracle(self, seed):
        rng = np.random.default_rng(seed + 100)
        drv = random_keypoints(rng, 7)
        src = random_keypoints(rng, 7)
        t = tps_fit(KeypointSet(drv), KeypointSet(src))
        oracle_affine, oracle_weights = tps_oracle(drv, src)
        assert np.max(np.abs(t.affine - oracle_affine)) < 1e-8
        assert np.max(np.abs(t.weights - oracle_weights)) < 1e-8

    def test_side_conditions_hold(self):
        rng = np.random.default_rng(11)
        drv = KeypointSet(random_keypoints(rng, 9))
        src = KeypointSet(random_keypoints(rng, 9))
        t = tps_fit(drv, src, reg=0.05)
        assert np.max(np.abs(t.weights.sum(axis=0))) < 1e-8
        assert np.max(np.abs(t.weights.T @ drv.points)) < 1e-8

    def test_coincident_points_named(self):
        pts = np.array([[0.0, 0.0], [0.5, 0.5], [0.5, 0.5], [0.1, -0.2]])
        with pytest.raises(DomainError, match="1 and 2"):
            KeypointSet(pts)

    def test_count_mismatch_rejected(self):
        a = KeypointSet(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        b = KeypointSet(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
        with pytest.raises(DomainError, match="counts differ"):
            tps_fit(a, b)

    def test_negative_reg_rejected(self):
        a = KeypointSet(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        with pytest.raises(DomainError):
            tps_fit(a, a, reg=-1.0)


class TestTpsEval:
    def test_zero_weights_identity_affine(self):
        anchors = KeypointSet(np.array([[0.0, 0.0], [0.5, 0.1], [-0.3, 0.4]]))
        t = TPSTransform(anchors, np.array([[1.0, 0, 0], [0, 1.0, 0]]),
                         np.zeros((3, 2)))
        p = np.array([0.33, -0.71])
        assert np.array_equal(tps_eval(t, p), p)

    def test_affine_reduction_is_exact(self):
        anchors = KeypointSet(np.array([[0.1, 0.0], [0.5, 0.1], [-0.3, 0.4]]))
        aff = np.array([[0.9, -0.2, 0.05], [0.1, 1.1, -0.3]])
        t = TPSTransform(anchors, aff, np.zeros((3, 2)))
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1, 1, size=(10, 2))
        expect = pts @ aff[:, :2].T + aff[:, 2]
        assert np.array_equal(tps_eval_points(t, pts), expect)

    def test_matches_scalar_reimplementation(self):
        rng = np.random.default_rng(42)
        drv = KeypointSet(random_keypoints(rng, 6))
        src = KeypointSet(random_keypoints(rng, 6))
        t = tps_fit(drv, src)
        p = np.array([0.123, -0.456])
        got = tps_eval(t, p)
        # independent scalar re-evaluation
        val = t.affine @ np.array([p[0], p[1], 1.0])
        for i in range(6):
            r = float(np.hypot(*(drv.points[i] - p)))
            phi = r * r * np.log(r * r) if r > 0 else 0.0
            val = val + t.weights[i] * phi
        assert np.max(np.abs(got - val)) < 1e-12

    def test_side_condition_violation_rejected(self):
        anchors = KeypointSet(np.array([[0.0, 0.0], [0.5, 0.1], [-0.3, 0.4]]))
        with pytest.raises(DomainError, match="side conditions"):
            TPSTransform(anchors, np.array([[1.0, 0, 0], [0, 1.0, 0]]),
                         np.full((3, 2), 0.1))


class TestTransformJson:
    def test_affine_round_trip_and_field_order(self):
        a = Affine2D(np.array([[1.25, -0.125], [0.3, 0.9]]),
                     np.array([0.1, -0.7]))
        text = transform_to_json(a)
        assert text.startswith('{"type":"affine","linear":')
        assert '"translation":' in text
        back = transform_from_json(text)
        assert np.array_equal(back.linear, a.linear)
        assert np.array_equal(back.translation, a.translation)

    def test_tps_round_trip_and_field_order(self):
        rng = np.random.default_rng(9)
        drv = KeypointSet(random_keypoints(rng, 5))
        src = KeypointSet(random_keypoints(rng, 5))
        t = tps_fit(drv, src)
        text = transform_to_json(t)
        assert text.startswith('{"type":"tps","anchors":')
        assert text.index('"anchors"') < text.index('"affine"') < text.index('"weights"')
        back = transform_from_json(text)
        assert np.array_equal(back.anchors.points, t.anchors.points)
        assert np.array_equal(back.affine, t.affine)
        assert np.array_equal(back.weights, t.weights)

    def test_seventeen_digit_round_trip_exact(self):
        a = Affine2D(np.array([[np.pi, 1 / 3], [-2 / 7, np.e]]),
                     np.array([1e-17, 0.1]))
        back = transform_from_json(transform_to_json(a))
        assert np.array_equal(back.linear, a.linear)
        assert np.array_equal(back.translation, a.translation)

    def test_invalid_documents_rejected(self):
        with pytest.raises(DomainError):
            transform_from_json("not json")
        with pytest.raises(DomainError):
            transform_from_json(json.dumps({"type": "rigid"}))
        with pytest.raises(DomainError):
            transform_from_json(json.dumps({"linear": [[1, 0], [0, 1]]}))
