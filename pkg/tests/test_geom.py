"""Frames, sphere designs, and rotation sets."""

import numpy as np
import pytest

from fraglink.geom import (
    canonical_frame,
    fibonacci_sphere,
    octahedral_rotations,
    pairwise_distances,
    random_rotation,
    rotation_matrix,
)


class TestBasics:
    def test_pairwise_distances(self):
        a = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        b = np.array([[0.0, 3.0, 4.0]])
        d = pairwise_distances(a, b)
        assert d.shape == (2, 1)
        np.testing.assert_allclose(d[0, 0], 5.0)
        np.testing.assert_allclose(d[1, 0], np.sqrt(26.0))

    def test_rotation_matrix_properties(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            axis = rng.standard_normal(3)
            angle = rng.uniform(-np.pi, np.pi)
            r = rotation_matrix(axis, angle)
            np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
            np.testing.assert_allclose(np.linalg.det(r), 1.0, atol=1e-12)

    def test_random_rotation_is_proper(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            q = random_rotation(rng)
            np.testing.assert_allclose(q @ q.T, np.eye(3), atol=1e-12)
            np.testing.assert_allclose(np.linalg.det(q), 1.0, atol=1e-12)


class TestFibonacciSphere:
    def test_unit_norm_and_count(self):
        dirs = fibonacci_sphere(92)
        assert dirs.shape == (92, 3)
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)

    def test_near_uniform_coverage(self):
        # mean direction of a balanced design is close to zero
        dirs = fibonacci_sphere(92)
        assert np.linalg.norm(dirs.mean(axis=0)) < 0.05

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            fibonacci_sphere(0)


class TestCanonicalFrame:
    def test_is_rotation(self):
        rng = np.random.default_rng(5)
        pts = rng.standard_normal((30, 3)) * np.array([3.0, 2.0, 1.0])
        u = canonical_frame(pts)
        np.testing.assert_allclose(u @ u.T, np.eye(3), atol=1e-10)
        np.testing.assert_allclose(np.linalg.det(u), 1.0, atol=1e-10)

    def test_covariant_under_rigid_motion(self):
        rng = np.random.default_rng(17)
        for _ in range(25):
            pts = rng.standard_normal((20, 3)) * np.array([3.0, 2.0, 1.0])
            rot = random_rotation(rng)
            shift = rng.standard_normal(3) * 10.0
            u1 = canonical_frame(pts)
            u2 = canonical_frame(pts @ rot.T + shift)
            np.testing.assert_allclose(u2, rot @ u1, atol=1e-8)

    def test_projected_coordinates_invariant(self):
        # the property downstream code relies on: coordinates expressed in the
        # canonical frame do not move under rigid motions
        rng = np.random.default_rng(23)
        pts = rng.standard_normal((15, 3)) * np.array([4.0, 2.0, 1.0])
        rot = random_rotation(rng)
        shift = np.array([5.0, -2.0, 7.0])
        moved = pts @ rot.T + shift
        local1 = (pts - pts.mean(axis=0)) @ canonical_frame(pts)
        local2 = (moved - moved.mean(axis=0)) @ canonical_frame(moved)
        np.testing.assert_allclose(local1, local2, atol=1e-8)

    def test_degenerate_inputs_still_rotations(self):
        for pts in (np.zeros((1, 3)), np.zeros((0, 3)), np.ones((4, 3))):
            u = canonical_frame(pts)
            np.testing.assert_allclose(u @ u.T, np.eye(3), atol=1e-12)


class TestOctahedralRotations:
    def test_count_and_properties(self):
        rots = octahedral_rotations()
        assert len(rots) == 24
        for r in rots:
            np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
            np.testing.assert_allclose(np.linalg.det(r), 1.0, atol=1e-12)

    def test_unique_and_contains_identity(self):
        rots = octahedral_rotations()
        seen = {tuple(r.flatten()) for r in rots}
        assert len(seen) == 24
        assert tuple(np.eye(3).flatten()) in seen
