"""Deterministic geometry helpers: frames, sphere designs, rotation sets."""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "pairwise_distances",
    "rotation_matrix",
    "random_rotation",
    "fibonacci_sphere",
    "canonical_frame",
    "octahedral_rotations",
]


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances between row sets, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rotation by ``angle`` radians about ``axis`` (Rodrigues form)."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        raise ValueError("zero rotation axis")
    x, y, z = axis / norm
    c, s = math.cos(angle), math.sin(angle)
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation (QR of a Gaussian matrix, sign-fixed, det +1)."""
    m = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def fibonacci_sphere(n: int) -> np.ndarray:
    """Near-uniform unit directions via the golden-angle spiral, shape (n, 3)."""
    if n < 1:
        raise ValueError("need at least one direction")
    k = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * k + 1.0) / n
    phi = k * math.pi * (3.0 - math.sqrt(5.0))
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def canonical_frame(points: np.ndarray) -> np.ndarray:
    """Rotation whose columns are a PCA frame of ``points``, with fixed signs.

    Axis signs are resolved by the third moment of projections (falling back
    to the projection of the farthest point when the moment vanishes), so the
    frame co-rotates with the point cloud: for a proper rigid motion R,
    canonical_frame(R @ X) == R @ canonical_frame(X) up to floating point.
    Perfectly symmetric clouds get an arbitrary but deterministic frame.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 2:
        return np.eye(3)
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered
    _, vecs = np.linalg.eigh(cov)
    axes = [vecs[:, 2], vecs[:, 1]]  # descending variance
    for k, axis in enumerate(axes):
        proj = centered @ axis
        skew = float((proj**3).sum())
        if abs(skew) > 1e-9:
            if skew < 0.0:
                axes[k] = -axis
        else:
            far = int(np.argmax(np.abs(proj)))
            if proj[far] < 0.0:
                axes[k] = -axis
    third = np.cross(axes[0], axes[1])  # right-handed completion
    return np.column_stack([axes[0], axes[1], third])


def octahedral_rotations() -> tuple[np.ndarray, ...]:
    """The 24 proper rotations of the octahedral group as signed permutation
    matrices, in a fixed lexicographic order."""
    out = []
    for perm in [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]:
        for signs in [(sx, sy, sz) for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)]:
            m = np.zeros((3, 3))
            for row, (col, sign) in enumerate(zip(perm, signs)):
                m[row, col] = sign
            if np.linalg.det(m) > 0:
                out.append(m)
    ordered = sorted(out, key=lambda m: tuple(m.flatten()))
    return tuple(ordered)
