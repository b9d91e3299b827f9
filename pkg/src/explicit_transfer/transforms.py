"""Homogeneous transformation matrices and their application to points,
sequence frames and images.

Matrices act on column vectors, ``T @ (x, 1)``.  Matrices written for the
row-vector convention ``(x, 1) @ M`` are converted with
:func:`from_row_convention`.

Images use normalized coordinates in [-1, 1] on both axes with the corner
pixels centred on -1 and 1 (align-corners).  Output pixel ``g`` reads the
input at ``T @ g`` with bilinear interpolation and zero padding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core.tensor import Tensor, as_tensor, concat, matmul

FAMILIES = ("euclidean", "affine", "projective", "unrestricted")
DENOMINATOR_EPS = 1e-9
DET_EPS = 1e-12
# pixel coordinates this close to an integer are snapped so aligned grids sample exactly
SNAP_EPS = 1e-9


@dataclass(frozen=True)
class TransformMatrix:
    entries: np.ndarray
    family: str = "affine"

    def __post_init__(self):
        arr = np.array(self.entries, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 2:
            raise ValueError(f"transform must be a square (d+1)x(d+1) matrix, got {arr.shape}")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        object.__setattr__(self, "entries", arr)

    @property
    def d(self) -> int:
        return self.entries.shape[0] - 1

    def validate(self, tol: float = 1e-9) -> None:
        """Raise ValueError if the matrix violates its family's invariants."""
        m, d = self.entries, self.d
        last = np.zeros(d + 1)
        last[-1] = 1.0
        if self.family in ("euclidean", "affine") and not np.allclose(m[-1], last, atol=tol, rtol=0):
            raise ValueError(f"{self.family} transform must have last row (0,...,0,1)")
        if self.family == "euclidean":
            block = m[:d, :d]
            if not np.allclose(block.T @ block, np.eye(d), atol=tol, rtol=0):
                raise ValueError("euclidean block is not orthonormal")
            if abs(np.linalg.det(block) - 1.0) > tol:
                raise ValueError("euclidean block must have determinant +1")
        if self.family == "projective" and abs(np.linalg.det(m)) <= DET_EPS:
            raise ValueError("projective transform is singular")

    def __matmul__(self, other: "TransformMatrix") -> "TransformMatrix":
        family = self.family if self.family == other.family else _wider(self.family, other.family)
        return TransformMatrix(self.entries @ other.entries, family)

    def inverse(self) -> "TransformMatrix":
        if abs(np.linalg.det(self.entries)) <= DET_EPS:
            raise ValueError("transform is not invertible")
        return TransformMatrix(np.linalg.inv(self.entries), self.family)


def _wider(a: str, b: str) -> str:
    return FAMILIES[max(FAMILIES.index(a), FAMILIES.index(b))]


def identity(d: int, family: str = "affine") -> TransformMatrix:
    return TransformMatrix(np.eye(d + 1), family)


def make_euclidean(angle: float, tx: float = 0.0, ty: float = 0.0) -> TransformMatrix:
    c, s = np.cos(angle), np.sin(angle)
    return TransformMatrix(np.array([[c, -s, tx], [s, c, ty], [0.0, 0.0, 1.0]]), "euclidean")


def make_affine(linear_part, offset) -> TransformMatrix:
    a = np.atleast_2d(np.asarray(linear_part, dtype=np.float64))
    t = np.asarray(offset, dtype=np.float64).reshape(-1)
    d = a.shape[0]
    m = np.eye(d + 1)
    m[:d, :d] = a
    m[:d, d] = t
    return TransformMatrix(m, "affine")


def from_row_convention(matrix, family: str = "affine") -> TransformMatrix:
    """Convert a matrix meant for ``(x, 1) @ M`` into the column convention."""
    return TransformMatrix(np.asarray(matrix, dtype=np.float64).T, family)


def follow_target(neutral) -> TransformMatrix:
    """Affine map sending every frame to the constant ``neutral`` feature vector.

    With one feature and ``neutral=(0.5,)`` this is the row-convention matrix
    [[0, 0], [0.5, 1]] transposed: any lane offset is projected to the centre.
    """
    neutral = np.asarray(neutral, dtype=np.float64).reshape(-1)
    f = neutral.size
    m = np.zeros((f + 1, f + 1))
    m[:f, f] = neutral
    m[f, f] = 1.0
    return TransformMatrix(m, "affine")


def to_homogeneous(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)


def from_homogeneous(ph, projective: bool = True) -> np.ndarray:
    ph = np.asarray(ph, dtype=np.float64)
    if not projective:
        return ph[..., :-1]
    w = ph[..., -1:]
    if np.any(np.abs(w) < DENOMINATOR_EPS):
        raise ZeroDivisionError("projective denominator too close to zero")
    return ph[..., :-1] / w


def apply_to_point(T: TransformMatrix, p) -> np.ndarray:
    """Map a d-dimensional point (or array of points on the last axis)."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != T.d:
        raise ValueError(f"point has {p.shape[-1]} coordinates, transform expects {T.d}")
    out = to_homogeneous(p) @ T.entries.T
    return from_homogeneous(out, projective=T.family == "projective")


def apply_to_frame(T: TransformMatrix, frame) -> np.ndarray:
    """Transform one sequence frame of f features."""
    frame = np.atleast_1d(np.asarray(frame, dtype=np.float64))
    if frame.shape[-1] != T.d:
        raise ValueError(f"frame has {frame.shape[-1]} features, transform expects {T.d}")
    out = to_homogeneous(frame) @ T.entries.T
    return from_homogeneous(out, projective=T.family == "projective")


# -- differentiable versions ------------------------------------------------

def euclidean_matrices(params: Tensor) -> Tensor:
    """(N, 3) rows of (angle, tx, ty) -> (N, 3, 3) euclidean matrices."""
    theta, tx, ty = params.data[:, 0], params.data[:, 1], params.data[:, 2]
    c, s = np.cos(theta), np.sin(theta)
    n = params.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 0], out[:, 0, 1], out[:, 0, 2] = c, -s, tx
    out[:, 1, 0], out[:, 1, 1], out[:, 1, 2] = s, c, ty
    out[:, 2, 2] = 1.0

    def backward(g):
        d_theta = -s * g[:, 0, 0] - c * g[:, 0, 1] + c * g[:, 1, 0] - s * g[:, 1, 1]
        return (np.stack([d_theta, g[:, 0, 2], g[:, 1, 2]], axis=1),)
    return Tensor.from_op(out, (params,), backward, "euclidean_matrices")


def transform_frames(T: Tensor, x: Tensor, family: str = "affine") -> Tensor:
    """Apply per-frame matrices T (..., f+1, f+1) to frames x (..., f)."""
    if T.shape[-1] != x.shape[-1] + 1 or T.shape[-2] != T.shape[-1]:
        raise ValueError(f"matrices {T.shape} do not fit frames {x.shape}")
    f = x.shape[-1]
    xh = concat([x, Tensor(np.ones(x.shape[:-1] + (1,)))], axis=-1)
    out = matmul(T, xh.reshape(xh.shape + (1,)))
    out = out.reshape(out.shape[:-1])
    if family == "projective":
        w = out.data[..., f]
        if np.any(np.abs(w) < DENOMINATOR_EPS):
            raise ZeroDivisionError("projective denominator too close to zero")
        return out[..., :f] / out[..., f:f + 1]
    return out[..., :f]


def normalized_grid(h: int, w: int) -> np.ndarray:
    """(3, h*w) homogeneous grid, row-major over output pixels."""
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel(), np.ones(h * w)])


def grid_sample(images: Tensor, T: Tensor) -> Tensor:
    """Bilinearly resample images (N, H, W) through matrices T (N, 3, 3).

    Differentiable with respect to both the images and the matrix entries.
    """
    images, T = as_tensor(images), as_tensor(T)
    if images.ndim != 3:
        raise ValueError("grid_sample expects images of shape (N, H, W)")
    n, h, w = images.shape
    if T.shape != (n, 3, 3):
        raise ValueError(f"expected transforms of shape {(n, 3, 3)}, got {T.shape}")
    dets = np.linalg.det(T.data)
    if np.any(np.abs(dets) <= DET_EPS):
        raise ValueError("non-invertible sampling transform")

    grid = normalized_grid(h, w)                      # (3, P)
    src = T.data @ grid                               # (N, 3, P)
    wden = src[:, 2]
    if np.any(np.abs(wden) < DENOMINATOR_EPS):
        raise ZeroDivisionError("projective denominator too close to zero")
    sx, sy = src[:, 0] / wden, src[:, 1] / wden
    sx_scale, sy_scale = (w - 1) / 2.0, (h - 1) / 2.0
    px, py = (sx + 1.0) * sx_scale, (sy + 1.0) * sy_scale
    px = np.where(np.abs(px - np.round(px)) < SNAP_EPS, np.round(px), px)
    py = np.where(np.abs(py - np.round(py)) < SNAP_EPS, np.round(py), py)

    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx, fy = px - x0, py - y0
    batch = np.arange(n)[:, None]
    img = images.data

    def corner(yi, xi):
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        vals = img[batch, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(valid, vals, 0.0), valid

    v00, m00 = corner(y0, x0)
    v01, m01 = corner(y0, x0 + 1)
    v10, m10 = corner(y0 + 1, x0)
    v11, m11 = corner(y0 + 1, x0 + 1)
    w00, w01 = (1 - fy) * (1 - fx), (1 - fy) * fx
    w10, w11 = fy * (1 - fx), fy * fx
    out = (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11).reshape(n, h, w)

    def backward(g):
        g = g.reshape(n, h * w)
        gimg = np.zeros_like(img)
        for yi, xi, wt, valid in ((y0, x0, w00, m00), (y0, x0 + 1, w01, m01),
                                  (y0 + 1, x0, w10, m10), (y0 + 1, x0 + 1, w11, m11)):
            bi = np.broadcast_to(batch, yi.shape)[valid]
            np.add.at(gimg, (bi, yi[valid], xi[valid]), (g * wt)[valid])
        d_px = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
        d_py = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
        d_sx = g * d_px * sx_scale
        d_sy = g * d_py * sy_scale
        # sx = a / wden, sy = b / wden with a, b, wden linear in T's rows
        d_a = d_sx / wden
        d_b = d_sy / wden
        d_w = -(d_sx * sx + d_sy * sy) / wden
        gT = np.stack([d_a @ grid.T, d_b @ grid.T, d_w @ grid.T], axis=1)
        return gimg, gT

    return Tensor.from_op(out, (images, T), backward, "grid_sample")


def sample_image(image, T: TransformMatrix) -> np.ndarray:
    """Resample a single 2-D image through a 3x3 transform."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("sample_image expects a 2-D image")
    if T.entries.shape != (3, 3):
        raise ValueError("image transforms must be 3x3")
    out = grid_sample(Tensor(image[None]), Tensor(T.entries[None]))
    return out.data[0]
