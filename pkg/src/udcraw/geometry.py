"""Homography estimation and warping for pixel-to-pixel pair alignment.

Estimation is the normalized direct linear transform: isotropic point
normalization (centroid at the origin, mean distance sqrt(2)), the 9-vector
in the smallest singular direction of the stacked constraint matrix, then
denormalization with m[2][2] scaled to 1. Warping is inverse mapping with
bilinear sampling and a validity mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rawimage import PlanarImage


class GeometryError(ValueError):
    pass


@dataclass
class Homography:
    m: np.ndarray  # 3x3, m[2][2] == 1

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        if self.m.shape != (3, 3):
            raise GeometryError("homography must be 3x3")
        if abs(self.m[2, 2]) < 1e-15:
            raise GeometryError("homography normalization entry is zero")
        self.m = self.m / self.m[2, 2]
        if abs(np.linalg.det(self.m)) <= 1e-12:
            raise GeometryError("homography is singular")

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 2) xy points through the homography."""
        pts = np.asarray(points, dtype=np.float64)
        hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
        mapped = hom @ self.m.T
        return mapped[:, :2] / mapped[:, 2:3]


def _normalization(points: np.ndarray) -> np.ndarray:
    """Similarity transform taking the centroid to 0 and mean radius to sqrt(2)."""
    centroid = points.mean(axis=0)
    dist = np.mean(np.linalg.norm(points - centroid, axis=1))
    if dist < 1e-12:
        raise GeometryError("degenerate configuration: coincident points")
    s = np.sqrt(2.0) / dist
    return np.array([[s, 0, -s * centroid[0]],
                     [0, s, -s * centroid[1]],
                     [0, 0, 1.0]])


def estimate_homography(pairs) -> tuple[Homography, float]:
    """Fit src -> dst from ((x, y), (x, y)) correspondences.

    Returns the homography and the mean reprojection error in destination
    pixels. Raises GeometryError for under-determined or degenerate
    configurations.
    """
    pairs = list(pairs)
    if len(pairs) < 4:
        raise GeometryError(f"need at least 4 correspondences, got {len(pairs)}")
    src = np.asarray([p[0] for p in pairs], dtype=np.float64)
    dst = np.asarray([p[1] for p in pairs], dtype=np.float64)

    t_src = _normalization(src)
    t_dst = _normalization(dst)
    sn = (np.concatenate([src, np.ones((len(src), 1))], axis=1) @ t_src.T)
    dn = (np.concatenate([dst, np.ones((len(dst), 1))], axis=1) @ t_dst.T)

    rows = []
    for (x, y, _), (u, v, _) in zip(sn, dn):
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
    a = np.asarray(rows)

    _, sigma, vt = np.linalg.svd(a)
    # Rank 8 is required for a unique direction; collinear or repeated points
    # leave the two smallest singular values both near zero.
    if len(pairs) > 4 and sigma[7] < 1e-9 * sigma[0]:
        raise GeometryError("degenerate configuration: rank-deficient constraints")
    if len(pairs) == 4 and sigma[6] < 1e-9 * sigma[0]:
        raise GeometryError("degenerate configuration: rank-deficient constraints")
    h = vt[-1].reshape(3, 3)

    m = np.linalg.inv(t_dst) @ h @ t_src
    if abs(m[2, 2]) < 1e-15:
        raise GeometryError("estimated homography is at infinity")
    homography = Homography(m)
    err = float(np.mean(np.linalg.norm(homography.apply(src) - dst, axis=1)))
    return homography, err


def warp(image: PlanarImage, h: Homography, out_size=None) -> tuple[PlanarImage, np.ndarray]:
    """Inverse-warp ``image`` through ``h`` (source -> destination convention).

    Output pixel (x, y) samples the source at h^-1 (x, y) with bilinear
    interpolation. The mask is true where the sample point falls inside the
    source extent; boundary taps are clamped, so exact-integer border
    positions stay valid.
    """
    hh, ww = image.shape if out_size is None else (int(out_size[0]), int(out_size[1]))
    inv = h.inverse().m
    xs, ys = np.meshgrid(np.arange(ww, dtype=np.float64),
                         np.arange(hh, dtype=np.float64))
    denom = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / denom
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / denom

    src_h, src_w = image.shape
    eps = 1e-6  # keep exact-boundary samples valid under estimation roundoff
    mask = (sx >= -eps) & (sx <= src_w - 1 + eps) & (sy >= -eps) & (sy <= src_h - 1 + eps)
    sx = np.clip(sx, 0.0, src_w - 1.0)
    sy = np.clip(sy, 0.0, src_h - 1.0)

    x0 = np.clip(np.floor(sx).astype(int), 0, src_w - 1)
    y0 = np.clip(np.floor(sy).astype(int), 0, src_h - 1)
    x1 = np.clip(x0 + 1, 0, src_w - 1)
    y1 = np.clip(y0 + 1, 0, src_h - 1)
    wx = np.clip(sx - x0, 0.0, 1.0)
    wy = np.clip(sy - y0, 0.0, 1.0)

    out = np.zeros((3, hh, ww), dtype=np.float64)
    for ch in range(3):
        plane = image.channels[ch]
        out[ch] = ((1 - wy) * (1 - wx) * plane[y0, x0]
                   + (1 - wy) * wx * plane[y0, x1]
                   + wy * (1 - wx) * plane[y1, x0]
                   + wy * wx * plane[y1, x1])
        out[ch][~mask] = 0.0
    return PlanarImage(out, image.range_tag), mask


def align_pair(udc: PlanarImage, ref: PlanarImage, correspondences
               ) -> tuple[PlanarImage, np.ndarray]:
    """Resample the UDC image into the reference frame.

    ``correspondences`` maps UDC coordinates to reference coordinates, e.g.
    checkerboard corners or a stored grid; the returned mask marks pixels
    whose source sample stayed in bounds, and downstream losses and metrics
    must be evaluated inside it.
    """
    h, _err = estimate_homography(correspondences)
    aligned, mask = warp(udc, h, out_size=ref.shape)
    return aligned, mask


def identity_grid_correspondences(shape, step: int = 16) -> list:
    """Grid of self-correspondences for already-aligned pairs."""
    hh, ww = shape
    pts = [((float(x), float(y)), (float(x), float(y)))
           for y in range(0, hh, step) for x in range(0, ww, step)]
    return pts


def read_correspondences(path) -> list:
    """Text correspondences: one `x1 y1 x2 y2` per line, '#' comments."""
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise GeometryError(f"{path}:{lineno}: expected 'x1 y1 x2 y2'")
            x1, y1, x2, y2 = (float(v) for v in parts)
            pairs.append(((x1, y1), (x2, y2)))
    return pairs


def write_correspondences(path, pairs) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# x1 y1 x2 y2\n")
        for (x1, y1), (x2, y2) in pairs:
            f.write(f"{x1:.6f} {y1:.6f} {x2:.6f} {y2:.6f}\n")
