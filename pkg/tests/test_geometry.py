"""Homography estimation, warping, and pair alignment."""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from udcraw import geometry as geo
from udcraw.rawimage import PlanarImage, Range
from oracles import psnr_two_pass


def smooth_image(seed, h=64, w=64):
    rng = np.random.default_rng(seed)
    img = gaussian_filter(rng.random((3, h, w)), (0, 3, 3))
    return PlanarImage(img, Range.LINEAR_UNIT)


def random_bounded_homography(rng, extent=64.0):
    """Ground-truth homography with a bounded projective part."""
    m = np.eye(3)
    m[:2, :2] += rng.uniform(-0.1, 0.1, (2, 2))
    m[:2, 2] = rng.uniform(-3, 3, 2)
    m[2, :2] = rng.uniform(-1e-4, 1e-4, 2)
    return geo.Homography(m)


# ---------------------------------------------------------------------------
# Estimation
# ---------------------------------------------------------------------------

def test_estimate_identity():
    pts = [((0.0, 0.0), (0.0, 0.0)), ((10.0, 0.0), (10.0, 0.0)),
           ((0.0, 10.0), (0.0, 10.0)), ((10.0, 10.0), (10.0, 10.0))]
    h, err = geo.estimate_homography(pts)
    assert np.max(np.abs(h.m - np.eye(3))) < 1e-10
    assert err < 1e-10


def test_estimate_pure_translation():
    src = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (10.0, 10.0)]
    pts = [((x, y), (x + 5.0, y - 3.0)) for x, y in src]
    h, _ = geo.estimate_homography(pts)
    want = np.eye(3)
    want[0, 2], want[1, 2] = 5.0, -3.0
    assert np.max(np.abs(h.m - want)) < 1e-9


def test_estimate_recovers_random_homography():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        truth = random_bounded_homography(rng)
        src = rng.uniform(0, 64, (20, 2))
        dst = truth.apply(src)
        h, err = geo.estimate_homography(list(zip(map(tuple, src), map(tuple, dst))))
        assert np.max(np.abs(h.m - truth.m)) < 1e-6
        assert err < 1e-6


def test_estimate_rejects_too_few_or_degenerate():
    with pytest.raises(geo.GeometryError):
        geo.estimate_homography([((0, 0), (0, 0))] * 3)
    collinear = [((float(i), float(i)), (float(i), float(i))) for i in range(6)]
    with pytest.raises(geo.GeometryError):
        geo.estimate_homography(collinear)


def test_estimate_invariant_to_uniform_coordinate_scaling():
    rng = np.random.default_rng(11)
    truth = random_bounded_homography(rng)
    src = rng.uniform(0, 64, (12, 2))
    dst = truth.apply(src)
    h1, _ = geo.estimate_homography(list(zip(map(tuple, src), map(tuple, dst))))
    s = 37.0
    h2, _ = geo.estimate_homography(list(zip(map(tuple, src * s), map(tuple, dst * s))))
    # Conjugate by the scaling to compare in the original frame.
    d = np.diag([s, s, 1.0])
    back = np.linalg.inv(d) @ h2.m @ d
    back /= back[2, 2]
    assert np.max(np.abs(back - h1.m)) < 1e-8


# ---------------------------------------------------------------------------
# Warp
# ---------------------------------------------------------------------------

def test_warp_identity():
    img = smooth_image(0)
    out, mask = geo.warp(img, geo.Homography(np.eye(3)))
    assert np.allclose(out.channels, img.channels)
    assert mask.all()


def test_warp_integer_translation():
    img = smooth_image(1)
    m = np.eye(3)
    m[0, 2] = -1.0  # dst x = src x - 1, so output column j reads input j + 1
    out, mask = geo.warp(img, geo.Homography(m))
    assert np.allclose(out.channels[:, :, :-1], img.channels[:, :, 1:])
    assert mask[:, :-1].all() and not mask[:, -1].any()


def test_warp_roundtrip_psnr():
    img = smooth_image(2)
    rng = np.random.default_rng(3)
    h = random_bounded_homography(rng)
    fwd, m1 = geo.warp(img, h)
    back, m2 = geo.warp(fwd, h.inverse())
    mask = m1 & m2
    # erode the mask so half-warped border taps do not count
    interior = mask.copy()
    interior[:2, :] = interior[-2:, :] = False
    interior[:, :2] = interior[:, -2:] = False
    a = img.channels[:, interior]
    b = back.channels[:, interior]
    assert psnr_two_pass(a, b, 1.0) > 35.0


def test_warp_composition():
    img = smooth_image(4)
    rng = np.random.default_rng(5)
    h1 = random_bounded_homography(rng)
    h2 = random_bounded_homography(rng)
    step1, m1 = geo.warp(img, h1)
    step2, m2 = geo.warp(step1, h2)
    combined, mc = geo.warp(img, geo.Homography(h2.m @ h1.m))
    mask = m1 & m2 & mc
    mask[:3, :] = mask[-3:, :] = mask[:, :3] = mask[:, -3:] = False
    assert psnr_two_pass(step2.channels[:, mask], combined.channels[:, mask], 1.0) > 30.0


# ---------------------------------------------------------------------------
# Pair alignment
# ---------------------------------------------------------------------------

def test_align_identity_correspondences_is_noop():
    img = smooth_image(6)
    ref = smooth_image(7)
    aligned, mask = geo.align_pair(img, ref, geo.identity_grid_correspondences(img.shape))
    assert np.allclose(aligned.channels, img.channels, atol=1e-9)
    assert mask.all()


def test_align_recovers_known_warp():
    ref = smooth_image(8)
    rng = np.random.default_rng(9)
    truth = random_bounded_homography(rng)
    # the "captured" UDC image is the reference seen through truth^-1
    udc, _ = geo.warp(ref, truth.inverse())
    grid = [(tuple(p), tuple(q)) for p, q in
            zip(truth.inverse().apply(np.array([(x, y) for x in range(4, 64, 8)
                                                for y in range(4, 64, 8)], dtype=float)),
                [(float(x), float(y)) for x in range(4, 64, 8) for y in range(4, 64, 8)])]
    aligned, mask = geo.align_pair(udc, ref, grid)
    interior = mask.copy()
    interior[:4, :] = interior[-4:, :] = interior[:, :4] = interior[:, -4:] = False
    rmse = float(np.sqrt(np.mean((aligned.channels[:, interior] - ref.channels[:, interior]) ** 2)))
    assert rmse < 0.01


def test_align_shift_excludes_band():
    img = smooth_image(10)
    ref = smooth_image(11)
    shift = [((float(x + 10), float(y)), (float(x), float(y)))
             for x in range(0, 54, 6) for y in range(0, 64, 8)]
    aligned, mask = geo.align_pair(img, ref, shift)
    assert not mask[:, -10:].any()
    assert mask[:, :-10].all()


# ---------------------------------------------------------------------------
# Correspondence files
# ---------------------------------------------------------------------------

def test_correspondence_file_roundtrip(tmp_path):
    pairs = [((1.0, 2.0), (3.0, 4.5)), ((5.25, 6.0), (7.0, 8.0))]
    path = tmp_path / "pts.txt"
    geo.write_correspondences(path, pairs)
    back = geo.read_correspondences(path)
    assert np.allclose(np.array(back, dtype=float).ravel(),
                       np.array(pairs, dtype=float).ravel())


def test_correspondence_file_rejects_malformed(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("1 2 3\n")
    with pytest.raises(geo.GeometryError):
        geo.read_correspondences(path)
