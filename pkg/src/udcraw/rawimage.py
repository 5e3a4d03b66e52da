"""Bayer mosaic handling: color-filter geometry, mosaic/demosaic conversion,
black-level normalization, and the on-disk raw container plus PFM/PPM
interchange formats.

Mosaics are stored as uint16 planes with rows-first indexing; linear images
are float planes of shape (3, H, W). All stencils use reflective border
padding, which keeps border parity intact for 2-periodic color patterns.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate


class RawFormatError(ValueError):
    """Malformed raw container; ``offset`` points at the offending byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BayerPattern(enum.Enum):
    RGGB = 0
    BGGR = 1
    GRBG = 2
    GBRG = 3

    @property
    def layout(self) -> str:
        return self.name

    def color_at(self, r: int, c: int) -> int:
        """Channel index (0=R, 1=G, 2=B) of pixel (r, c)."""
        return "RGB".index(self.name[(r % 2) * 2 + (c % 2)])


@dataclass
class RawFrame:
    """Single-channel Bayer mosaic with the sensor metadata the pipeline needs."""

    mosaic: np.ndarray  # uint16, HxW
    pattern: BayerPattern
    black_level: int
    white_level: int
    exposure_us: int
    iso: int

    def __post_init__(self):
        self.mosaic = np.ascontiguousarray(self.mosaic, dtype=np.uint16)
        h, w = self.mosaic.shape
        if h % 2 or w % 2:
            raise ValueError(f"mosaic must cover full Bayer quads, got {h}x{w}")
        if not (0 <= self.black_level < self.white_level <= 65535):
            raise ValueError(f"invalid levels: black={self.black_level} white={self.white_level}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mosaic.shape


class Range(enum.Enum):
    """Value-range semantics of a PlanarImage."""

    LINEAR_UNIT = "linear_unit"  # [0, 1]
    NETWORK = "network"          # [-1, 1]
    SCENE_HDR = "scene_hdr"      # [0, inf)


@dataclass
class PlanarImage:
    channels: np.ndarray  # float, (3, H, W)
    range_tag: Range

    def __post_init__(self):
        self.channels = np.asarray(self.channels)
        if self.channels.ndim != 3 or self.channels.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) planes, got {self.channels.shape}")
        if self.range_tag is Range.SCENE_HDR and np.any(self.channels < 0):
            raise ValueError("scene_hdr images must be nonnegative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[1:]


# ---------------------------------------------------------------------------
# Black level
# ---------------------------------------------------------------------------

def subtract_black_level(frame: RawFrame) -> np.ndarray:
    """Mosaic as float64 in [0, 1]: (DN - black) / (white - black), clamped at 0."""
    span = frame.white_level - frame.black_level
    out = (frame.mosaic.astype(np.float64) - frame.black_level) / span
    return np.clip(out, 0.0, None)


def reapply_black_level(plane: np.ndarray, frame: RawFrame) -> np.ndarray:
    """Inverse of subtract_black_level: requantize to DN with the frame's levels."""
    span = frame.white_level - frame.black_level
    dn = np.rint(plane * span + frame.black_level)
    return np.clip(dn, 0, frame.white_level).astype(np.uint16)


# ---------------------------------------------------------------------------
# Mosaic / demosaic
# ---------------------------------------------------------------------------

def _site_masks(pattern: BayerPattern, h: int, w: int) -> list[np.ndarray]:
    rr, cc = np.meshgrid(np.arange(h) % 2, np.arange(w) % 2, indexing="ij")
    masks = [np.zeros((h, w), dtype=bool) for _ in range(3)]
    for pr in range(2):
        for pc in range(2):
            masks[pattern.color_at(pr, pc)] |= (rr == pr) & (cc == pc)
    return masks


def mosaic(image: PlanarImage, pattern: BayerPattern) -> np.ndarray:
    """Sample each pixel's native color from a 3-plane image."""
    h, w = image.shape
    if h % 2 or w % 2:
        raise ValueError("mosaic needs even dimensions")
    masks = _site_masks(pattern, h, w)
    out = np.zeros((h, w), dtype=image.channels.dtype)
    for ch in range(3):
        out[masks[ch]] = image.channels[ch][masks[ch]]
    return out


# Sparse-plane bilinear stencils: green lives on a quincunx grid, red/blue on
# a rectangular one; the center taps reproduce native samples exactly.
_BILINEAR_G = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64) / 4.0
_BILINEAR_RB = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 4.0


def demosaic_bilinear(plane: np.ndarray, pattern: BayerPattern) -> PlanarImage:
    """Standard bilinear interpolation on each sparse color plane."""
    h, w = plane.shape
    if h % 2 or w % 2:
        raise ValueError("demosaic needs even dimensions")
    padded = np.pad(plane.astype(np.float64), 2, mode="reflect")
    masks = _site_masks(pattern, *padded.shape)
    out = np.empty((3, h, w), dtype=np.float64)
    for ch, stencil in ((0, _BILINEAR_RB), (1, _BILINEAR_G), (2, _BILINEAR_RB)):
        sparse = np.where(masks[ch], padded, 0.0)
        full = correlate(sparse, stencil, mode="constant")
        out[ch] = full[2:-2, 2:-2]
    return PlanarImage(out, Range.LINEAR_UNIT)


# Gradient-corrected 5x5 stencils (bilinear estimate plus a gain-weighted
# Laplacian of the channel native to the site). Applied to the raw mosaic
# directly; rows select by site geometry, not by output channel.
_GC_CROSS = np.array([
    [0, 0, -1, 0, 0],
    [0, 0, 2, 0, 0],
    [-1, 2, 4, 2, -1],
    [0, 0, 2, 0, 0],
    [0, 0, -1, 0, 0],
], dtype=np.float64) / 8.0

_GC_ROW = np.array([
    [0, 0, 0.5, 0, 0],
    [0, -1, 0, -1, 0],
    [-1, 4, 5, 4, -1],
    [0, -1, 0, -1, 0],
    [0, 0, 0.5, 0, 0],
], dtype=np.float64) / 8.0

_GC_COL = _GC_ROW.T.copy()

_GC_DIAG = np.array([
    [0, 0, -1.5, 0, 0],
    [0, 2, 0, 2, 0],
    [-1.5, 0, 6, 0, -1.5],
    [0, 2, 0, 2, 0],
    [0, 0, -1.5, 0, 0],
], dtype=np.float64) / 8.0


def demosaic_gradient_corrected(plane: np.ndarray, pattern: BayerPattern) -> PlanarImage:
    h, w = plane.shape
    if h % 2 or w % 2:
        raise ValueError("demosaic needs even dimensions")
    padded = np.pad(plane.astype(np.float64), 2, mode="reflect")
    cross = correlate(padded, _GC_CROSS, mode="constant")[2:-2, 2:-2]
    row = correlate(padded, _GC_ROW, mode="constant")[2:-2, 2:-2]
    col = correlate(padded, _GC_COL, mode="constant")[2:-2, 2:-2]
    diag = correlate(padded, _GC_DIAG, mode="constant")[2:-2, 2:-2]

    out = np.empty((3, h, w), dtype=np.float64)
    masks = _site_masks(pattern, h, w)
    for ch in (0, 2):
        # At a green site the target channel sits either in the same row or
        # the same column; which one depends on the pattern geometry.
        row_sites = np.zeros((h, w), dtype=bool)
        col_sites = np.zeros((h, w), dtype=bool)
        for pr in range(2):
            for pc in range(2):
                if pattern.color_at(pr, pc) != 1:
                    continue
                sel = (np.arange(h)[:, None] % 2 == pr) & (np.arange(w)[None, :] % 2 == pc)
                if pattern.color_at(pr, (pc + 1) % 2) == ch:
                    row_sites |= sel
                else:
                    col_sites |= sel
        out[ch] = np.where(masks[ch], plane,
                           np.where(row_sites, row,
                                    np.where(col_sites, col, diag)))
    out[1] = np.where(masks[1], plane, cross)
    return PlanarImage(out, Range.LINEAR_UNIT)


# ---------------------------------------------------------------------------
# Raw container ("UDCR")
# ---------------------------------------------------------------------------

_MAGIC = b"UDCR"
_HEADER = struct.Struct("<4sHIIBBHHII")


def write_raw(path, frame: RawFrame) -> None:
    header = _HEADER.pack(_MAGIC, 1, frame.shape[1], frame.shape[0],
                          frame.pattern.value, 0, frame.black_level,
                          frame.white_level, frame.exposure_us, frame.iso)
    with open(path, "wb") as f:
        f.write(header)
        f.write(frame.mosaic.astype("<u2").tobytes())


def read_raw(path) -> RawFrame:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise RawFormatError("truncated header", len(blob))
    magic, version, width, height, pattern_byte, _res, black, white, exposure, iso = \
        _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise RawFormatError(f"bad magic {magic!r}", 0)
    if version != 1:
        raise RawFormatError(f"unsupported version {version}", 4)
    try:
        pattern = BayerPattern(pattern_byte)
    except ValueError:
        raise RawFormatError(f"invalid pattern byte {pattern_byte}", 14) from None
    expected = height * width * 2
    payload = blob[_HEADER.size:]
    if len(payload) != expected:
        raise RawFormatError(
            f"payload is {len(payload)} bytes, header declares {expected}",
            _HEADER.size + min(len(payload), expected))
    mosaic_arr = np.frombuffer(payload, dtype="<u2").reshape(height, width)
    return RawFrame(mosaic_arr.copy(), pattern, black, white, exposure, iso)


# ---------------------------------------------------------------------------
# PFM / PPM interchange
# ---------------------------------------------------------------------------

def write_pfm(path, data: np.ndarray) -> None:
    """Binary PFM, little-endian; accepts (H, W) or (3, H, W) float data."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3:
        if data.shape[0] != 3:
            raise ValueError("color PFM needs 3 planes")
        h, w = data.shape[1:]
        pixels = np.moveaxis(data, 0, -1)  # H, W, 3
        header = b"PF\n"
    elif data.ndim == 2:
        h, w = data.shape
        pixels = data
        header = b"Pf\n"
    else:
        raise ValueError("PFM data must be 2-d or 3-plane")
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(pixels[::-1].astype("<f4").tobytes())  # PFM rows run bottom-up


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"not a PFM file: {kind!r}")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * (3 if kind == b"PF" else 1)
        pixels = np.frombuffer(f.read(count * 4), dtype=dtype).astype(np.float32)
    if kind == b"PF":
        return np.moveaxis(pixels.reshape(h, w, 3)[::-1], -1, 0).copy()
    return pixels.reshape(h, w)[::-1].copy()


def write_ppm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Binary PPM (P6) from display-referred (3, H, W) data in [0, 1]."""
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    quant = np.rint(image * maxval)
    pixels = np.moveaxis(quant, 0, -1)
    with open(path, "wb") as f:
        f.write(f"P6\n{image.shape[2]} {image.shape[1]}\n{maxval}\n".encode())
        if maxval == 255:
            f.write(pixels.astype(np.uint8).tobytes())
        else:
            f.write(pixels.astype(">u2").tobytes())  # 16-bit PPM is big-endian


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise ValueError("not a binary PPM")
        w, h = (int(v) for v in f.readline().split())
        maxval = int(f.readline())
        raw = f.read()
    dtype = np.uint8 if maxval < 256 else ">u2"
    pixels = np.frombuffer(raw, dtype=dtype).reshape(h, w, 3).astype(np.float64)
    return np.moveaxis(pixels / maxval, -1, 0)
