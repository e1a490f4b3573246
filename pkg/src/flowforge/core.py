"""Grid and flow-field fundamentals.

Conventions used everywhere in this package:

* a *grid* is a channel-last float32 array of shape (H, W, C);
* a *flow field* is a grid with C=2, channel 0 = u (horizontal displacement
  in pixels, +x rightward), channel 1 = v (vertical, +y downward);
* pixel (x, y) is valid iff 0 <= x <= W-1 and 0 <= y <= H-1;
* image files are binary PPM (P6) / PGM (P5) with values mapped linearly
  from [0, 1]; flow files use the Middlebury ``.flo`` layout.
"""

import struct

import numpy as np

from .errors import BadDims, BadMagic, DimMismatch, Truncated

FLO_MAGIC = 202021.25


def as_grid(a, channels=None):
    """Validate and convert to a float32 (H, W, C) grid."""
    g = np.asarray(a, dtype=np.float32)
    if g.ndim == 2:
        g = g[:, :, None]
    if g.ndim != 3 or g.shape[0] < 1 or g.shape[1] < 1 or g.shape[2] < 1:
        raise BadDims(f"grid must be (H, W, C) with positive dims, got {g.shape}")
    if channels is not None and g.shape[2] != channels:
        raise DimMismatch(f"expected {channels} channels, got {g.shape[2]}")
    if not np.all(np.isfinite(g)):
        raise BadDims("grid contains non-finite values")
    return np.ascontiguousarray(g)


def as_flow(a):
    """Validate and convert to a float32 (H, W, 2) flow field."""
    return as_grid(a, channels=2)


def read_flo(data):
    """Decode a ``.flo`` byte stream into an (H, W, 2) flow field."""
    if len(data) < 12:
        raise Truncated(f"flo header needs 12 bytes, got {len(data)}")
    magic, = struct.unpack("<f", data[:4])
    if magic != np.float32(FLO_MAGIC):
        raise BadMagic(f"bad flo magic {magic!r}")
    width, height = struct.unpack("<ii", data[4:12])
    if width <= 0 or height <= 0:
        raise BadDims(f"non-positive flo dims {width}x{height}")
    expected = 12 + height * width * 2 * 4
    if len(data) != expected:
        raise Truncated(f"flo payload is {len(data)} bytes, expected {expected}")
    flat = np.frombuffer(data, dtype="<f4", offset=12)
    return np.ascontiguousarray(flat.reshape(height, width, 2))


def write_flo(flow):
    """Encode an (H, W, 2) flow field as canonical little-endian ``.flo`` bytes."""
    f = as_flow(flow)
    h, w = f.shape[:2]
    header = struct.pack("<fii", FLO_MAGIC, w, h)
    return header + f.astype("<f4").tobytes()


def write_ppm(image):
    """Encode an RGB grid with values in [0, 1] as binary PPM (P6, 8-bit)."""
    g = as_grid(image, channels=3)
    h, w = g.shape[:2]
    data = np.clip(np.rint(g * 255.0), 0, 255).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + data.tobytes()


def write_pgm(image):
    """Encode a single-channel grid with values in [0, 1] as binary PGM (P5)."""
    g = as_grid(image, channels=1)
    h, w = g.shape[:2]
    data = np.clip(np.rint(g[:, :, 0] * 255.0), 0, 255).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (w, h) + data.tobytes()


def _read_pnm(data, magic, channels):
    fields = []
    pos = 2
    if data[:2] != magic:
        raise BadMagic(f"expected {magic!r} header")
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1
    w, h, maxval = fields
    if w <= 0 or h <= 0:
        raise BadDims(f"non-positive image dims {w}x{h}")
    count = h * w * channels
    raw = np.frombuffer(data, dtype=np.uint8, offset=pos, count=-1)
    if raw.size != count:
        raise Truncated(f"pnm payload is {raw.size} bytes, expected {count}")
    img = raw.reshape(h, w, channels).astype(np.float32) / float(maxval)
    return np.ascontiguousarray(img)


def read_ppm(data):
    """Decode binary PPM into an (H, W, 3) grid in [0, 1]."""
    return _read_pnm(data, b"P6", 3)


def read_pgm(data):
    """Decode binary PGM into an (H, W, 1) grid in [0, 1]."""
    return _read_pnm(data, b"P5", 1)


def flow_magnitude(flow):
    """Per-pixel Euclidean length of the flow vectors, as an (H, W, 1) grid."""
    f = as_flow(flow)
    return np.sqrt(f[:, :, 0:1] ** 2 + f[:, :, 1:2] ** 2)


def _color_wheel():
    """Standard 55-segment flow color wheel (RY/YG/GC/CB/BM/MR ramps)."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3), np.float32)
    col = 0
    wheel[col:col + ry, 0] = 255
    wheel[col:col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    return wheel / 255.0


_WHEEL = _color_wheel()


def colorize_flow(flow, max_magnitude=None):
    """Map a flow field to RGB: hue encodes direction, saturation magnitude.

    Zero motion maps to pure white. Magnitudes are normalized by
    ``max_magnitude``; when omitted, the per-field maximum is used (1.0 for
    an all-zero field), so the scaling differs from field to field.
    """
    f = as_flow(flow)
    rad = np.hypot(f[:, :, 0], f[:, :, 1])
    if max_magnitude is None:
        m = float(rad.max())
        max_magnitude = m if m > 0 else 1.0
    elif max_magnitude <= 0:
        raise BadDims("max_magnitude must be positive")
    u = f[:, :, 0] / np.float32(max_magnitude)
    v = f[:, :, 1] / np.float32(max_magnitude)
    r = np.hypot(u, v)
    ncols = _WHEEL.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(np.int64)
    k1 = (k0 + 1) % ncols
    t = (fk - k0)[..., None]
    col = (1.0 - t) * _WHEEL[k0] + t * _WHEEL[k1]
    small = r <= 1.0
    rr = r[..., None]
    col = np.where(small[..., None], 1.0 - rr * (1.0 - col), col * 0.75)
    return col.astype(np.float32)


def upsample_nn(grid, factor):
    """Nearest-neighbor upsampling; values are copied, never rescaled."""
    g = as_grid(grid)
    if factor < 1:
        raise BadDims(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return g.copy()
    return np.ascontiguousarray(np.repeat(np.repeat(g, factor, axis=0), factor, axis=1))


def downsample_avg(grid, factor):
    """Non-overlapping box average; ``factor`` may be an int or an (fh, fw) pair."""
    g = as_grid(grid)
    fh, fw = (factor, factor) if np.isscalar(factor) else factor
    if fh < 1 or fw < 1:
        raise BadDims(f"factors must be >= 1, got {(fh, fw)}")
    h, w, c = g.shape
    if h % fh or w % fw:
        raise BadDims(f"dims {h}x{w} not divisible by {(fh, fw)}")
    if fh == 1 and fw == 1:
        return g.copy()
    view = g.reshape(h // fh, fh, w // fw, fw, c)
    return view.mean(axis=(1, 3), dtype=np.float64).astype(np.float32)
