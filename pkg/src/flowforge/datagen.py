"""Synthetic small-displacement training data.

Scenes are 2D composites: textured polygon/ellipse sprites with rigid
motions (translation plus bounded rotation/scale) drawn back-to-front over
a fixed background. Because shapes, textures and motions are analytic, the
ground-truth flow is exact: at every pixel it is the motion of the topmost
object covering it in the first frame, or zero on the background. The
visibility mask marks first-frame pixels that are neither occluded by a
nearer object in the second frame nor mapped outside it.

Every sample is a pure function of (params.seed, index). A photometric
self-check (warping the second image by the ground-truth flow must
reproduce the first on visible pixels) runs on every generated sample and
aborts generation on failure.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace, asdict

import numpy as np

from . import warp
from .core import read_flo, read_pgm, read_ppm, write_flo, write_pgm, write_ppm
from .errors import BadParams, FlowForgeError

_LATTICE = 32


@dataclass(frozen=True)
class DisplacementDist:
    """Named distribution over displacement magnitudes (pixels, >= 0)."""
    kind: str = "lognormal"   # lognormal | uniform | constant
    median: float = 0.4
    sigma: float = 1.0
    lo: float = 0.0
    hi: float = 1.0
    value: float = 1.0

    def sample(self, rng):
        if self.kind == "lognormal":
            return float(np.exp(math.log(self.median) + self.sigma * rng.standard_normal()))
        if self.kind == "uniform":
            return float(rng.uniform(self.lo, self.hi))
        if self.kind == "constant":
            return self.value
        raise BadParams(f"unknown displacement kind {self.kind!r}")

    def cdf(self, x):
        """Uncapped CDF, used to validate generated statistics."""
        if self.kind == "lognormal":
            if x <= 0:
                return 0.0
            z = (math.log(x) - math.log(self.median)) / self.sigma
            return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))
        if self.kind == "uniform":
            return min(1.0, max(0.0, (x - self.lo) / (self.hi - self.lo)))
        if self.kind == "constant":
            return 1.0 if x >= self.value else 0.0
        raise BadParams(f"unknown displacement kind {self.kind!r}")


@dataclass(frozen=True)
class SceneParams:
    """Controls for the scene sampler; all randomness derives from (seed, index)."""
    image_size: tuple = (48, 64)          # (H, W)
    n_objects: tuple = (2, 4)             # inclusive range
    displacement: DisplacementDist = DisplacementDist()
    background_weights: tuple = (1.0, 0.0, 0.0)   # textured, homogeneous, gradient
    object_kinds: tuple = ("polygon", "ellipse")
    object_radius: tuple = (6.0, 14.0)
    rotation_max: float = 0.0             # radians
    scale_jitter: float = 0.0             # relative, e.g. 0.05 -> scale in [0.95, 1.05]
    brightness_jitter: float = 0.0        # frame-2 gain in [1-j, 1+j]
    photometric_tol: float = 0.02
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if h < 1 or w < 1:
            raise BadParams(f"bad image size {self.image_size}")
        lo, hi = self.n_objects
        if lo < 0 or hi < lo:
            raise BadParams(f"bad object count range {self.n_objects}")
        wsum = sum(self.background_weights)
        if len(self.background_weights) != 3 or abs(wsum - 1.0) > 1e-6:
            raise BadParams("background weights must be 3 values summing to 1")
        if not self.object_kinds:
            raise BadParams("need at least one object kind")
        if self.seed < 0:
            raise BadParams("seed must be non-negative")

    @property
    def displacement_cap(self):
        return 0.3 * min(self.image_size)

    @property
    def effective_tol(self):
        # brightness perturbation is a deliberate photometric violation
        return self.photometric_tol + self.brightness_jitter


@dataclass(frozen=True)
class SampleRecord:
    i1: np.ndarray          # (H, W, 3) in [0, 1]
    i2: np.ndarray
    flow: np.ndarray        # (H, W, 2) ground truth, pixels
    visibility: np.ndarray  # (H, W, 1) in {0, 1}


def sdhom_params(seed=0, image_size=(48, 64)):
    """Sub-pixel-dominant preset: mostly < 1 px motion, weakly textured
    and homogeneous/gradient backgrounds kept fixed."""
    return SceneParams(
        image_size=image_size,
        n_objects=(2, 4),
        displacement=DisplacementDist("lognormal", median=0.4, sigma=1.0),
        background_weights=(0.4, 0.3, 0.3),
        rotation_max=0.02,
        scale_jitter=0.01,
        seed=seed,
    )


def curriculum_pair(base):
    """Derive the (simple, complex) dataset pair from shared base params.

    simple: pure translations with a larger displacement scale over fully
    textured backgrounds. complex: adds per-object rotation/scale and a
    frame-2 brightness perturbation, with homogeneous/gradient backgrounds
    in the mix. Both keep the base image size and seed derivation.
    """
    simple = replace(
        base,
        displacement=DisplacementDist("lognormal", median=2.5, sigma=0.6),
        background_weights=(1.0, 0.0, 0.0),
        rotation_max=0.0,
        scale_jitter=0.0,
        brightness_jitter=0.0,
    )
    complex_ = replace(
        base,
        displacement=DisplacementDist("lognormal", median=1.5, sigma=0.8),
        background_weights=(0.34, 0.33, 0.33),
        rotation_max=0.15,
        scale_jitter=0.05,
        brightness_jitter=0.03,
        photometric_tol=base.photometric_tol,
    )
    return simple, complex_


class ValueNoise:
    """Seeded lattice value-noise, evaluable at arbitrary real coordinates."""

    def __init__(self, rng, base_freq=0.15, octaves=2):
        self.tables = [rng.random((_LATTICE, _LATTICE)).astype(np.float32)
                       for _ in range(octaves)]
        self.freqs = [base_freq * (2.0 ** o) for o in range(octaves)]
        self.amps = [1.0 / (2.0 ** o) for o in range(octaves)]
        self.offsets = rng.uniform(0, _LATTICE, size=(octaves, 2)).astype(np.float32)

    @staticmethod
    def _lattice(table, x, y):
        ix = np.floor(x)
        iy = np.floor(y)
        fx = (x - ix).astype(np.float32)
        fy = (y - iy).astype(np.float32)
        sx = fx * fx * (3.0 - 2.0 * fx)
        sy = fy * fy * (3.0 - 2.0 * fy)
        i0 = ix.astype(np.int64) % _LATTICE
        j0 = iy.astype(np.int64) % _LATTICE
        i1 = (i0 + 1) % _LATTICE
        j1 = (j0 + 1) % _LATTICE
        return (table[j0, i0] * (1 - sx) * (1 - sy) + table[j0, i1] * sx * (1 - sy)
                + table[j1, i0] * (1 - sx) * sy + table[j1, i1] * sx * sy)

    def __call__(self, x, y):
        acc = 0.0
        norm = 0.0
        for table, f, a, (ox, oy) in zip(self.tables, self.freqs, self.amps, self.offsets):
            acc = acc + a * self._lattice(table, x * f + ox, y * f + oy)
            norm += a
        return acc / norm


def _color_pair(rng):
    c0 = rng.uniform(0.08, 0.92, 3).astype(np.float32)
    delta = rng.uniform(0.25, 0.6, 3) * rng.choice((-1.0, 1.0), 3)
    c1 = np.clip(c0 + delta, 0.05, 0.95).astype(np.float32)
    return c0, c1


class Texture:
    """Noise-modulated color ramp."""

    def __init__(self, rng, base_freq=0.15):
        self.noise = ValueNoise(rng, base_freq)
        self.c0, self.c1 = _color_pair(rng)

    def color_at(self, pts):
        v = self.noise(pts[..., 0], pts[..., 1])[..., None]
        return self.c0 + v * (self.c1 - self.c0)


class Background:
    def __init__(self, rng, kind, image_size):
        self.kind = kind
        h, w = image_size
        if kind == "textured":
            self.texture = Texture(rng, base_freq=0.18)
        elif kind == "homogeneous":
            self.color = rng.uniform(0.1, 0.9, 3).astype(np.float32)
        elif kind == "gradient":
            self.c0, self.c1 = _color_pair(rng)
            ang = rng.uniform(0, 2 * np.pi)
            self.direction = np.array([np.cos(ang), np.sin(ang)], np.float64)
            corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], np.float64)
            dots = corners @ self.direction
            self.t0 = float(dots.min())
            self.span = max(1e-6, float(dots.max()) - self.t0)
        else:
            raise BadParams(f"unknown background kind {kind!r}")

    def color_at(self, pts):
        if self.kind == "textured":
            return self.texture.color_at(pts)
        if self.kind == "homogeneous":
            return np.broadcast_to(self.color, pts.shape[:-1] + (3,)).copy()
        t = ((pts[..., 0] * self.direction[0] + pts[..., 1] * self.direction[1])
             - self.t0) / self.span
        t = np.clip(t, 0.0, 1.0).astype(np.float32)
        return self.c0 + t[..., None] * (self.c1 - self.c0)


class SceneObject:
    """A textured sprite with a rigid in-plane motion A(x) = M (x - c) + c + t."""

    def __init__(self, kind, center, shape, motion_matrix, translation, texture):
        self.kind = kind                       # "polygon" | "ellipse"
        self.center = np.asarray(center, np.float64)
        self.shape = shape                     # (K,2) local vertices | (a, b, theta)
        self.m = np.asarray(motion_matrix, np.float64)
        self.m_inv = np.linalg.inv(self.m)
        self.t = np.asarray(translation, np.float64)
        self.texture = texture

    def forward_map(self, pts):
        return (pts - self.center) @ self.m.T + self.center + self.t

    def inverse_map(self, pts):
        return (pts - self.center - self.t) @ self.m_inv.T + self.center

    def contains(self, pts):
        """Membership in first-frame coordinates."""
        local = pts - self.center
        if self.kind == "ellipse":
            a, b, theta = self.shape
            ct, st = np.cos(theta), np.sin(theta)
            xr = local[..., 0] * ct + local[..., 1] * st
            yr = -local[..., 0] * st + local[..., 1] * ct
            return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0
        return _points_in_polygon(local, self.shape)

    def color_at(self, pts):
        local = pts - self.center
        return self.texture.color_at(local)


def _points_in_polygon(pts, verts):
    """Even-odd rule over a simple polygon; pts (..., 2) in local coords."""
    shape = pts.shape[:-1]
    p = pts.reshape(-1, 2)
    x = p[:, 0:1]
    y = p[:, 1:2]
    x1 = verts[None, :, 0]
    y1 = verts[None, :, 1]
    x2 = np.roll(verts[:, 0], -1)[None, :]
    y2 = np.roll(verts[:, 1], -1)[None, :]
    crosses = ((y1 <= y) & (y2 > y)) | ((y2 <= y) & (y1 > y))
    denom = np.where(y2 == y1, 1.0, y2 - y1)
    xin = x1 + (y - y1) / denom * (x2 - x1)
    inside = ((crosses & (xin > x)).sum(axis=1) % 2) == 1
    return inside.reshape(shape)


@dataclass(frozen=True)
class Scene:
    image_size: tuple
    background: Background
    objects: tuple            # back-to-front; later index wins ties
    brightness: float         # frame-2 gain


def _rng_for(params, index):
    return np.random.default_rng(np.random.SeedSequence([int(params.seed), int(index)]))


def make_scene(params, index):
    """Sample the full analytic scene description for one record."""
    rng = _rng_for(params, index)
    h, w = params.image_size
    kinds = ("textured", "homogeneous", "gradient")
    bg_kind = kinds[int(rng.choice(3, p=np.asarray(params.background_weights, np.float64)))]
    background = Background(rng, bg_kind, params.image_size)
    count = int(rng.integers(params.n_objects[0], params.n_objects[1] + 1))
    objects = []
    max_radius = 0.45 * min(h, w)
    for _ in range(count):
        kind = str(rng.choice(np.asarray(params.object_kinds, object)))
        radius = min(float(rng.uniform(*params.object_radius)), max_radius)
        center = np.array([rng.uniform(0.1 * w, 0.9 * w), rng.uniform(0.1 * h, 0.9 * h)])
        if kind == "ellipse":
            shape = (radius * rng.uniform(0.6, 1.0), radius * rng.uniform(0.6, 1.0),
                     rng.uniform(0, np.pi))
        elif kind == "polygon":
            k = int(rng.integers(3, 8))
            angles = np.sort(rng.uniform(0, 2 * np.pi, k))
            radii = radius * rng.uniform(0.55, 1.0, k)
            shape = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        else:
            raise BadParams(f"unknown object kind {kind!r}")
        magnitude = min(params.displacement.sample(rng), params.displacement_cap)
        if magnitude < 0:
            raise BadParams("displacement sample is negative")
        direction = rng.uniform(0, 2 * np.pi)
        translation = magnitude * np.array([np.cos(direction), np.sin(direction)])
        angle = rng.uniform(-params.rotation_max, params.rotation_max)
        scale = 1.0 + rng.uniform(-params.scale_jitter, params.scale_jitter)
        ca, sa = np.cos(angle), np.sin(angle)
        motion = scale * np.array([[ca, -sa], [sa, ca]])
        texture = Texture(rng, base_freq=rng.uniform(0.12, 0.22))
        objects.append(SceneObject(kind, center, shape, motion, translation, texture))
    brightness = 1.0 + rng.uniform(-params.brightness_jitter, params.brightness_jitter) \
        if params.brightness_jitter > 0 else 1.0
    return Scene(params.image_size, background, tuple(objects), brightness)


def _pixel_grid(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs, ys], axis=-1).astype(np.float64)


def _topmost_at(objects, pts):
    """Index of the topmost object covering each (real-valued) point, else -1."""
    owner = np.full(pts.shape[:-1], -1, np.int64)
    for idx, obj in enumerate(objects):
        covered = obj.contains(obj.inverse_map(pts))
        owner[covered] = idx
    return owner


def render_scene(scene):
    """Rasterize both frames plus exact flow and visibility."""
    h, w = scene.image_size
    pts = _pixel_grid(h, w)
    i1 = scene.background.color_at(pts).astype(np.float32)
    owner1 = np.full((h, w), -1, np.int64)
    for idx, obj in enumerate(scene.objects):
        m = obj.contains(pts)
        if m.any():
            i1[m] = obj.color_at(pts[m])
        owner1[m] = idx
    flow = np.zeros((h, w, 2), np.float32)
    for idx, obj in enumerate(scene.objects):
        sel = owner1 == idx
        if sel.any():
            flow[sel] = (obj.forward_map(pts[sel]) - pts[sel]).astype(np.float32)
    i2 = scene.background.color_at(pts).astype(np.float32)
    for idx, obj in enumerate(scene.objects):
        back = obj.inverse_map(pts)
        m = obj.contains(back)
        if m.any():
            i2[m] = obj.color_at(back[m])
    if scene.brightness != 1.0:
        i2 = np.clip(i2 * np.float32(scene.brightness), 0.0, 1.0)
    visibility = np.zeros((h, w), np.float32)
    bg_sel = owner1 == -1
    owner2_grid = _topmost_at(scene.objects, pts)
    visibility[bg_sel] = (owner2_grid[bg_sel] == -1).astype(np.float32)
    for idx, obj in enumerate(scene.objects):
        sel = owner1 == idx
        if not sel.any():
            continue
        target = pts[sel] + flow[sel]
        in_frame = ((target[:, 0] >= 0) & (target[:, 0] <= w - 1)
                    & (target[:, 1] >= 0) & (target[:, 1] <= h - 1))
        top = _topmost_at(scene.objects, target)
        visibility[sel] = (in_frame & (top == idx)).astype(np.float32)
    i1 = np.clip(i1, 0.0, 1.0)
    i2 = np.clip(i2, 0.0, 1.0)
    return SampleRecord(np.ascontiguousarray(i1), np.ascontiguousarray(i2),
                        flow, visibility[..., None])


def photometric_error(record):
    """Mean |I2 warped by the ground-truth flow - I1| over visible pixels."""
    warped, _ = warp.warp_forward(record.i2, record.flow)
    sel = record.visibility[:, :, 0] > 0.5
    if not sel.any():
        return 0.0
    diff = np.abs(warped.astype(np.float64) - record.i1.astype(np.float64))
    return float(diff[sel].mean())


def generate_sample(params, index):
    """Render the deterministic sample for (params, index), self-checked."""
    record = render_scene(make_scene(params, index))
    err = photometric_error(record)
    if err > params.effective_tol:
        raise FlowForgeError(
            f"photometric self-check failed on sample {index}: "
            f"error {err:.4f} > {params.effective_tol:.4f}")
    return record


def _params_lines(params):
    d = asdict(params)
    disp = d.pop("displacement")
    lines = [f"# {k}={v}" for k, v in sorted(d.items())]
    lines += [f"# displacement.{k}={v}" for k, v in sorted(disp.items())]
    return lines


def _worker_count():
    try:
        return max(1, int(os.environ.get("FLOWFORGE_THREADS", "1")))
    except ValueError:
        return 1


def generate_dataset(params, count, out_dir):
    """Write count samples (PPM/flo/PGM) plus a manifest; returns its path.

    Generation is parallel over indices when FLOWFORGE_THREADS > 1; files
    and manifest rows are written in index order either way.
    """
    os.makedirs(out_dir, exist_ok=True)
    if _worker_count() > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
            records = list(pool.map(lambda i: generate_sample(params, i), range(count)))
    else:
        records = [generate_sample(params, i) for i in range(count)]
    rows = []
    for i, rec in enumerate(records):
        names = (f"{i:06d}_i1.ppm", f"{i:06d}_i2.ppm", f"{i:06d}_flow.flo",
                 f"{i:06d}_vis.pgm")
        payloads = (write_ppm(rec.i1), write_ppm(rec.i2), write_flo(rec.flow),
                    write_pgm(rec.visibility))
        for name, payload in zip(names, payloads):
            with open(os.path.join(out_dir, name), "wb") as fh:
                fh.write(payload)
        rows.append(f"{i}\t" + "\t".join(names))
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as fh:
        fh.write("\n".join(_params_lines(params) + rows) + "\n")
    return manifest


@dataclass(frozen=True)
class Dataset:
    """In-memory dataset stacked along the first axis."""
    i1: np.ndarray
    i2: np.ndarray
    flow: np.ndarray
    visibility: np.ndarray

    def __len__(self):
        return self.i1.shape[0]

    @staticmethod
    def from_records(records):
        return Dataset(np.stack([r.i1 for r in records]),
                       np.stack([r.i2 for r in records]),
                       np.stack([r.flow for r in records]),
                       np.stack([r.visibility for r in records]))


def generate_in_memory(params, count):
    return Dataset.from_records([generate_sample(params, i) for i in range(count)])


def load_dataset(manifest_path):
    """Read a generated dataset back from its manifest."""
    if os.path.isdir(manifest_path):
        manifest_path = os.path.join(manifest_path, "manifest.txt")
    base = os.path.dirname(manifest_path)
    records = []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            _, n1, n2, nf, nv = line.split("\t")
            with open(os.path.join(base, n1), "rb") as f:
                i1 = read_ppm(f.read())
            with open(os.path.join(base, n2), "rb") as f:
                i2 = read_ppm(f.read())
            with open(os.path.join(base, nf), "rb") as f:
                flow = read_flo(f.read())
            with open(os.path.join(base, nv), "rb") as f:
                vis = np.rint(read_pgm(f.read()))
            records.append(SampleRecord(i1, i2, flow, vis))
    if not records:
        return Dataset(np.zeros((0, 1, 1, 3), np.float32), np.zeros((0, 1, 1, 3), np.float32),
                       np.zeros((0, 1, 1, 2), np.float32), np.zeros((0, 1, 1, 1), np.float32))
    return Dataset.from_records(records)


def index_hash(i):
    """64-bit mix used for the deterministic train/validation split."""
    x = (i + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def split_indices(count):
    """Deterministic 90/10 train/validation split by index hash."""
    train, val = [], []
    for i in range(count):
        (val if index_hash(i) % 10 == 0 else train).append(i)
    if not val and count:
        val.append(train.pop())
    return train, val
