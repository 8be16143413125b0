"""Procedural multi-view image data.

Each object is a randomly drawn 2D shape (polygon or ellipse) with an
orientation marker, rendered against a constant mid-gray background at a
canonical pose (the input x) and under each of the K conditions (the targets
y_0..y_{K-1}). The rotation family rotates the geometry about the object
center, with condition 0 the identity, so y_0 == x byte for byte. The
illumination family keeps the pose and sweeps a directional brightness ramp
across the object.

Rendering is a pure function of (object spec, condition): geometry is point
sampled on a 4x4 subpixel grid, composited over the background and quantized
to u8, and the foreground mask is exactly the set of pixels that differ from
the background after quantization.

Container format "LTND" (little-endian):

    magic    4 bytes b"LTND"
    version  u32
    n        u32 samples
    size     u16, channels u16, K u16, family u16 (0 rotation, 1 illumination)
    seed     u64
    records, each:
        object_id u32
        (K+1) * channels*size*size bytes of u8 image data (x, then y_0..y_{K-1}),
        K mask bitmaps, each ceil(size*size/8) bytes (np.packbits order)

Generation writes one file per split (train.ltnd / test.ltnd), split by
object identity.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .config import DatasetConfig
from .tensor import Tensor

MAGIC = b"LTND"
VERSION = 1
BACKGROUND = (0.5, 0.5, 0.5)
SUBSAMPLES = 4  # per axis
FAMILIES = {"rotation": 0, "illumination": 1}
FAMILY_NAMES = {v: k for k, v in FAMILIES.items()}


class DataFormatError(RuntimeError):
    pass


def parse_palette(spec):
    colors = []
    for part in spec.split(","):
        part = part.strip()
        if len(part) != 6:
            raise ValueError(f"palette entry {part!r} is not 6 hex digits")
        colors.append(tuple(int(part[i : i + 2], 16) / 255.0 for i in (0, 2, 4)))
    return colors


@dataclass
class ObjectSpec:
    kind: str  # "polygon" or "ellipse"
    vertices: np.ndarray  # polygon corners or ellipse (a, b) packed, object frame
    center: np.ndarray
    base_angle: float
    body_color: np.ndarray
    marker_offset: np.ndarray
    marker_radius: float
    marker_color: np.ndarray


def make_object(object_id, seed, palette):
    rng = np.random.default_rng([seed, object_id])
    kind = "polygon" if rng.random() < 0.6 else "ellipse"
    radius = rng.uniform(0.22, 0.34)
    if kind == "polygon":
        n = int(rng.integers(3, 7))
        angles = np.arange(n) * (2.0 * math.pi / n)
        radii = radius * rng.uniform(0.75, 1.0, size=n)
        vertices = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    else:
        vertices = np.array([[radius, radius * rng.uniform(0.5, 0.85)]])
    center = np.array([0.5, 0.5]) + rng.uniform(-0.05, 0.05, size=2)
    body_idx = int(rng.integers(0, len(palette)))
    marker_idx = (body_idx + 1 + int(rng.integers(0, len(palette) - 1))) % len(palette)
    return ObjectSpec(
        kind=kind,
        vertices=vertices,
        center=center,
        base_angle=float(rng.uniform(0.0, 2.0 * math.pi)),
        body_color=np.asarray(palette[body_idx]),
        marker_offset=np.array([0.55 * radius, 0.0]),
        marker_radius=0.3 * radius,
        marker_color=np.asarray(palette[marker_idx]),
    )


def condition_parameter(family, k, n_conditions):
    """The angle (rotation) or azimuth (illumination) for condition k."""
    return k * 2.0 * math.pi / n_conditions


def _sample_points(size):
    # subpixel centers in unit coordinates, shape (size*S, )
    s = SUBSAMPLES
    return (np.arange(size * s) + 0.5) / (size * s)


def _coverage(spec, angle, size):
    """Body and marker coverage fractions per pixel, geometry rotated by angle."""
    xs = _sample_points(size)
    px, py = np.meshgrid(xs, xs, indexing="xy")  # py rows grow downward
    # rotate sample points back into the object's canonical frame
    rel_x = px - spec.center[0]
    rel_y = py - spec.center[1]
    total = spec.base_angle + angle
    ca, sa = math.cos(-total), math.sin(-total)
    ox = ca * rel_x - sa * rel_y
    oy = sa * rel_x + ca * rel_y

    if spec.kind == "polygon":
        inside = np.zeros(ox.shape, dtype=bool)
        verts = spec.vertices
        n = len(verts)
        for i in range(n):
            x1, y1 = verts[i]
            x2, y2 = verts[(i + 1) % n]
            crosses = (y1 > oy) != (y2 > oy)
            with np.errstate(divide="ignore", invalid="ignore"):
                xi = (x2 - x1) * (oy - y1) / (y2 - y1) + x1
            inside ^= crosses & (ox < xi)
    else:
        a, b = spec.vertices[0]
        inside = (ox / a) ** 2 + (oy / b) ** 2 <= 1.0

    mrel_x = ox - spec.marker_offset[0]
    mrel_y = oy - spec.marker_offset[1]
    marker = mrel_x * mrel_x + mrel_y * mrel_y <= spec.marker_radius**2

    s = SUBSAMPLES
    body_cov = inside.reshape(size, s, size, s).mean(axis=(1, 3))
    marker_cov = marker.reshape(size, s, size, s).mean(axis=(1, 3))
    return body_cov, marker_cov


def _shade_field(spec, azimuth, size):
    xs = (np.arange(size) + 0.5) / size
    px, py = np.meshgrid(xs, xs, indexing="xy")
    ux, uy = math.cos(azimuth), math.sin(azimuth)
    r = float(np.abs(spec.vertices).max())
    proj = ((px - spec.center[0]) * ux + (py - spec.center[1]) * uy) / max(r, 1e-6)
    return np.clip(1.0 + 0.35 * proj, 0.6, 1.4)


def render_view(spec, family, k, n_conditions, size, canonical=False):
    """Render one u8 view (3, size, size). canonical=True renders the input x."""
    param = 0.0 if canonical else condition_parameter(family, k, n_conditions)
    angle = param if family == "rotation" else 0.0
    body_cov, marker_cov = _coverage(spec, angle, size)

    body_color = spec.body_color
    marker_color = spec.marker_color
    img = np.empty((size, size, 3))
    img[:] = BACKGROUND
    if family == "illumination" and not canonical:
        shade = _shade_field(spec, param, size)[..., None]
        body = np.clip(body_color * shade, 0.0, 1.0)
        marker = np.clip(marker_color * shade, 0.0, 1.0)
    else:
        body = np.broadcast_to(body_color, img.shape)
        marker = np.broadcast_to(marker_color, img.shape)
    cov = body_cov[..., None]
    img = img * (1.0 - cov) + body * cov
    cov = marker_cov[..., None]
    img = img * (1.0 - cov) + marker * cov
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return u8.transpose(2, 0, 1)


def background_u8():
    return np.clip(np.rint(np.asarray(BACKGROUND) * 255.0), 0, 255).astype(np.uint8)


def mask_of(view_u8):
    """Foreground mask: pixels that differ from the background in any channel."""
    bg = background_u8()[:, None, None]
    return (view_u8 != bg).any(axis=0)


def render_sample(spec, family, size, n_conditions):
    """x plus K targets and K masks for one object."""
    x = render_view(spec, family, 0, n_conditions, size, canonical=True)
    targets = [render_view(spec, family, k, n_conditions, size) for k in range(n_conditions)]
    masks = [mask_of(t) for t in targets]
    return x, targets, masks


# ---------------------------------------------------------------------------
# container


def _mask_bytes(size):
    return (size * size + 7) // 8


def record_size(size, channels, n_conditions):
    return 4 + (n_conditions + 1) * channels * size * size + n_conditions * _mask_bytes(size)


def header_size():
    return 4 + 4 + 4 + 2 * 4 + 8


def expected_file_size(n_samples, size, channels, n_conditions):
    return header_size() + n_samples * record_size(size, channels, n_conditions)


def write_split(path, object_ids, specs, cfg: DatasetConfig):
    family = cfg.family
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(object_ids)))
        fh.write(struct.pack("<HHHH", cfg.image_size, 3, cfg.n_conditions, FAMILIES[family]))
        fh.write(struct.pack("<Q", cfg.seed))
        for oid in object_ids:
            x, targets, masks = render_sample(specs[oid], family, cfg.image_size, cfg.n_conditions)
            fh.write(struct.pack("<I", oid))
            fh.write(x.tobytes())
            for t in targets:
                fh.write(t.tobytes())
            for m in masks:
                fh.write(np.packbits(m.reshape(-1)).tobytes())


def generate_dataset(cfg: DatasetConfig, out_dir, export_png=False):
    """Render every object and write train/test splits; returns the two paths."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    palette = parse_palette(cfg.palette)
    specs = {oid: make_object(oid, cfg.seed, palette) for oid in range(cfg.n_objects)}
    n_train = int(cfg.n_objects * cfg.split_fraction)
    n_train = min(max(n_train, 1), cfg.n_objects - 1)  # both splits stay non-empty
    train_ids = list(range(n_train))
    test_ids = list(range(n_train, cfg.n_objects))
    train_path = os.path.join(out_dir, "train.ltnd")
    test_path = os.path.join(out_dir, "test.ltnd")
    write_split(train_path, train_ids, specs, cfg)
    write_split(test_path, test_ids, specs, cfg)
    if export_png:
        from .images import save_png, make_grid

        for name, path in (("train", train_path), ("test", test_path)):
            ds = Dataset(path)
            rows = []
            for i in range(min(len(ds), 16)):
                rows.append([ds.images[i, j] for j in range(cfg.n_conditions + 1)])
            save_png(os.path.join(out_dir, f"{name}_views.png"), make_grid(rows))
    return train_path, test_path


class Dataset:
    """An LTND split loaded fully into memory; loading is read-only."""

    def __init__(self, path):
        self.path = path
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != MAGIC:
            raise DataFormatError(f"{path}: bad magic at offset 0, not an LTND file")
        version, n = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise DataFormatError(f"{path}: unsupported version {version} at offset 4")
        size, channels, n_cond, family = struct.unpack_from("<HHHH", raw, 12)
        (seed,) = struct.unpack_from("<Q", raw, 20)
        self.n_samples = n
        self.image_size = size
        self.channels = channels
        self.n_conditions = n_cond
        self.family = FAMILY_NAMES.get(family, "?")
        self.seed = seed
        expected = expected_file_size(n, size, channels, n_cond)
        if len(raw) != expected:
            raise DataFormatError(
                f"{path}: file is {len(raw)} bytes, header implies {expected}; "
                f"corrupt at offset {min(len(raw), expected)}"
            )
        img_bytes = (n_cond + 1) * channels * size * size
        mbytes = _mask_bytes(size)
        self.object_ids = np.empty(n, dtype=np.int64)
        self.images = np.empty((n, n_cond + 1, channels, size, size), dtype=np.uint8)
        self.masks = np.empty((n, n_cond, size, size), dtype=bool)
        off = header_size()
        for i in range(n):
            (self.object_ids[i],) = struct.unpack_from("<I", raw, off)
            off += 4
            block = np.frombuffer(raw, dtype=np.uint8, count=img_bytes, offset=off)
            self.images[i] = block.reshape(n_cond + 1, channels, size, size)
            off += img_bytes
            for k in range(n_cond):
                bits = np.frombuffer(raw, dtype=np.uint8, count=mbytes, offset=off)
                self.masks[i, k] = np.unpackbits(bits)[: size * size].reshape(size, size)
                off += mbytes

    def __len__(self):
        return self.n_samples

    def sample(self, i):
        x = self.images[i, 0]
        targets = {k: self.images[i, 1 + k] for k in range(self.n_conditions)}
        masks = {k: self.masks[i, k] for k in range(self.n_conditions)}
        return x, targets, masks


@dataclass
class Batch:
    x: Tensor
    targets: dict
    masks: dict
    indices: np.ndarray


def load_batch(dataset, indices, dtype=np.float64):
    """Materialize a batch of inputs/targets as [0,1] float tensors."""
    indices = np.asarray(indices)
    scale = np.asarray(1.0 / 255.0, dtype=dtype)
    x = dataset.images[indices, 0].astype(dtype) * scale
    targets = {
        k: Tensor(dataset.images[indices, 1 + k].astype(dtype) * scale)
        for k in range(dataset.n_conditions)
    }
    masks = {k: dataset.masks[indices, k] for k in range(dataset.n_conditions)}
    return Batch(x=Tensor(x), targets=targets, masks=masks, indices=indices)


def epoch_order(n, seed, epoch):
    """Deterministic permutation of sample indices for one epoch."""
    return np.random.default_rng([seed, epoch]).permutation(n)
