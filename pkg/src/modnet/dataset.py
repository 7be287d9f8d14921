"""Procedural factor-labelled shapes dataset and its binary container.

Each image is a flat background with one centred, anti-aliased shape. The
five factors are shape, object hue, background hue, scale and orientation;
the full factorial grid is written in row-major factor order.

Container layout (little-endian)::

    b"IMNDS1" | uint32 header length | JSON manifest | uint8 images (N*H*W*3) | uint16 factor indices (N*5)
"""

import colorsys
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"IMNDS1"
FORMAT_VERSION = 1
FACTOR_NAMES = ("shape", "object_hue", "background_hue", "scale", "orientation")
SHAPE_NAMES = ("square", "circle", "triangle", "capsule")
DEFAULT_GRID = (4, 6, 6, 4, 8)
SUPERSAMPLE = 4

# Object and background use different saturation/value so equal hues stay separable.
OBJECT_SV = (0.9, 0.95)
BACKGROUND_SV = (0.35, 0.45)


class FormatError(Exception):
    pass


@dataclass(frozen=True)
class FactorTuple:
    shape_id: int
    object_hue: float
    background_hue: float
    scale: float
    orientation: float

    def validate(self, num_shapes=len(SHAPE_NAMES)):
        if not 0 <= self.shape_id < num_shapes:
            raise ValueError(f"shape_id {self.shape_id} outside [0, {num_shapes})")
        for name in ("object_hue", "background_hue"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} {v} outside [0, 1)")
        if not 0.5 <= self.scale <= 1.0:
            raise ValueError(f"scale {self.scale} outside [0.5, 1.0]")
        if not 0.0 <= self.orientation < 2 * math.pi:
            raise ValueError(f"orientation {self.orientation} outside [0, 2pi)")


@dataclass
class DatasetManifest:
    image_shape: tuple = (32, 32, 3)
    grid: tuple = DEFAULT_GRID
    seed: int = 0
    format_version: int = FORMAT_VERSION
    factor_names: tuple = FACTOR_NAMES
    shape_names: tuple = SHAPE_NAMES
    count: int = field(default=None)

    def __post_init__(self):
        self.image_shape = tuple(self.image_shape)
        self.grid = tuple(int(g) for g in self.grid)
        self.factor_names = tuple(self.factor_names)
        self.shape_names = tuple(self.shape_names)
        H, W, C = self.image_shape
        if H != W or H not in (32, 64) or C != 3:
            raise ValueError(f"image shape must be (32, 32, 3) or (64, 64, 3), got {self.image_shape}")
        if len(self.grid) != len(FACTOR_NAMES) or any(g < 1 for g in self.grid):
            raise ValueError(f"grid needs {len(FACTOR_NAMES)} positive sizes, got {self.grid}")
        if self.grid[0] > len(SHAPE_NAMES):
            raise ValueError(f"at most {len(SHAPE_NAMES)} shapes are available, got {self.grid[0]}")
        total = int(np.prod(self.grid))
        if self.count is not None and self.count != total:
            raise ValueError(f"count {self.count} does not match grid product {total}")
        self.count = total

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def factor_values(grid):
    """Per-factor value lists for a grid of sizes."""
    s, oh, bh, sc, orient = grid
    return (
        list(range(s)),
        [i / oh for i in range(oh)],
        [i / bh for i in range(bh)],
        list(np.linspace(0.5, 1.0, sc)) if sc > 1 else [0.75],
        [2 * math.pi * i / orient for i in range(orient)],
    )


def factors_at(index_row, grid):
    values = factor_values(grid)
    return FactorTuple(*(float(values[f][int(i)]) if f else int(values[f][int(i)]) for f, i in enumerate(index_row)))


def _hsv(h, sv):
    return np.array(colorsys.hsv_to_rgb(h, *sv))


def _signed_distance(shape_id, px, py, scale):
    """Signed distance to the shape boundary in the shape's own frame (negative inside)."""
    if shape_id == 0:  # square
        h = 0.62 * scale
        dx, dy = np.abs(px) - h, np.abs(py) - h
        return np.maximum(dx, dy)
    if shape_id == 1:  # circle
        return np.hypot(px, py) - 0.7 * scale
    if shape_id == 2:  # equilateral triangle, apex up
        r = 0.8 * scale
        d = None
        for k in range(3):
            a = math.pi / 2 + k * 2 * math.pi / 3 + math.pi / 3
            side = px * math.cos(a) + py * math.sin(a) - r / 2
            d = side if d is None else np.maximum(d, side)
        return d
    if shape_id == 3:  # capsule along x
        half, rad = 0.42 * scale, 0.3 * scale
        cx = np.clip(px, -half, half)
        return np.hypot(px - cx, py) - rad
    raise ValueError(f"unknown shape_id {shape_id}")


def coverage(factors, size):
    """Fraction of each pixel inside the shape, from a regular supersampling grid."""
    n = size * SUPERSAMPLE
    c = (np.arange(n) + 0.5) / n * 2 - 1
    X, Y = np.meshgrid(c, -c)
    ct, st = math.cos(factors.orientation), math.sin(factors.orientation)
    # Rotate sample points into the shape frame.
    px = ct * X + st * Y
    py = -st * X + ct * Y
    inside = (_signed_distance(factors.shape_id, px, py, factors.scale) <= 0).astype(np.float64)
    return inside.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def render(factors, image_shape=(32, 32, 3)):
    """Render one image as float64 ``(H, W, 3)`` in [0, 1]."""
    factors.validate()
    H, W, _ = image_shape
    if H != W:
        raise ValueError(f"square images only, got {image_shape}")
    alpha = coverage(factors, H)[..., None]
    fg = _hsv(factors.object_hue, OBJECT_SV)
    bg = _hsv(factors.background_hue, BACKGROUND_SV)
    return alpha * fg + (1 - alpha) * bg


def to_uint8(img):
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def grid_indices(grid):
    """All factor index rows in row-major order, shape ``(N, 5)`` uint16."""
    return np.stack(np.meshgrid(*[np.arange(g) for g in grid], indexing="ij"), -1).reshape(-1, len(grid)).astype(np.uint16)


def generate_grid(manifest, path):
    """Render the full factorial grid described by ``manifest`` into ``path``."""
    path = Path(path)
    table = grid_indices(manifest.grid)
    images = np.empty((manifest.count, *manifest.image_shape), dtype=np.uint8)
    for n, row in enumerate(table):
        images[n] = to_uint8(render(factors_at(row, manifest.grid), manifest.image_shape))
    write_container(path, manifest, images, table)
    return path


def write_container(path, manifest, images, table):
    header = manifest.to_json().encode()
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())
            fh.write(np.ascontiguousarray(table, dtype="<u2").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc


class ShapesDataset:
    """Random-access view over a container file (or in-memory arrays).

    ``images`` are uint8 ``(N, H, W, 3)``; :meth:`image` and :meth:`batch`
    return floats in [0, 1].
    """

    def __init__(self, manifest, images, table, path=None):
        self.manifest = manifest
        self.images = images
        self.table = table
        self.path = path

    def __len__(self):
        return self.manifest.count

    def _check(self, idx):
        if not -len(self) <= idx < len(self):
            raise IndexError(f"index {idx} out of range for {len(self)} images")

    def image(self, idx):
        self._check(idx)
        return self.images[idx].astype(np.float32) / 255.0

    def factors(self, idx):
        self._check(idx)
        return factors_at(self.table[idx], self.manifest.grid)

    def shape_ids(self, indices=None):
        col = self.table[:, 0].astype(np.int64)
        return col if indices is None else col[np.asarray(indices)]

    def batch(self, indices):
        """Channel-first float32 array ``(B, 3, H, W)`` for the given indices."""
        idx = np.asarray(indices)
        if idx.size and (idx.min() < -len(self) or idx.max() >= len(self)):
            raise IndexError(f"batch index out of range for {len(self)} images")
        return np.ascontiguousarray(self.images[idx].transpose(0, 3, 1, 2), dtype=np.float32) / 255.0

    def split(self, test_fraction=0.1):
        """Deterministic ``(train, test)`` index arrays derived from the manifest seed."""
        perm = np.random.default_rng(self.manifest.seed).permutation(len(self))
        n_test = int(round(len(self) * test_fraction))
        return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def load(path):
    """Open a container file. Images are memory-mapped."""
    path = Path(path)
    try:
        size = path.stat().st_size
        with open(path, "rb") as fh:
            magic = fh.read(len(MAGIC))
            if magic != MAGIC:
                raise FormatError(f"{path}: bad magic {magic!r}")
            raw = fh.read(4)
            if len(raw) != 4:
                raise FormatError(f"{path}: truncated header")
            (hlen,) = struct.unpack("<I", raw)
            header = fh.read(hlen)
            if len(header) != hlen:
                raise FormatError(f"{path}: truncated header")
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    meta = json.loads(header)
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {meta.get('format_version')} is not {FORMAT_VERSION}")
    manifest = DatasetManifest(**meta)
    H, W, C = manifest.image_shape
    offset = len(MAGIC) + 4 + hlen
    n_img = manifest.count * H * W * C
    n_tab = manifest.count * len(FACTOR_NAMES) * 2
    if size != offset + n_img + n_tab:
        raise FormatError(f"{path}: expected {offset + n_img + n_tab} bytes, found {size} (truncated or corrupt)")
    images = np.memmap(path, dtype=np.uint8, mode="r", offset=offset, shape=(manifest.count, H, W, C))
    table = np.fromfile(path, dtype="<u2", offset=offset + n_img).reshape(manifest.count, len(FACTOR_NAMES))
    return ShapesDataset(manifest, images, table, path)


def load_3dshapes(path, stride=1, image_size=64, seed=0):
    """Wrap an externally obtained ``3dshapes.h5`` (``images``, ``labels``) as a :class:`ShapesDataset`.

    The six 3D Shapes factors are floor hue, wall hue, object hue, scale,
    shape and orientation. They are mapped to index columns in this
    package's order (shape, object hue, background (wall) hue, scale,
    orientation); floor hue is dropped from the table. ``stride`` keeps every
    ``stride``-th image.
    """
    import h5py

    with h5py.File(path, "r") as fh:
        images = np.asarray(fh["images"][::stride], dtype=np.uint8)
        labels = np.asarray(fh["labels"][::stride], dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise FormatError(f"{path}: images must be (N, H, W, 3), got {images.shape}")
    if images.shape[1] != image_size:
        raise FormatError(f"{path}: expected {image_size}px images, got {images.shape[1]}")
    cols = (4, 2, 1, 3, 5)
    table = np.empty((len(images), len(cols)), dtype=np.uint16)
    grid = []
    for out, col in enumerate(cols):
        values, inverse = np.unique(labels[:, col], return_inverse=True)
        table[:, out] = inverse
        grid.append(len(values))
    manifest = _ExternalManifest(images.shape[1:], tuple(grid), seed, len(images))
    return ShapesDataset(manifest, images, table, Path(path))


@dataclass
class _ExternalManifest:
    """Manifest for data that is not a full grid of this package's renderer."""

    image_shape: tuple
    grid: tuple
    seed: int
    count: int
    format_version: int = FORMAT_VERSION
    factor_names: tuple = FACTOR_NAMES
    shape_names: tuple = ("cube", "cylinder", "sphere", "capsule")


def save_png(img, path, scale=1):
    """Write a float ``(H, W, 3)`` or channel-first ``(3, H, W)`` image in [0, 1] as PNG."""
    from PIL import Image

    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[0] == 3 and arr.shape[-1] != 3:
        arr = arr.transpose(1, 2, 0)
    pil = Image.fromarray(to_uint8(arr))
    if scale != 1:
        pil = pil.resize((pil.width * scale, pil.height * scale), Image.NEAREST)
    pil.save(path, optimize=False)
    return path


def export_pngs(dataset, out_dir, indices=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for idx in (range(len(dataset)) if indices is None else indices):
        f = dataset.table[idx]
        name = f"{idx:06d}_" + "_".join(str(int(v)) for v in f) + ".png"
        paths.append(save_png(dataset.image(idx), out_dir / name))
    return paths
