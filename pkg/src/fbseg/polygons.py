"""Synthetic polygon segmentation data: generation, noise, on-disk format.

Each instance is a binary image containing one irregular filled polygon
(class 1) on background (class 0), optionally corrupted by additive
Gaussian noise.  Generation is a pure function of the instance seed, and
the raw-grid file format round-trips bit-exactly.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from fbseg.seeding import derive_seed64, stream


class ValidationError(ValueError):
    """Arguments outside the documented domain."""


class DatasetError(RuntimeError):
    """A dataset directory failed to load (corruption, inconsistency)."""


class DegeneratePolygonError(RuntimeError):
    """Regeneration budget exhausted without producing a usable polygon."""


FORMAT_VERSION = 1
_MAGIC = b"FBSG"
_DTYPE_TAGS = {1: np.dtype("<f8"), 2: np.dtype("uint8")}
_TAG_FOR_KIND = {"image": 1, "mask": 2}

DEFAULT_VERTEX_RANGE = (3, 12)
DEFAULT_RADIUS_RANGE = (0.10, 0.40)
MIN_AREA = 8


@dataclass(frozen=True)
class PolygonInstance:
    image: np.ndarray            # float64 H x W; binary before noise
    mask: np.ndarray             # uint8 H x W, 1 = polygon
    seed: int
    sigma: float
    vertices: np.ndarray         # (n, 2) float64 rows of (row, col)

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]


@dataclass(frozen=True)
class DatasetManifest:
    count: int
    sigma: float
    height: int
    width: int
    split: str
    seeds: tuple
    format_version: int = FORMAT_VERSION
    # numpy payload: compare via to_json(), which round-trips floats exactly
    vertices: tuple = field(default=(), repr=False, compare=False)

    def to_json(self) -> str:
        payload = {
            "format_version": self.format_version,
            "split": self.split,
            "count": self.count,
            "sigma": self.sigma,
            "height": self.height,
            "width": self.width,
            "seeds": list(self.seeds),
            "vertices": [[[float(r), float(c)] for r, c in v] for v in self.vertices],
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        raw = json.loads(text)
        if raw.get("format_version") != FORMAT_VERSION:
            raise DatasetError(
                f"manifest format version {raw.get('format_version')!r} != {FORMAT_VERSION}")
        return cls(
            count=int(raw["count"]),
            sigma=float(raw["sigma"]),
            height=int(raw["height"]),
            width=int(raw["width"]),
            split=str(raw["split"]),
            seeds=tuple(int(s) for s in raw["seeds"]),
            vertices=tuple(np.array(v, dtype=np.float64) for v in raw["vertices"]),
        )


def rasterize_polygon(vertices: np.ndarray, height: int, width: int) -> np.ndarray:
    """Even-odd fill of the polygon over pixel centers (r + 0.5, c + 0.5)."""
    verts = np.asarray(vertices, dtype=np.float64)
    rows = (np.arange(height) + 0.5)[:, None]
    cols = (np.arange(width) + 0.5)[None, :]
    inside = np.zeros((height, width), dtype=bool)
    n = len(verts)
    for i in range(n):
        r1, c1 = verts[i]
        r2, c2 = verts[(i + 1) % n]
        if r1 == r2:
            continue
        straddles = (r1 > rows) != (r2 > rows)
        col_at_row = (c2 - c1) * (rows - r1) / (r2 - r1) + c1
        inside ^= straddles & (cols < col_at_row)
    return inside.astype(np.uint8)


def _vertices_for_attempt(seed: int, attempt: int, height: int, width: int,
                          n_vertices_range, radius_range) -> np.ndarray:
    rng = stream("polygon", seed, attempt)
    center_r = rng.uniform(0.25 * height, 0.75 * height)
    center_c = rng.uniform(0.25 * width, 0.75 * width)
    n = int(rng.integers(n_vertices_range[0], n_vertices_range[1] + 1))
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=n))
    radii = rng.uniform(radius_range[0], radius_range[1], size=n) * min(height, width)
    rows = center_r + radii * np.sin(angles)
    cols = center_c + radii * np.cos(angles)
    return np.stack([rows, cols], axis=1)


def generate_polygon(seed: int, height: int, width: int,
                     n_vertices_range=DEFAULT_VERTEX_RANGE,
                     radius_range=DEFAULT_RADIUS_RANGE) -> PolygonInstance:
    """Generate one irregular polygon instance deterministically from seed.

    The polygon center is sampled uniformly in the central half of the
    image, vertex angles are sorted (star-shaped, hence simple), and the
    mask is the even-odd rasterization of the vertices.  Degenerate draws
    (area < 8 px, more than half the image, fragmented rasterization, or
    centroid out of bounds) are regenerated from derived seeds, at most
    100 attempts.
    """
    if height < 16 or width < 16:
        raise ValidationError(f"image must be at least 16x16, got {height}x{width}")
    lo, hi = n_vertices_range
    if not (3 <= lo <= hi <= 16):
        raise ValidationError(f"n_vertices_range must lie in [3, 16], got {n_vertices_range}")
    rlo, rhi = radius_range
    if not (0.0 < rlo <= rhi <= 0.5):
        raise ValidationError(f"radius fractions must lie in (0, 0.5], got {radius_range}")

    for attempt in range(100):
        verts = _vertices_for_attempt(seed, attempt, height, width,
                                      n_vertices_range, radius_range)
        mask = rasterize_polygon(verts, height, width)
        area = int(mask.sum())
        if area < MIN_AREA or area >= height * width / 2:
            continue
        _, n_components = ndimage.label(mask)
        if n_components != 1:
            continue
        centroid = verts.mean(axis=0)
        if not (0.0 < centroid[0] < height and 0.0 < centroid[1] < width):
            continue
        return PolygonInstance(
            image=mask.astype(np.float64),
            mask=mask,
            seed=int(seed),
            sigma=0.0,
            vertices=verts,
        )
    raise DegeneratePolygonError(
        f"no valid polygon for seed {seed} within 100 attempts")


def add_gaussian_noise(instance: PolygonInstance, sigma: float,
                       noise_seed: int) -> PolygonInstance:
    """Additive per-pixel Gaussian noise from a dedicated stream.

    The mask is untouched and the image is not clamped: at large sigma the
    noise is meant to dominate the binary signal.
    """
    if sigma < 0:
        raise ValidationError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return replace(instance, sigma=0.0, image=instance.image.copy())
    rng = stream("noise", instance.seed, noise_seed)
    noise = rng.normal(0.0, sigma, size=instance.image.shape)
    return replace(instance, sigma=float(sigma), image=instance.image + noise)


# ---------------------------------------------------------------------------
# on-disk format: manifest.json + NNNN.img / NNNN.msk raw grid files


def _pack_grid(grid: np.ndarray, tag: int) -> bytes:
    dtype = _DTYPE_TAGS[tag]
    height, width = grid.shape
    head = (_MAGIC
            + bytes([FORMAT_VERSION, tag])
            + int(height).to_bytes(4, "little")
            + int(width).to_bytes(4, "little"))
    payload = np.ascontiguousarray(grid.astype(dtype, copy=False)).tobytes()
    body = head + payload
    return body + (zlib.crc32(body) & 0xFFFFFFFF).to_bytes(4, "little")


def _unpack_grid(blob: bytes, path: Path) -> np.ndarray:
    if len(blob) < 18 or blob[:4] != _MAGIC:
        raise DatasetError(f"{path.name}: not a grid file (bad magic)")
    if blob[4] != FORMAT_VERSION:
        raise DatasetError(f"{path.name}: format version {blob[4]} != {FORMAT_VERSION}")
    tag = blob[5]
    if tag not in _DTYPE_TAGS:
        raise DatasetError(f"{path.name}: unknown dtype tag {tag}")
    stored = int.from_bytes(blob[-4:], "little")
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored:
        raise DatasetError(f"{path.name}: checksum mismatch (truncated or corrupt)")
    height = int.from_bytes(blob[6:10], "little")
    width = int.from_bytes(blob[10:14], "little")
    dtype = _DTYPE_TAGS[tag]
    expected = 14 + height * width * dtype.itemsize + 4
    if len(blob) != expected:
        raise DatasetError(f"{path.name}: payload size mismatch")
    return np.frombuffer(blob[14:-4], dtype=dtype).reshape(height, width).copy()


def write_dataset(instances, manifest: DatasetManifest, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if len(instances) != manifest.count:
        raise ValidationError(
            f"manifest count {manifest.count} != {len(instances)} instances")
    for i, inst in enumerate(instances):
        (directory / f"{i:04d}.img").write_bytes(_pack_grid(inst.image, _TAG_FOR_KIND["image"]))
        (directory / f"{i:04d}.msk").write_bytes(_pack_grid(inst.mask, _TAG_FOR_KIND["mask"]))
    (directory / "manifest.json").write_text(manifest.to_json())


def read_dataset(directory):
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest.json in {directory}")
    manifest = DatasetManifest.from_json(manifest_path.read_text())
    img_files = sorted(directory.glob("*.img"))
    if len(img_files) != manifest.count:
        raise DatasetError(
            f"manifest count {manifest.count} but {len(img_files)} .img files present")
    instances = []
    for i in range(manifest.count):
        img_path = directory / f"{i:04d}.img"
        msk_path = directory / f"{i:04d}.msk"
        for p in (img_path, msk_path):
            if not p.exists():
                raise DatasetError(f"missing instance file {p.name}")
        image = _unpack_grid(img_path.read_bytes(), img_path)
        mask = _unpack_grid(msk_path.read_bytes(), msk_path)
        vertices = manifest.vertices[i] if i < len(manifest.vertices) else np.zeros((0, 2))
        instances.append(PolygonInstance(
            image=image, mask=mask, seed=manifest.seeds[i],
            sigma=manifest.sigma, vertices=vertices))
    return instances, manifest


def instance_seed(base_seed: int, split: str, index: int) -> int:
    return (int(base_seed) ^ derive_seed64(split, index)) & 0xFFFFFFFFFFFFFFFF


def build_split(config: dict):
    """Generate a full split from {D, sigma, H, W, base_seed, split}.

    Instance i draws its seed as base_seed XOR hash(split, i), so train and
    test streams never collide.  Returns (instances, manifest).
    """
    count = int(config["D"])
    if count < 1:
        raise ValidationError(f"D must be >= 1, got {count}")
    sigma = float(config.get("sigma", 0.0))
    height = int(config.get("H", 64))
    width = int(config.get("W", 64))
    base_seed = int(config.get("base_seed", 0))
    split = str(config.get("split", "train"))

    instances = []
    seeds = []
    for i in range(count):
        seed = instance_seed(base_seed, split, i)
        inst = generate_polygon(seed, height, width)
        inst = add_gaussian_noise(inst, sigma, noise_seed=0)
        instances.append(inst)
        seeds.append(seed)
    if len(set(seeds)) != count:
        raise ValidationError(f"seed collision inside split {split!r}")
    manifest = DatasetManifest(
        count=count, sigma=sigma, height=height, width=width, split=split,
        seeds=tuple(seeds), vertices=tuple(inst.vertices for inst in instances))
    return instances, manifest
