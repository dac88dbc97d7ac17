"""Procedural endoscopic-style scenes with clean and misregistered tool masks.

Each scene is a textured tissue background crossed by one or more shafted
tools entering from the image border. The clean mask is the exact
rasterization of the tool geometry; the noisy mask is that mask pushed through
a random rigid + scale transform about its centroid, mimicking annotations
projected through an imprecise kinematic chain.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from itertools import islice
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "toolseg-dataset"
MANIFEST_VERSION = 1
IMAGE_DIR, GT_DIR, NOISY_DIR = "images", "masks_gt", "masks_noisy"


def _range(name, value, lo=None):
    a, b = value
    if not a <= b:
        raise ValueError(f"{name} range {value} is empty")
    if lo is not None and a < lo:
        raise ValueError(f"{name} range {value} must be >= {lo}")
    return float(a), float(b)


@dataclass(frozen=True)
class SceneConfig:
    """Scene geometry and appearance.

    Tool widths and jaw lengths are fractions of the smaller image side so the
    same config renders comparable scenes at any resolution.
    """

    image_size: tuple[int, int] = (128, 128)
    n_tools: tuple[int, int] = (1, 2)
    tool_width: tuple[float, float] = (0.10, 0.16)
    jaw_length: tuple[float, float] = (0.10, 0.18)
    orientation: tuple[float, float] = (0.0, 360.0)
    tip_margin: float = 0.25
    noise_octaves: int = 4
    tissue_palette: tuple[tuple[int, int, int], ...] = ((178, 62, 58), (196, 92, 80), (150, 48, 52))
    tool_palette: tuple[tuple[int, int, int], ...] = ((188, 190, 196), (120, 122, 130))
    pixel_noise: float = 4.0
    rng_seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if h < 64 or w < 64:
            raise ValueError(f"image_size {self.image_size} must be at least 64x64")
        if h % 4 or w % 4:
            raise ValueError(f"image_size {self.image_size} must be divisible by 4")
        lo, hi = self.n_tools
        if not 1 <= lo <= hi:
            raise ValueError(f"n_tools range {self.n_tools} is empty or below 1")
        _range("tool_width", self.tool_width, 0.0)
        _range("jaw_length", self.jaw_length, 0.0)
        _range("orientation", self.orientation)
        if not 0.0 <= self.tip_margin < 0.5:
            raise ValueError("tip_margin must lie in [0, 0.5)")
        if self.noise_octaves < 1:
            raise ValueError("noise_octaves must be >= 1")
        if not self.tissue_palette or not self.tool_palette:
            raise ValueError("palettes must be non-empty")

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        data = dict(data)
        for key in ("image_size", "n_tools", "tool_width", "jaw_length", "orientation"):
            if key in data:
                data[key] = tuple(data[key])
        for key in ("tissue_palette", "tool_palette"):
            if key in data:
                data[key] = tuple(tuple(c) for c in data[key])
        return cls(**data)


@dataclass(frozen=True)
class ErrorModel:
    """Per-annotation misregistration: translation (px), rotation (deg), relative scale."""

    sigma_translate: float = 2.25
    sigma_rotate: float = 3.5
    sigma_scale: float = 0.035

    def __post_init__(self):
        for name in ("sigma_translate", "sigma_rotate", "sigma_scale"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    def sample(self, rng: np.random.Generator) -> tuple[float, float, float, float]:
        """Draw ``(dx, dy, angle_deg, scale)``."""
        dx, dy = rng.normal(0.0, 1.0, size=2) * self.sigma_translate
        angle = rng.normal() * self.sigma_rotate
        scale = max(1.0 + rng.normal() * self.sigma_scale, 0.5)
        return float(dx), float(dy), float(angle), float(scale)


class Scene(NamedTuple):
    image: np.ndarray  # float32 H x W x 3 in [-1, 1]
    gt_mask: np.ndarray  # uint8 H x W in {0, 1}
    noisy_mask: np.ndarray  # uint8 H x W in {0, 1}


# ---------------------------------------------------------------- rendering


def _value_noise(rng, shape, octaves):
    h, w = shape
    out = np.zeros(shape)
    amp, total = 1.0, 0.0
    for k in range(octaves):
        cells = 2 ** (k + 2)
        coarse = rng.random((cells + 1, cells + 1))
        out += amp * ndimage.zoom(coarse, (h / (cells + 1), w / (cells + 1)), order=1,
                                  grid_mode=True, mode="nearest")[:h, :w]
        total += amp
        amp *= 0.5
    return out / total


def _segment_distance(yy, xx, p0, p1):
    """Distance from every pixel centre to the segment p0-p1, plus the signed perpendicular offset."""
    (y0, x0), (y1, x1) = p0, p1
    vy, vx = y1 - y0, x1 - x0
    length2 = vy * vy + vx * vx
    t = np.clip(((yy - y0) * vy + (xx - x0) * vx) / length2, 0.0, 1.0)
    py, px = y0 + t * vy, x0 + t * vx
    dist = np.hypot(yy - py, xx - px)
    signed = ((yy - y0) * vx - (xx - x0) * vy) / math.sqrt(length2)
    return dist, signed


def _tissue(rng, cfg: SceneConfig):
    h, w = cfg.image_size
    base = np.asarray(cfg.tissue_palette[rng.integers(len(cfg.tissue_palette))], dtype=float)
    bright = _value_noise(rng, (h, w), cfg.noise_octaves)
    hue = _value_noise(rng, (h, w), max(cfg.noise_octaves - 1, 1))
    img = base[None, None, :] * (0.65 + 0.6 * bright[..., None])
    img[..., 1] += 30.0 * (hue - 0.5)
    img[..., 2] += 20.0 * (hue - 0.5)
    return img


def _draw_tool(rng, cfg: SceneConfig, img, mask):
    h, w = cfg.image_size
    side = min(h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    m = cfg.tip_margin
    tip = (rng.uniform(m, 1 - m) * (h - 1), rng.uniform(m, 1 - m) * (w - 1))
    theta = math.radians(rng.uniform(*cfg.orientation))
    direction = (math.sin(theta), math.cos(theta))
    far = 2.0 * math.hypot(h, w)
    base = (tip[0] - far * direction[0], tip[1] - far * direction[1])
    radius = 0.5 * rng.uniform(*cfg.tool_width) * side
    jaw_len = rng.uniform(*cfg.jaw_length) * side
    opening = math.radians(rng.uniform(8.0, 30.0))

    shaft_d, shaft_u = _segment_distance(yy, xx, base, tip)
    parts = [(shaft_d <= radius, shaft_u / radius)]
    jaw_r = 0.45 * radius
    for sign in (-1.0, 1.0):
        a = theta + sign * opening
        end = (tip[0] + jaw_len * math.sin(a), tip[1] + jaw_len * math.cos(a))
        d, u = _segment_distance(yy, xx, tip, end)
        parts.append((d <= jaw_r, u / jaw_r))

    color = np.asarray(cfg.tool_palette[rng.integers(len(cfg.tool_palette))], dtype=float)
    highlight = rng.uniform(-0.4, 0.4)
    for inside, u in parts:
        u = np.clip(u, -1.0, 1.0)
        shade = 0.55 + 0.45 * np.sqrt(1.0 - u * u) + 0.35 * np.exp(-((u - highlight) / 0.25) ** 2)
        img[inside] = (color[None, :] * shade[inside][:, None])
        mask[inside] = 1


def perturb_mask(mask: np.ndarray, dx: float, dy: float, angle: float = 0.0,
                 scale: float = 1.0) -> np.ndarray:
    """Rigid + scale warp of a binary mask about its foreground centroid.

    ``dx``/``dy`` are in pixels (x to the right, y downwards), ``angle`` in
    degrees. Nearest-neighbour sampling keeps the result binary; pixels pulled
    from outside the frame are background.
    """
    mask = np.asarray(mask, dtype=np.uint8)
    if dx == 0 and dy == 0 and angle == 0 and scale == 1:
        return mask.copy()
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return mask.copy()
    c = np.array([ys.mean(), xs.mean()])
    a = math.radians(angle)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]]) * scale
    inv = np.linalg.inv(rot)
    # output coordinate p samples input at inv @ (p - c - t) + c
    t = np.array([dy, dx])
    offset = c - inv @ (c + t)
    return ndimage.affine_transform(mask, inv, offset=offset, order=0, mode="constant",
                                    cval=0).astype(np.uint8)


def _scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def render_scene(config: SceneConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """8-bit RGB image and exact clean mask for scene ``index``."""
    rng = _scene_rng(config.rng_seed, index)
    img = _tissue(rng, config)
    mask = np.zeros(config.image_size, dtype=np.uint8)
    lo, hi = config.n_tools
    for _ in range(int(rng.integers(lo, hi + 1))):
        _draw_tool(rng, config, img, mask)
    img += rng.normal(0.0, config.pixel_noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask


def generate_scene(config: SceneConfig, index: int,
                   error_model: ErrorModel | None = None) -> Scene:
    """Render scene ``index``; deterministic in ``(config.rng_seed, index)``."""
    rgb, gt, noisy = _scene_arrays(config, error_model or ErrorModel(), index)
    return Scene(uint8_to_grid(rgb), gt, noisy)


def _scene_arrays(config, error_model, index):
    rgb, gt = render_scene(config, index)
    err_rng = np.random.default_rng([int(config.rng_seed), int(index), 1])
    return rgb, gt, perturb_mask(gt, *error_model.sample(err_rng))


# ---------------------------------------------------------------- grid helpers


def uint8_to_grid(rgb: np.ndarray) -> np.ndarray:
    return (rgb.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def grid_to_uint8(grid: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(grid) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def mask_to_annotation(mask: np.ndarray) -> np.ndarray:
    """{0, 1} mask to an ``H x W x 1`` annotation grid at -1/+1."""
    return (np.asarray(mask, dtype=np.float32) * 2.0 - 1.0)[..., None]


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return uint8_to_grid(np.asarray(im.convert("RGB")))


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def save_png(array: np.ndarray, path) -> None:
    Image.fromarray(array).save(path, format="PNG")


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- datasets


@dataclass
class SampleRecord:
    index: int
    split: str
    sequence: str
    image: str
    mask_gt: str
    mask_noisy: str
    sha256: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    root: Path
    samples: list[SampleRecord]
    config: dict
    error_model: dict
    seed: int

    @property
    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for s in self.samples:
            out[s.split] = out.get(s.split, 0) + 1
        return out

    def split(self, name: str) -> list[SampleRecord]:
        return [s for s in self.samples if s.split == name]

    def path(self, relative: str) -> Path:
        return Path(self.root) / relative

    def to_json(self) -> str:
        body = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "config": self.config,
            "error_model": self.error_model,
            "counts": self.counts,
            "samples": [asdict(s) for s in self.samples],
        }
        return json.dumps(body, indent=1, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def mean_noisy_iou(self, split: str | None = None) -> float:
        samples = self.samples if split is None else self.split(split)
        ious = [mask_iou(load_mask(self.path(s.mask_gt)), load_mask(self.path(s.mask_noisy)))
                for s in samples]
        return float(np.mean(ious)) if ious else float("nan")

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME if root.is_dir() else root
        body = json.loads(path.read_text())
        if body.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"{path} is not a dataset manifest")
        if body.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{path} has manifest version {body.get('version')}")
        samples = [SampleRecord(**s) for s in body["samples"]]
        return cls(path.parent, samples, body["config"], body["error_model"], body["seed"])


def generate_dataset(config: SceneConfig, error_model: ErrorModel, n_samples: int, root,
                     n_heldout: int = 0, frames_per_sequence: int = 25) -> DatasetManifest:
    """Write ``n_samples`` training and ``n_heldout`` test scenes under ``root``.

    Files land in ``images/``, ``masks_gt/`` and ``masks_noisy/`` as 8-bit PNGs
    (masks 0/255). The manifest is written last via an atomic rename, so a
    directory without ``manifest.json`` is never a complete dataset.
    """
    if n_samples < 0 or n_heldout < 0:
        raise ValueError("sample counts must be >= 0")
    if frames_per_sequence < 1:
        raise ValueError("frames_per_sequence must be >= 1")
    root = Path(root)
    for sub in (IMAGE_DIR, GT_DIR, NOISY_DIR):
        (root / sub).mkdir(parents=True, exist_ok=True)
    manifest_path = root / MANIFEST_NAME
    if manifest_path.exists():
        manifest_path.unlink()

    samples = []
    splits = [("train", i, i) for i in range(n_samples)]
    splits += [("test", n_samples + j, j) for j in range(n_heldout)]
    for split, index, k in splits:
        rgb, gt, noisy = _scene_arrays(config, error_model, index)
        name = f"{index:06d}.png"
        rec = SampleRecord(index, split, f"{split}_{k // frames_per_sequence:02d}",
                           f"{IMAGE_DIR}/{name}", f"{GT_DIR}/{name}", f"{NOISY_DIR}/{name}")
        save_png(rgb, root / rec.image)
        save_png(gt * 255, root / rec.mask_gt)
        save_png(noisy * 255, root / rec.mask_noisy)
        rec.sha256 = {key: _sha256(root / getattr(rec, key))
                      for key in ("image", "mask_gt", "mask_noisy")}
        samples.append(rec)

    manifest = DatasetManifest(root, samples, _config_echo(config), asdict(error_model),
                               config.rng_seed)
    tmp = manifest_path.with_suffix(".json.tmp")
    tmp.write_text(manifest.to_json())
    os.replace(tmp, manifest_path)
    log.info("wrote %d samples to %s", len(samples), root)
    return manifest


def _config_echo(config: SceneConfig) -> dict:
    return json.loads(json.dumps(asdict(config)))


def find_image_mask_pairs(image_dir, mask_dir) -> list[tuple[Path, Path, str]]:
    """Match externally supplied images to masks by relative path.

    Images in a subdirectory are grouped into a sequence named after it;
    top-level files form the sequence ``"all"``.
    """
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    pairs = []
    for img in sorted(image_dir.rglob("*")):
        if img.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"):
            continue
        rel = img.relative_to(image_dir)
        candidates = [mask_dir / rel] + [mask_dir / rel.with_suffix(s) for s in (".png", ".bmp", ".tif")]
        mask = next((c for c in candidates if c.exists()), None)
        if mask is None:
            log.warning("no mask for %s", img)
            continue
        seq = rel.parts[0] if len(rel.parts) > 1 else "all"
        pairs.append((img, mask, seq))
    return pairs


# ---------------------------------------------------------------- sampling


class UnpairedSampler:
    """Endless stream of (image, annotation) index pairs that are never true pairs.

    Images come from the even positions of the split and noisy annotations from
    the odd positions. Both halves are reshuffled every epoch of the stream.
    """

    def __init__(self, manifest: DatasetManifest, rng_seed: int, split: str = "train"):
        records = manifest.split(split)
        if len(records) < 2:
            raise ValueError(f"split {split!r} needs at least 2 samples, has {len(records)}")
        self.manifest = manifest
        self.seed = int(rng_seed)
        self.records = {r.index: r for r in records}
        self.image_indices = [r.index for r in records[0::2]]
        self.annotation_indices = [r.index for r in records[1::2]]
        self._cache: dict[str, np.ndarray] = {}

    @property
    def epoch_length(self) -> int:
        return max(len(self.image_indices), len(self.annotation_indices))

    def epoch_pairs(self, epoch: int) -> list[tuple[int, int]]:
        rng = np.random.default_rng([self.seed, int(epoch)])
        n = self.epoch_length
        imgs = np.resize(rng.permutation(self.image_indices), n)
        anns = np.resize(rng.permutation(self.annotation_indices), n)
        return [(int(i), int(a)) for i, a in zip(imgs, anns)]

    def index_pairs(self, start: int = 0) -> Iterator[tuple[int, int]]:
        """Index pairs from global position ``start`` onwards."""
        epoch, offset = divmod(start, self.epoch_length)
        while True:
            yield from self.epoch_pairs(epoch)[offset:]
            epoch, offset = epoch + 1, 0

    def image(self, index: int) -> np.ndarray:
        key = f"i{index}"
        if key not in self._cache:
            self._cache[key] = load_image(self.manifest.path(self.records[index].image))
        return self._cache[key]

    def annotation(self, index: int) -> np.ndarray:
        key = f"a{index}"
        if key not in self._cache:
            mask = load_mask(self.manifest.path(self.records[index].mask_noisy))
            self._cache[key] = mask_to_annotation(mask)
        return self._cache[key]

    def stream(self, start: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for i, a in self.index_pairs(start):
            yield self.image(i), self.annotation(a)

    def __iter__(self):
        return self.stream()

    def take(self, n: int, start: int = 0) -> list[tuple[int, int]]:
        return list(islice(self.index_pairs(start), n))


def unpaired_sampler(manifest: DatasetManifest, rng_seed: int,
                     split: str = "train") -> Iterator[tuple[np.ndarray, np.ndarray]]:
    return iter(UnpairedSampler(manifest, rng_seed, split))
