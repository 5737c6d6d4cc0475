"""Samples, preprocessing, augmentation, splitting and the synthetic surrogate."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import AUGMENT_OPS, ConfigError, SynthConfig

log = logging.getLogger(__name__)

LANDSLIDE = 1
SLOPE = 0
LABEL_NAMES = {LANDSLIDE: "landslide", SLOPE: "slope"}


class AlignmentError(ValueError):
    pass


@dataclass
class Sample:
    """An RGB tile with its binary landslide mask.

    The object label is derived from the mask, so it can never disagree
    with it: a sample is a landslide sample iff any mask pixel is 1.
    """
    id: str
    image: np.ndarray
    mask: np.ndarray
    resolution_m: float = 2.0

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        if self.image.dtype != np.uint8:
            raise ValueError(f"{self.id}: image must be uint8")
        if self.mask.shape != self.image.shape[:2]:
            raise AlignmentError(
                f"{self.id}: mask {self.mask.shape} vs image {self.image.shape[:2]}")
        if self.mask.dtype != np.uint8:
            self.mask = self.mask.astype(np.uint8)
        if self.mask.size and self.mask.max() > 1:
            raise ValueError(f"{self.id}: mask values must be 0/1")

    @property
    def label(self):
        return LANDSLIDE if self.mask.any() else SLOPE

    @property
    def label_name(self):
        return LABEL_NAMES[self.label]


def seed_for(*parts):
    """Derive a 32-bit seed from integers/strings; independent of call order."""
    words = []
    for p in parts:
        if isinstance(p, str):
            words.extend(p.encode())
        else:
            words.append(int(p) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def tile_raster(raster, mask_raster, tile_size=512, prefix="tile", resolution_m=2.0):
    """Cut a raster into a non-overlapping grid of tiles.

    Rasters whose sides are not a multiple of ``tile_size`` are padded by
    reflection on the bottom/right edges before cutting.
    """
    raster = np.asarray(raster)
    mask_raster = np.asarray(mask_raster)
    if raster.ndim != 3 or raster.shape[2] != 3:
        raise ValueError("raster must be HxWx3")
    if mask_raster.shape != raster.shape[:2]:
        raise AlignmentError(
            f"mask {mask_raster.shape} is not aligned with raster {raster.shape[:2]}")
    h, w = mask_raster.shape
    ph = -h % tile_size
    pw = -w % tile_size
    if ph or pw:
        raster = np.pad(raster, ((0, ph), (0, pw), (0, 0)), mode="reflect")
        mask_raster = np.pad(mask_raster, ((0, ph), (0, pw)), mode="reflect")
    out = []
    for r in range(0, raster.shape[0], tile_size):
        for c in range(0, raster.shape[1], tile_size):
            out.append(Sample(
                id=f"{prefix}_r{r // tile_size}_c{c // tile_size}",
                image=np.ascontiguousarray(raster[r:r + tile_size, c:c + tile_size], dtype=np.uint8),
                mask=np.ascontiguousarray(mask_raster[r:r + tile_size, c:c + tile_size], dtype=np.uint8),
                resolution_m=resolution_m,
            ))
    return out


def equalize_channel(channel):
    channel = np.asarray(channel, dtype=np.uint8)
    hist = np.bincount(channel.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    cdf_min = cdf[hist > 0][0]
    n = channel.size
    if n == cdf_min:
        # single gray level: nothing to spread
        return channel.copy()
    lut = np.round((cdf - cdf_min) / (n - cdf_min) * 255.0)
    lut = np.clip(lut, 0, 255).astype(np.uint8)
    return lut[channel]


def equalize_histogram(image):
    """Per-channel histogram equalization of an HxWx3 uint8 image."""
    image = np.asarray(image, dtype=np.uint8)
    return np.stack([equalize_channel(image[..., k]) for k in range(image.shape[2])], axis=-1)


def equalize_sample(s):
    return Sample(s.id, equalize_histogram(s.image), s.mask.copy(), s.resolution_m)


def _transform(arr, op):
    if op == "identity":
        return arr
    if op == "hflip":
        return arr[:, ::-1]
    if op == "vflip":
        return arr[::-1]
    if op == "rot90":
        return np.rot90(arr, 1, axes=(0, 1))
    if op == "rot180":
        return np.rot90(arr, 2, axes=(0, 1))
    if op == "rot270":
        return np.rot90(arr, 3, axes=(0, 1))
    raise ConfigError(f"unknown augmentation op {op!r}; expected one of {AUGMENT_OPS}")


def augment_sample(s, op):
    """Apply the same geometric transform to image and mask."""
    image = np.ascontiguousarray(_transform(s.image, op))
    mask = np.ascontiguousarray(_transform(s.mask, op))
    suffix = "" if op == "identity" else f"@{op}"
    return Sample(s.id + suffix, image, mask, s.resolution_m)


def expand_augmented(samples, ops=AUGMENT_OPS):
    """Each sample followed by one copy per op in ``ops``."""
    out = []
    for s in samples:
        out.append(s)
        out.extend(augment_sample(s, op) for op in ops)
    return out


@dataclass
class DatasetManifest:
    train: list
    val: list
    test: list
    seed: int
    counts: dict = field(default_factory=dict)
    preprocessed: bool = False

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}

    def to_dict(self):
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test),
                "seed": self.seed, "counts": self.counts, "preprocessed": self.preprocessed}

    @classmethod
    def from_dict(cls, d):
        return cls(d["train"], d["val"], d["test"], d["seed"], d.get("counts", {}),
                   d.get("preprocessed", False))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _allocate(n, ratios):
    """Largest-remainder split of n items into len(ratios) parts."""
    total = float(sum(ratios))
    exact = [n * r / total for r in ratios]
    sizes = [int(np.floor(x)) for x in exact]
    rest = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda k: (-(exact[k] - sizes[k]), k))
    for k in order[:rest]:
        sizes[k] += 1
    return sizes


def split_dataset(samples, ratios=(6, 2, 2), seed=0):
    """Stratified, seeded train/val/test partition of sample ids."""
    if len(samples) < len(ratios):
        raise ValueError(f"need at least {len(ratios)} samples to split, got {len(samples)}")
    ids = {"train": [], "val": [], "test": []}
    counts = {}
    for label in (LANDSLIDE, SLOPE):
        group = sorted(s.id for s in samples if s.label == label)
        rng = np.random.default_rng(seed_for(seed, label))
        group = [group[k] for k in rng.permutation(len(group))]
        sizes = _allocate(len(group), ratios)
        start = 0
        for name, size in zip(("train", "val", "test"), sizes):
            ids[name].extend(group[start:start + size])
            counts.setdefault(name, {})[LABEL_NAMES[label]] = size
            start += size
    return DatasetManifest(ids["train"], ids["val"], ids["test"], seed, counts)


# --- synthetic surrogate ---------------------------------------------------

def _texture(rng, shape, sigma, scale):
    noise = rng.normal(0.0, 1.0, shape)
    smooth = ndimage.gaussian_filter(noise, sigma)
    smooth /= smooth.std() + 1e-12
    return smooth * scale


def _blob(rng, size, r_lo, r_hi, horseshoe):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    a = rng.uniform(r_lo, r_hi)
    b = rng.uniform(max(r_lo * 0.7, a * 0.55), a)
    margin = a + 1
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    theta = rng.uniform(0, np.pi)
    ct, st = np.cos(theta), np.sin(theta)
    u = (xx - cx) * ct + (yy - cy) * st
    v = -(xx - cx) * st + (yy - cy) * ct
    region = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if horseshoe:
        # carve an ellipse out of one end to leave an open U shape
        shift = 0.55 * a
        hole = ((u - shift) / (0.6 * a)) ** 2 + (v / (0.5 * b)) ** 2 <= 1.0
        region &= ~hole
    return region


def generate_sample(cfg, seed, index, landslide):
    rng = np.random.default_rng(seed_for(seed, index, int(landslide)))
    size = cfg.tile_size
    base = rng.uniform(90, 150, size=3)
    tint = rng.uniform(0.85, 1.15, size=3)
    bg = base[None, None, :] + _texture(rng, (size, size, 3), (4, 4, 0), cfg.noise_sigma)
    bg += _texture(rng, (size, size, 1), (12, 12, 0), cfg.noise_sigma)
    mask = np.zeros((size, size), dtype=bool)
    image = bg
    if landslide:
        n_blobs = int(rng.integers(cfg.blobs_per_tile[0], cfg.blobs_per_tile[1] + 1))
        for _ in range(n_blobs):
            region = _blob(rng, size, cfg.blob_radius[0], cfg.blob_radius[1],
                           rng.random() < cfg.horseshoe_prob)
            mask |= region
        # landslide body: finer, slightly shifted texture
        body = (base * tint)[None, None, :] + cfg.texture_contrast \
            + _texture(rng, (size, size, 3), (1.5, 1.5, 0), cfg.noise_sigma)
        image = np.where(mask[..., None], body, image)
        inner = ndimage.distance_transform_edt(mask)
        rim = mask & (inner <= cfg.rim_width)
        image = image + rim[..., None] * cfg.boundary_contrast
    pixels = np.clip(np.round(image), 0, 255).astype(np.uint8)
    return Sample(f"{'ls' if landslide else 'sl'}_{index:05d}", pixels, mask.astype(np.uint8))


def generate_synthetic_dataset(cfg: SynthConfig, seed=0):
    """Landslide-like blobs on smooth random terrain; pure in (cfg, seed)."""
    cfg.validate()
    out = [generate_sample(cfg, seed, k, True) for k in range(cfg.n_landslide)]
    out += [generate_sample(cfg, seed, cfg.n_landslide + k, False) for k in range(cfg.n_slope)]
    if cfg.n_landslide:
        # a degenerate blob draw would silently relabel the sample
        for s in out[:cfg.n_landslide]:
            assert s.mask.any(), s.id
    return out


def rim_band(mask, width):
    """Boolean band of blob pixels within ``width`` of the blob boundary."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.distance_transform_edt(mask)
    return mask & (inner <= width)


# --- disk layout -------------------------------------------------------------

def save_dataset(samples, out_dir, manifest=None):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(s.image).save(out / "images" / f"{s.id}.png")
        Image.fromarray(s.mask).save(out / "masks" / f"{s.id}.png")
    if manifest is not None:
        manifest.save(out / "manifest.json")


def load_image(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)


def load_dataset(data_dir):
    """Return ({id: Sample}, manifest or None)."""
    root = Path(data_dir)
    samples = {}
    for img_path in sorted((root / "images").glob("*.png")):
        sid = img_path.stem
        mask = np.asarray(Image.open(root / "masks" / f"{sid}.png"), dtype=np.uint8)
        samples[sid] = Sample(sid, load_image(img_path), mask)
    manifest_path = root / "manifest.json"
    manifest = DatasetManifest.load(manifest_path) if manifest_path.exists() else None
    return samples, manifest


@dataclass
class Splits:
    train: list
    val: list
    test: list


def prepare_splits(samples, manifest, equalize=True, augment_ops=AUGMENT_OPS):
    """Equalize every split; augment train and val only."""
    by_id = samples if isinstance(samples, dict) else {s.id: s for s in samples}
    parts = {}
    for name, ids in manifest.splits().items():
        chosen = [by_id[i] for i in ids]
        if equalize and not manifest.preprocessed:
            chosen = [equalize_sample(s) for s in chosen]
        if name != "test" and augment_ops and not manifest.preprocessed:
            chosen = expand_augmented(chosen, augment_ops)
        parts[name] = chosen
    return Splits(**parts)
