"""Image samples, fundus directory loading and the synthetic two-domain generator.

Labels are single integer maps: 0 background, 1 disc rim, 2 cup. The disc
mask is ``label >= 1`` so the cup always counts as part of the disc.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)

DOMAINS = ("source", "target", "synth_s_to_t", "synth_t_to_s")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray  # H x W x 3 float32 in [0, 1]
    label: Optional[np.ndarray] = None  # H x W uint8 in {0, 1, 2}
    domain: str = "source"
    id: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"{self.id}: pixels must be HxWx3, got {px.shape}")
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise ValueError(f"{self.id}: image smaller than 8x8")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError(f"{self.id}: pixel values must be finite and in [0, 1]")
        if self.label is not None:
            if self.label.shape != px.shape[:2]:
                raise ValueError(f"{self.id}: label shape {self.label.shape} != image {px.shape[:2]}")
            if not np.isin(self.label, (0, 1, 2)).all():
                raise ValueError(f"{self.id}: label values outside {{0, 1, 2}}")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    def with_(self, **changes) -> "ImageSample":
        return replace(self, **changes)


def disc_mask(label: np.ndarray) -> np.ndarray:
    return label >= 1


def cup_mask(label: np.ndarray) -> np.ndarray:
    return label == 2


def label_to_masks(label: np.ndarray) -> np.ndarray:
    """2 x H x W float masks in network channel order (cup, disc)."""
    return np.stack([cup_mask(label), disc_mask(label)]).astype(np.float32)


def stack_pixels(samples: Sequence[ImageSample]) -> np.ndarray:
    """B x 3 x H x W float32 batch."""
    return np.stack([s.pixels.transpose(2, 0, 1) for s in samples]).astype(np.float32)


def fingerprint(samples: Sequence[ImageSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.id.encode())
        h.update(np.ascontiguousarray(s.pixels, dtype=np.float32).tobytes())
        if s.label is not None:
            h.update(np.ascontiguousarray(s.label).tobytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# Directory datasets

def _resize_image(arr: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray((np.clip(arr, 0, 1) * 255).round().astype(np.uint8))
    img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def _resize_label(label: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray(label.astype(np.uint8)).resize((size, size), Image.NEAREST)
    return np.asarray(img, dtype=np.uint8)


def _center_crop(arr: np.ndarray, fraction: float) -> np.ndarray:
    h, w = arr.shape[:2]
    side = max(8, int(round(min(h, w) * fraction)))
    top, left = (h - side) // 2, (w - side) // 2
    return arr[top:top + side, left:left + side]


def mask_to_label(mask: np.ndarray) -> np.ndarray:
    """Map an 8-bit 0/128/255 mask onto label values 0/1/2."""
    if mask.ndim == 3:
        mask = mask[..., 0]
    label = np.zeros(mask.shape, dtype=np.uint8)
    label[mask >= 64] = 1
    label[mask >= 192] = 2
    return label


def label_to_mask(label: np.ndarray) -> np.ndarray:
    return np.array([0, 128, 255], dtype=np.uint8)[label]


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:  # PIL raises a zoo of types
        raise IOError(f"cannot read image file {path}: {exc}") from exc


def _read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return mask_to_label(np.asarray(im.convert("L")))
    except Exception as exc:
        raise IOError(f"cannot read mask file {path}: {exc}") from exc


def load_dataset(root, split: str, working_resolution: int = 64, few_shot: Optional[int] = None,
                 seed: int = 0, center_crop: Optional[float] = None,
                 normalize: bool = False) -> list[ImageSample]:
    """Load ``<root>/images`` (+ optional ``<root>/masks``) resized to the working resolution.

    ``split`` is ``source`` (labels required, truncated to ``few_shot`` images
    by a seeded draw over the sorted listing), ``target`` or ``test``.
    """
    if split not in ("source", "target", "test"):
        raise ValueError(f"unknown split {split!r}")
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    files = sorted(p for p in img_dir.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES) \
        if img_dir.is_dir() else []
    if not files:
        raise FileNotFoundError(f"no images found under {img_dir}")

    if split == "source" and few_shot is not None and few_shot < len(files):
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(files), size=few_shot, replace=False))
        files = [files[i] for i in pick]

    domain = "source" if split == "source" else "target"
    samples = []
    for path in files:
        pixels = _read_image(path)
        label = None
        mask_path = mask_dir / (path.stem + ".png")
        if mask_path.exists():
            label = _read_mask(mask_path)
            if label.shape != pixels.shape[:2]:
                raise ValueError(f"mask {mask_path} does not match image size")
        elif split == "source":
            raise FileNotFoundError(f"missing mask for source image {path.name}")
        if center_crop:
            pixels = _center_crop(pixels, center_crop)
            label = None if label is None else _center_crop(label, center_crop)
        pixels = _resize_image(pixels, working_resolution)
        if normalize:
            lo, hi = pixels.min(), pixels.max()
            pixels = (pixels - lo) / max(hi - lo, 1e-6)
        if label is not None:
            label = _resize_label(label, working_resolution)
        samples.append(ImageSample(pixels.astype(np.float32), label, domain, path.stem))
    return samples


def save_dataset(samples: Sequence[ImageSample], root, manifest: bool = False) -> None:
    """Write samples as ``images/<id>.png`` and ``masks/<id>.png`` (when labelled)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        Image.fromarray((s.pixels * 255).round().astype(np.uint8)).save(root / "images" / f"{s.id}.png")
        if s.label is not None:
            (root / "masks").mkdir(exist_ok=True)
            Image.fromarray(label_to_mask(s.label)).save(root / "masks" / f"{s.id}.png")
        records.append({"id": s.id, "domain": s.domain, **s.meta})
    if manifest:
        (root / "manifest.json").write_text(json.dumps(records, indent=1))


# --------------------------------------------------------------------------
# Synthetic fundus-like domains

@dataclass(frozen=True)
class StyleParams:
    """Appearance of one synthetic domain."""
    name: str
    base_intensity: float  # background luminance
    contrast: float  # luminance gain of the disc over the background
    cup_contrast: float  # extra gain of the cup over the rim
    color_cast: tuple[float, float, float]  # per-channel multiplier
    noise: float  # std of additive pixel noise
    blur: float = 0.0  # gaussian sigma, pixels
    texture: float = 0.08  # amplitude of the smooth background field


SOURCE_STYLE = StyleParams("source", base_intensity=0.42, contrast=0.30, cup_contrast=0.22,
                           color_cast=(1.0, 0.62, 0.38), noise=0.02, blur=0.6, texture=0.10)
TARGET_STYLE = StyleParams("target", base_intensity=0.28, contrast=0.21, cup_contrast=0.155,
                           color_cast=(0.65, 0.88, 1.0), noise=0.03, blur=1.1, texture=0.08)


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return f / (np.abs(f).max() + 1e-8)


def _ellipse(yy, xx, cy, cx, ry, rx, theta) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / rx) ** 2 + (v / ry) ** 2


def render_sample(style: StyleParams, rng: np.random.Generator, size: int, sample_id: str,
                  domain: str = "source") -> ImageSample:
    while True:
        cy = size / 2 + rng.uniform(-size / 8, size / 8)
        cx = size / 2 + rng.uniform(-size / 8, size / 8)
        r_disc = rng.uniform(0.14, 0.24) * size
        aspect = rng.uniform(0.8, 1.25)
        theta = rng.uniform(0, np.pi)
        r_cup = r_disc * rng.uniform(0.35, 0.7)
        if r_cup >= r_disc or r_cup * min(aspect, 1 / aspect) < 1.5:
            continue
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        d_disc = _ellipse(yy, xx, cy, cx, r_disc * aspect, r_disc, theta)
        d_cup = _ellipse(yy, xx, cy, cx, r_cup * aspect, r_cup, theta)
        disc, cup = d_disc <= 1.0, d_cup <= 1.0
        if cup.any() and disc.any():
            break

    label = disc.astype(np.uint8) + cup.astype(np.uint8)
    # Soft radial falloff so the structures are not flat discs.
    disc_profile = np.clip(1.25 - 0.5 * d_disc, 0, 1) * disc
    cup_profile = np.clip(1.2 - 0.4 * d_cup, 0, 1) * cup
    lum = (style.base_intensity
           + style.texture * _smooth_field(rng, size, size / 10)
           + style.contrast * disc_profile
           + style.cup_contrast * cup_profile)
    # Vessel-like dark streaks crossing the field.
    for _ in range(rng.integers(2, 5)):
        angle = rng.uniform(0, np.pi)
        offset = rng.uniform(-size / 3, size / 3)
        dist = np.abs((xx - cx) * np.sin(angle) - (yy - cy) * np.cos(angle) - offset)
        lum -= 0.35 * style.contrast * np.exp(-(dist / 0.9) ** 2)
    rgb = lum[..., None] * np.asarray(style.color_cast)[None, None, :]
    if style.blur > 0:
        rgb = ndimage.gaussian_filter(rgb, sigma=(style.blur, style.blur, 0))
    rgb = rgb + style.noise * rng.standard_normal(rgb.shape)
    pixels = np.clip(rgb, 0.0, 1.0).astype(np.float32)
    return ImageSample(pixels, label, domain, sample_id, {"style": style.name})


def gen_synthetic_domain(style: StyleParams, count: int, seed: int, size: int = 64,
                         domain: Optional[str] = None, prefix: Optional[str] = None) -> list[ImageSample]:
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    domain = domain or ("source" if style.name == "source" else "target")
    prefix = prefix or f"{style.name}{seed}"
    return [render_sample(style, rng, size, f"{prefix}_{i:04d}", domain) for i in range(count)]


def desk_domains(seed: int, cfg=None) -> dict[str, list[ImageSample]]:
    """Source / target-train / target-test sets for the desk-scale experiment."""
    size = 64 if cfg is None else cfg.working_resolution
    n_src = 10 if cfg is None else cfg.few_shot
    n_tgt = 60 if cfg is None else cfg.n_target_train
    n_test = 40 if cfg is None else cfg.n_target_test
    base = 1000 * seed
    return {
        "source": gen_synthetic_domain(SOURCE_STYLE, n_src, base + 1, size, prefix=f"src{seed}"),
        "target": gen_synthetic_domain(TARGET_STYLE, n_tgt, base + 2, size, prefix=f"tgt{seed}"),
        "test": gen_synthetic_domain(TARGET_STYLE, n_test, base + 3, size, prefix=f"test{seed}"),
    }


def strip_labels(samples: Sequence[ImageSample]) -> list[ImageSample]:
    return [s.with_(label=None) for s in samples]
