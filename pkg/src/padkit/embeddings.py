"""Pluggable patch embedding providers.

The heavy pretrained backbone lives outside this package; training and
evaluation only ever see vectors. Two providers are built in:

* ``StubEmbedder``: a deterministic, dependency-free feature recipe
  (per-channel statistics, a gradient-magnitude histogram, radial
  frequency-band energies) followed by a seeded fixed random projection.
  It exists so the whole pipeline can run and be tested end to end at desk
  scale; it is not a detector of anything beyond texture statistics.
* imported stores: vectors produced elsewhere and loaded via
  :mod:`padkit.store`.

Pixel normalization uses the conventional ImageNet channel statistics so a
real backbone can be swapped in without touching callers. The native
backbone input size (224 x 224 for the intended one) is provider metadata
only; the stub consumes patches at their own resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .store import EmbeddingStore, patch_id

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])

# Rec. 601 luma weights, applied to normalized channels.
LUMA = np.array([0.299, 0.587, 0.114])

# Gradient-magnitude histogram: 8 log-spaced bins, first bin holds zero.
GRAD_BIN_EDGES = np.array([0.02, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6])

# Radial frequency bands in cycles/pixel, half-open [lo, hi).
BAND_EDGES = np.array([0.125, 0.25, 0.375])
N_BANDS = 4


@dataclass(frozen=True)
class StubConfig:
    dim: int = 384
    projection_seed: int = 7
    use_color_stats: bool = True
    use_gradient_hist: bool = True
    use_band_energies: bool = True

    @property
    def n_features(self) -> int:
        return 6 * self.use_color_stats + 8 * self.use_gradient_hist + N_BANDS * self.use_band_energies


def normalize_pixels(pixels: np.ndarray) -> np.ndarray:
    """uint8 RGB -> float64, scaled to [0, 1] then channel-standardized."""
    x = pixels.astype(np.float64) / 255.0
    return (x - IMAGENET_MEAN) / IMAGENET_STD


def gradient_hist(luma: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(luma)
    mag = np.sqrt(gx * gx + gy * gy)
    idx = np.searchsorted(GRAD_BIN_EDGES, mag.ravel(), side="right")
    hist = np.bincount(idx, minlength=8).astype(np.float64)
    return hist / mag.size


def band_energies(luma: np.ndarray) -> np.ndarray:
    """Fractions of non-DC spectral power in four radial bands.

    Bands partition radial frequency (cycles/pixel) at 0.125, 0.25 and
    0.375; a constant patch has zero non-DC power and yields all zeros.
    """
    h, w = luma.shape
    power = np.abs(np.fft.fft2(luma)) ** 2
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.sqrt(fx * fx + fy * fy)
    band = np.searchsorted(BAND_EDGES, radius.ravel(), side="right")
    p = power.ravel().copy()
    p[0] = 0.0  # DC sits at index (0, 0) in fft2 layout
    totals = np.bincount(band, weights=p, minlength=N_BANDS)
    s = totals.sum()
    if s == 0.0:
        return np.zeros(N_BANDS)
    return totals / s


def raw_features(pixels: np.ndarray, cfg: StubConfig) -> np.ndarray:
    x = normalize_pixels(pixels)
    luma = x @ LUMA
    parts = []
    if cfg.use_color_stats:
        parts.append(x.mean(axis=(0, 1)))
        parts.append(x.std(axis=(0, 1)))
    if cfg.use_gradient_hist:
        parts.append(gradient_hist(luma))
    if cfg.use_band_energies:
        parts.append(band_energies(luma))
    if not parts:
        raise ValueError("stub feature recipe has every group disabled")
    return np.concatenate(parts)


class StubEmbedder:
    """Deterministic handcrafted features + seeded random projection."""

    def __init__(self, cfg: StubConfig = StubConfig()):
        self.cfg = cfg
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.projection_seed)))
        self._projection = rng.normal(size=(cfg.n_features, cfg.dim)) / np.sqrt(cfg.n_features)

    @property
    def dim(self) -> int:
        return self.cfg.dim

    def provider_meta(self) -> dict:
        return {
            "provider": "stub",
            "dim": self.cfg.dim,
            "projection_seed": self.cfg.projection_seed,
            "normalization": "imagenet",
            "input_size": None,  # native backbone input size; stub has none
        }

    def embed(self, pixels: np.ndarray) -> np.ndarray:
        feats = raw_features(pixels, self.cfg)
        return (feats @ self._projection).astype(np.float32)


# ---------------------------------------------------------------------------
# training-time augmentation (stub path only)


@dataclass(frozen=True)
class AugmentConfig:
    blur_prob: float = 0.2
    jitter_prob: float = 0.2
    brightness: float = 0.2
    contrast: float = 0.25
    saturation: float = 0.2
    hue: float = 0.05


_BLUR_KERNEL = np.array([1.0, 2.0, 1.0]) / 4.0  # separable 3x3 Gaussian


def _blur3(x: np.ndarray) -> np.ndarray:
    pad = np.pad(x, ((1, 1), (0, 0), (0, 0)), mode="edge")
    x = pad[:-2] * _BLUR_KERNEL[0] + pad[1:-1] * _BLUR_KERNEL[1] + pad[2:] * _BLUR_KERNEL[2]
    pad = np.pad(x, ((0, 0), (1, 1), (0, 0)), mode="edge")
    return pad[:, :-2] * _BLUR_KERNEL[0] + pad[:, 1:-1] * _BLUR_KERNEL[1] + pad[:, 2:] * _BLUR_KERNEL[2]


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    span = maxc - minc
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(maxc > 0, span / maxc, 0.0)
        rc = np.where(span > 0, (maxc - r) / span, 0.0)
        gc = np.where(span > 0, (maxc - g) / span, 0.0)
        bc = np.where(span > 0, (maxc - b) / span, 0.0)
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = (h / 6.0) % 1.0
    h = np.where(span == 0, 0.0, h)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    choose = lambda a, b, c, d, e, f_: np.choose(i, [a, b, c, d, e, f_])
    r = choose(v, q, p, p, t, v)
    g = choose(t, v, v, q, p, p)
    b = choose(p, p, t, v, v, q)
    return np.stack([r, g, b], axis=-1)


def augment_patch(pixels: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Gaussian blur and color jitter, each applied with its own probability.

    Draw order is fixed: blur coin, then jitter coin, then (if jitter fires)
    brightness, contrast, saturation, hue factors in that order.
    """
    x = pixels.astype(np.float64) / 255.0
    if rng.uniform() < cfg.blur_prob:
        x = _blur3(x)
    if rng.uniform() < cfg.jitter_prob:
        b = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness)
        c = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast)
        s = rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation)
        hshift = rng.uniform(-cfg.hue, cfg.hue)
        x = np.clip(x * b, 0.0, 1.0)
        gray_mean = float((x @ LUMA).mean())
        x = np.clip((x - gray_mean) * c + gray_mean, 0.0, 1.0)
        gray = (x @ LUMA)[..., None]
        x = np.clip((x - gray) * s + gray, 0.0, 1.0)
        hsv = _rgb_to_hsv(x)
        hsv[..., 0] = (hsv[..., 0] + hshift) % 1.0
        x = _hsv_to_rgb(hsv)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# store construction from exported patch directories


def _doc_rng(seed: int, doc_id: str) -> np.random.Generator:
    from .patches import document_rng

    return document_rng(seed, doc_id)


def embed_manifest_rows(
    rows,
    embedder: StubEmbedder,
    seed: int = 0,
    augment_variants: int = 0,
    augment_cfg: AugmentConfig = AugmentConfig(),
) -> EmbeddingStore:
    """Embed every exported patch of every row into a fresh store.

    ``rows`` need ``doc_id`` and ``patch_dir`` attributes. With
    ``augment_variants`` > 0, each patch additionally gets that many
    augmented vectors under ``#a<k>`` ids, drawn from a per-document
    generator seeded by ``(seed, doc_id)``.
    """
    out = EmbeddingStore(embedder.dim)
    for row in rows:
        if row.patch_dir is None:
            raise ValueError(f"row {row.doc_id}: no patch_dir, run extraction first")
        pdir = Path(row.patch_dir)
        if not pdir.is_dir():
            raise FileNotFoundError(f"patch dir missing for {row.doc_id}: {pdir}")
        rng = _doc_rng(seed, row.doc_id)
        for f in sorted(pdir.glob("*.png")):
            with Image.open(f) as im:
                pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
            out.add(patch_id(row.doc_id, f.stem), embedder.embed(pixels))
            for k in range(augment_variants):
                aug = augment_patch(pixels, rng, augment_cfg)
                out.add(patch_id(row.doc_id, f.stem, variant=k), embedder.embed(aug))
    return out
