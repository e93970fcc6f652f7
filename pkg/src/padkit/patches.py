"""Patch anonymization, tiling, filtering, and privacy-preserving export.

The export step deliberately destroys spatial layout: patches receive
random six-digit names and are written in shuffled order, so nothing on
disk encodes where a patch sat in the source document.

Randomness is a single per-document generator seeded from the job seed and
the document id. Draw order is fixed and documented: one keep/drop uniform
per candidate that survived the black filter, consumed in grid order, then
one shuffle of the kept list, then name draws at export time. Because the
keep draws are consumed positionally, masking more pixels (which can only
shrink the set of candidates surviving the black filter) can only shrink
the kept count; this is what makes kept counts monotone across
anonymization levels under a fixed seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

LABELS = frozenset({"real", "print", "screen", "composite"})
DEVICES = frozenset({"iphone15", "mi9tpro", "redmi9c", "other"})
ILLUMINATIONS = frozenset(
    {"no_light_flash", "dim_flash", "dim_noflash", "bright_flash", "bright_noflash"}
)
HEIGHTS_CM = frozenset({10.0, 12.5, 15.0})
ANON_LEVELS = frozenset({"non", "pseudo", "full"})
PATCH_SIZES = frozenset({64, 128})

MAX_NAMES_PER_DOC = 10**6


class PatchPipelineError(ValueError):
    pass


class MetadataError(PatchPipelineError):
    """A metadata field is outside its closed vocabulary."""


class AnonymizationBoundsError(PatchPipelineError):
    """A mask rectangle reaches outside the image."""


class ImageTooSmallError(PatchPipelineError):
    """Image smaller than the patch size in the named dimension."""


class NameSpaceExhaustedError(PatchPipelineError):
    """More patches than the six-digit name space can hold."""


@dataclass(frozen=True)
class DocumentMeta:
    subject_id: str
    label: str
    device: str
    illumination: str
    height_cm: float
    anon_level: str
    template_version: int

    def __post_init__(self):
        if self.label not in LABELS:
            raise MetadataError(f"unknown label {self.label!r}")
        if self.device not in DEVICES:
            raise MetadataError(f"unknown device {self.device!r}")
        if self.illumination not in ILLUMINATIONS:
            raise MetadataError(f"unknown illumination {self.illumination!r}")
        if float(self.height_cm) not in HEIGHTS_CM:
            raise MetadataError(f"unknown capture height {self.height_cm!r}")
        if self.anon_level not in ANON_LEVELS:
            raise MetadataError(f"unknown anonymization level {self.anon_level!r}")
        if not (isinstance(self.template_version, int) and self.template_version >= 1):
            raise MetadataError(f"template_version must be a positive int, got {self.template_version!r}")


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle, (x, y) top-left corner, in pixels."""

    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True)
class AnonymizationSpec:
    level: str
    rects: tuple[Rect, ...] = ()

    def __post_init__(self):
        if self.level not in ANON_LEVELS:
            raise MetadataError(f"unknown anonymization level {self.level!r}")
        if self.level == "non" and self.rects:
            raise PatchPipelineError("level 'non' must carry no mask rectangles")


@dataclass
class SourceImage:
    """8-bit RGB pixels (H, W, 3) plus capture metadata."""

    pixels: np.ndarray
    meta: DocumentMeta

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise PatchPipelineError(f"expected (H, W, 3) uint8 pixels, got {p.shape} {p.dtype}")
        self.pixels = p

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class PatchRecord:
    pixels: np.ndarray  # (p, p, 3) uint8
    black_fraction: float
    meta: DocumentMeta
    export_name: str | None = None  # six digits, assigned at export


@dataclass(frozen=True)
class ExtractionConfig:
    patch_size: int = 64
    black_threshold: float = 0.8
    keep_prob: float = 0.9
    rng_seed: int = 0

    def __post_init__(self):
        if self.patch_size not in PATCH_SIZES:
            raise PatchPipelineError(f"patch_size must be one of {sorted(PATCH_SIZES)}")
        if not 0.0 <= self.black_threshold <= 1.0:
            raise PatchPipelineError("black_threshold must lie in [0, 1]")
        if not 0.0 < self.keep_prob <= 1.0:
            raise PatchPipelineError("keep_prob must lie in (0, 1]")


def document_rng(seed: int, doc_id: str) -> np.random.Generator:
    """Deterministic per-document generator from the job seed and doc id."""
    digest = hashlib.sha256(doc_id.encode("utf-8")).digest()
    ss = np.random.SeedSequence([int(seed), int.from_bytes(digest[:8], "little")])
    return np.random.Generator(np.random.PCG64(ss))


def apply_anonymization(img: SourceImage, spec: AnonymizationSpec) -> SourceImage:
    """Paint every mask rectangle pitch black. Returns a new image."""
    out = img.pixels.copy()
    for r in spec.rects:
        if r.w < 0 or r.h < 0 or r.x < 0 or r.y < 0 or r.x + r.w > img.width or r.y + r.h > img.height:
            raise AnonymizationBoundsError(
                f"rect (x={r.x}, y={r.y}, w={r.w}, h={r.h}) outside {img.width}x{img.height} image"
            )
        out[r.y : r.y + r.h, r.x : r.x + r.w, :] = 0
    meta = DocumentMeta(
        subject_id=img.meta.subject_id,
        label=img.meta.label,
        device=img.meta.device,
        illumination=img.meta.illumination,
        height_cm=img.meta.height_cm,
        anon_level=spec.level,
        template_version=img.meta.template_version,
    )
    return SourceImage(out, meta)


def black_fraction(patch: np.ndarray) -> float:
    """Fraction of pixels that are exactly (0, 0, 0)."""
    return float((patch == 0).all(axis=2).mean())


def tile(img: SourceImage, patch_size: int) -> list[PatchRecord]:
    """Non-overlapping row-major grid from the (0, 0) origin.

    Stride equals the patch size; remainder rows/columns are dropped.
    """
    p = patch_size
    if img.width < p:
        raise ImageTooSmallError(f"image width {img.width} smaller than patch size {p}")
    if img.height < p:
        raise ImageTooSmallError(f"image height {img.height} smaller than patch size {p}")
    nx = img.width // p
    ny = img.height // p
    black = (img.pixels == 0).all(axis=2)
    tile_black = black[: ny * p, : nx * p].reshape(ny, p, nx, p).mean(axis=(1, 3))
    out: list[PatchRecord] = []
    for gy in range(ny):
        for gx in range(nx):
            pix = img.pixels[gy * p : (gy + 1) * p, gx * p : (gx + 1) * p, :]
            out.append(PatchRecord(pix.copy(), float(tile_black[gy, gx]), img.meta))
    return out


def filter_and_sample(
    candidates: list[PatchRecord],
    cfg: ExtractionConfig,
    rng: np.random.Generator,
) -> list[PatchRecord]:
    """Drop too-black candidates, keep survivors with ``keep_prob``, shuffle.

    Draw order: one uniform per black-filter survivor in candidate order,
    then a single shuffle of the kept list.
    """
    kept = [
        c
        for c in candidates
        if c.black_fraction <= cfg.black_threshold and rng.uniform() < cfg.keep_prob
    ]
    rng.shuffle(kept)
    return kept


def export_patchset(
    kept: list[PatchRecord],
    out_dir: str | Path,
    rng: np.random.Generator,
) -> dict[str, PatchRecord]:
    """Write patches as ``<name>.png`` with random six-digit names.

    Name collisions are resolved by redrawing; a document may hold at most
    one million patches. Returns the name -> record mapping for the
    holder-side manifest. No file name or ordering encodes grid position.
    """
    if len(kept) > MAX_NAMES_PER_DOC:
        raise NameSpaceExhaustedError(
            f"{len(kept)} patches exceed the {MAX_NAMES_PER_DOC} six-digit name space"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    taken: set[str] = set()
    mapping: dict[str, PatchRecord] = {}
    for rec in kept:
        name = f"{rng.integers(0, MAX_NAMES_PER_DOC):06d}"
        while name in taken:
            name = f"{rng.integers(0, MAX_NAMES_PER_DOC):06d}"
        taken.add(name)
        rec.export_name = name
        Image.fromarray(rec.pixels, mode="RGB").save(out / f"{name}.png")
        mapping[name] = rec
    return mapping


def extract_document(
    img: SourceImage,
    anon: AnonymizationSpec,
    cfg: ExtractionConfig,
    doc_id: str,
    rng: np.random.Generator | None = None,
) -> list[PatchRecord]:
    """Anonymize, tile, filter and sample one document deterministically."""
    if rng is None:
        rng = document_rng(cfg.rng_seed, doc_id)
    masked = apply_anonymization(img, anon)
    candidates = tile(masked, cfg.patch_size)
    return filter_and_sample(candidates, cfg, rng)


def export_document(
    img: SourceImage,
    anon: AnonymizationSpec,
    cfg: ExtractionConfig,
    doc_id: str,
    out_dir: str | Path,
) -> dict[str, PatchRecord]:
    """Full single-document pipeline: extract then export under ``out_dir``.

    The same generator that produced the keep/shuffle draws continues into
    the name draws, so a rerun with the same seed reproduces names exactly.
    """
    rng = document_rng(cfg.rng_seed, doc_id)
    kept = extract_document(img, anon, cfg, doc_id, rng=rng)
    return export_patchset(kept, out_dir, rng)


def load_image(path: str | Path, meta: DocumentMeta) -> SourceImage:
    try:
        with Image.open(path) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise PatchPipelineError(f"cannot read image {path}: {e}") from e
    return SourceImage(pixels, meta)
