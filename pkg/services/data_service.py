"""
Image/mask samples: seeded synthetic defect generator, folder ingestion and
the resize + crop pipeline used for training and evaluation.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw, ImageFilter, UnidentifiedImageError

from models.deft_models import DefectKind, IngestRecord, SynthSpec
from models.errors import DataIOError, UsageError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
MASK_THRESHOLD = 128
EVAL_SIZE = 256
TEXTURE_OCTAVES = 4


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    mask: np.ndarray  # [1, H, W] float32 in {0, 1}
    id: str

    @property
    def size(self) -> Tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


def to_unit(levels: np.ndarray) -> np.ndarray:
    """8-bit levels to float32 in [0, 1]. Shared by the generator and the folder reader."""
    return np.asarray(levels).astype(np.float32) / np.float32(255)


# resampling


def _resize_plane(plane: np.ndarray, size: Tuple[int, int], resample) -> np.ndarray:
    h, w = size
    img = Image.fromarray(np.ascontiguousarray(plane, dtype=np.float32))
    return np.asarray(img.resize((w, h), resample=resample), dtype=np.float32)


def resize_sample(s: Sample, size: Tuple[int, int]) -> Sample:
    """Bilinear for the image, nearest for the mask; no-op at the same size."""
    if s.size == tuple(size):
        return s
    image = np.stack([_resize_plane(c, size, Image.Resampling.BILINEAR) for c in s.image])
    mask = _resize_plane(s.mask[0], size, Image.Resampling.NEAREST)[None]
    return Sample(np.clip(image, 0.0, 1.0), (mask >= 0.5).astype(np.float32), s.id)


def augment_train(s: Sample, rng: np.random.Generator, resize_to: int = 256, crop_to: int = 224,
                  hflip: bool = False) -> Sample:
    """Resize to ``resize_to`` square, then crop ``crop_to`` square at one rng offset for image and mask."""
    if crop_to > resize_to:
        raise UsageError("crop_to must not exceed resize_to", {"crop_to": crop_to, "resize_to": resize_to})
    s = resize_sample(s, (resize_to, resize_to))
    top = int(rng.integers(0, resize_to - crop_to + 1))
    left = int(rng.integers(0, resize_to - crop_to + 1))
    image = s.image[:, top:top + crop_to, left:left + crop_to]
    mask = s.mask[:, top:top + crop_to, left:left + crop_to]
    if hflip and rng.random() < 0.5:
        image, mask = image[:, :, ::-1], mask[:, :, ::-1]
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(mask), s.id)


def prepare_eval(s: Sample, size: int = EVAL_SIZE) -> Sample:
    return resize_sample(s, (size, size))


def stack_batch(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples]).astype(np.float32)
    return images, masks


def subsample(samples: Sequence[Sample], fraction: float, seed: int) -> List[Sample]:
    """Seeded subset of ``ceil(fraction * n)`` samples, kept in their original order."""
    if not 0 < fraction <= 1:
        raise UsageError("fraction must lie in (0, 1]", {"fraction": fraction})
    if fraction == 1:
        return list(samples)
    keep = max(1, math.ceil(fraction * len(samples)))
    chosen = np.sort(np.random.default_rng(seed).permutation(len(samples))[:keep])
    return [samples[i] for i in chosen]


def train_test_split(samples: Sequence[Sample], test_fraction: float, seed: int) -> Tuple[List[Sample], List[Sample]]:
    if not 0 <= test_fraction < 1:
        raise UsageError("test_fraction must lie in [0, 1)", {"test_fraction": test_fraction})
    order = np.random.default_rng(seed).permutation(len(samples))
    n_test = int(round(test_fraction * len(samples)))
    test = [samples[i] for i in sorted(order[:n_test])]
    train = [samples[i] for i in sorted(order[n_test:])]
    return train, test


# synthetic generator


def _value_noise(rng: np.random.Generator, size: int, scale: int) -> np.ndarray:
    """Sum of bilinearly upsampled random grids, coarsest cell ``scale`` pixels, halving per octave."""
    texture = np.zeros((size, size), dtype=np.float32)
    cell, amplitude = max(scale, 1), 1.0
    for _ in range(TEXTURE_OCTAVES):
        cells = max(2, math.ceil(size / cell) + 1)
        grid = rng.standard_normal((cells, cells)).astype(np.float32)
        texture += amplitude * _resize_plane(grid, (size, size), Image.Resampling.BILINEAR)
        if cell == 1:
            break
        cell, amplitude = max(cell // 2, 1), amplitude * 0.5
    texture -= texture.mean()
    return texture / (np.abs(texture).max() + 1e-6)


def _draw_defect(draw: ImageDraw.ImageDraw, rng: np.random.Generator, kind: DefectKind, size: int, extent: float):
    cy, cx = rng.uniform(0.1 * size, 0.9 * size, size=2)
    if kind == DefectKind.BLOB:
        ry = extent / 2 * rng.uniform(0.6, 1.0)
        rx = extent / 2 * rng.uniform(0.6, 1.0)
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    else:
        angle = rng.uniform(0, math.pi)
        dx, dy = math.cos(angle) * extent / 2, math.sin(angle) * extent / 2
        width = max(1, int(round(extent * 0.08)))
        draw.line([cx - dx, cy - dy, cx + dx, cy + dy], fill=255, width=width)


def _synth_one(spec: SynthSpec, rng: np.random.Generator, index: int) -> Sample:
    size = spec.image_size
    base = rng.uniform(0.35, 0.65)
    gray = base + 0.12 * _value_noise(rng, size, spec.texture_scale)

    layer = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(layer)
    low, high = spec.defect_count_range
    for _ in range(int(rng.integers(low, high + 1))):
        kind = DefectKind(spec.defect_kinds[int(rng.integers(len(spec.defect_kinds)))])
        extent = rng.uniform(*spec.defect_size_range) * size
        _draw_defect(draw, rng, kind, size, extent)
    mask = (np.asarray(layer) >= MASK_THRESHOLD).astype(np.float32)
    sign = -1.0 if rng.random() < 0.7 else 1.0
    gray = gray + sign * spec.contrast * mask

    # pseudo-defects: low-contrast smudges that stay out of the mask
    smudges = Image.new("L", (size, size), 0)
    smudge_draw = ImageDraw.Draw(smudges)
    for _ in range(int(rng.poisson(spec.pseudo_defect_density))):
        extent = rng.uniform(*spec.defect_size_range) * size * 1.5
        _draw_defect(smudge_draw, rng, DefectKind.BLOB, size, extent)
    radius = max(1.0, size / 64)
    smudge = np.asarray(smudges.filter(ImageFilter.GaussianBlur(radius)), dtype=np.float32) / 255.0
    gray = gray + sign * 0.3 * spec.contrast * smudge

    tint = rng.uniform(0.9, 1.1, size=3).astype(np.float32)
    image = gray[None] * tint[:, None, None]
    image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    image = to_unit(np.round(np.clip(image, 0.0, 1.0) * 255.0))
    return Sample(image, mask[None], f"synth_{index:04d}")


def synth_generate(spec: SynthSpec) -> List[Sample]:
    """Deterministic for a fixed ``spec.seed``; masks mark genuine defects only."""
    if spec.image_size == 0:
        raise UsageError("image_size must be positive")
    if not spec.defect_kinds:
        raise UsageError("defect_kinds must not be empty")
    rng = np.random.default_rng(spec.seed)
    samples = [_synth_one(spec, rng, i) for i in range(spec.count)]
    logger.info("generated synthetic samples count=%d size=%d seed=%d", spec.count, spec.image_size, spec.seed)
    return samples


# folders


def _read_image(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert(mode))
    except (UnidentifiedImageError, OSError) as e:
        raise DataIOError("unreadable image file", {"path": str(path), "original_error": str(e)})


def _index_dir(path: Path) -> dict:
    return {p.stem: p for p in sorted(path.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_folder(images_dir, masks_dir) -> Tuple[List[Sample], List[IngestRecord]]:
    """Pair images with masks by filename stem; images without a usable mask are reported and skipped."""
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    for d in (images_dir, masks_dir):
        if not d.is_dir():
            raise DataIOError("dataset directory not found", {"path": str(d)})
    images, masks = _index_dir(images_dir), _index_dir(masks_dir)
    samples, report = [], []
    for stem, image_path in images.items():
        if stem not in masks:
            logger.warning("skipping sample without mask stem=%s", stem)
            report.append(IngestRecord(stem=stem, status="missing_mask"))
            continue
        rgb = _read_image(image_path, "RGB")
        gray = _read_image(masks[stem], "L")
        if rgb.shape[:2] != gray.shape:
            logger.warning("skipping sample with misaligned mask stem=%s", stem)
            report.append(IngestRecord(stem=stem, status="size_mismatch"))
            continue
        image = to_unit(rgb.transpose(2, 0, 1))
        mask = (gray >= MASK_THRESHOLD).astype(np.float32)[None]
        samples.append(Sample(image, mask, stem))
        report.append(IngestRecord(stem=stem, status="ok"))
    logger.info("ingested folder images_dir=%s samples=%d skipped=%d",
                images_dir, len(samples), len(report) - len(samples))
    return samples, report


def write_folder(samples: Sequence[Sample], out_dir) -> Path:
    """Write ``images/<id>.png`` and ``masks/<id>.png`` (8-bit, lossless)."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
        for s in samples:
            rgb = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
            Image.fromarray(rgb).save(out_dir / "images" / f"{s.id}.png")
            gray = (s.mask[0] > 0.5).astype(np.uint8) * 255
            Image.fromarray(gray).save(out_dir / "masks" / f"{s.id}.png")
    except OSError as e:
        raise DataIOError("could not write dataset", {"path": str(out_dir), "original_error": str(e)})
    logger.info("wrote dataset out_dir=%s samples=%d", out_dir, len(samples))
    return out_dir


def write_ingest_report(report: Sequence[IngestRecord], path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for record in report:
                fh.write(json.dumps(record.model_dump()) + "\n")
    except OSError as e:
        raise DataIOError("could not write ingest report", {"path": str(path), "original_error": str(e)})
    return path
