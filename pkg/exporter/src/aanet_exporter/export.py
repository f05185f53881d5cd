"""Batch export: images in, AAFM feature maps plus a manifest out."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .aafm import feature_map_bytes, manifest_line
from .backbone import get_backbone

log = logging.getLogger("aanet_exporter")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


@dataclass(frozen=True)
class ExportJob:
    image_dir: Path
    output_dir: Path
    target_size: int = 24  # spatial side of the exported map
    backbone: str = "gradient-bank"
    resize: int = 384  # images are resized to resize x resize before encoding
    role: str = "database"

    def __post_init__(self):
        if self.target_size < 1 or self.resize < 1:
            raise ValueError("sizes must be >= 1")
        if self.resize % self.target_size != 0:
            raise ValueError(
                f"resize resolution {self.resize} not divisible by target {self.target_size}"
            )
        if self.role not in ("database", "query"):
            raise ValueError(f"unknown role {self.role!r}")


@dataclass
class ExportReport:
    exported: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)
    manifest_path: Path | None = None


def _load_grayscale(path: Path, resize: int) -> np.ndarray:
    with Image.open(path) as img:
        gray = img.convert("L").resize((resize, resize), Image.BILINEAR)
    return np.asarray(gray, dtype=np.float32) / 255.0


def _pool_to_target(features: np.ndarray, target: int) -> np.ndarray:
    h, w, c = features.shape
    block = h // target
    pooled = features.reshape(target, block, target, block, c).mean(axis=(1, 3))
    return pooled.astype(np.float32)


def encode_image(path: Path, job: ExportJob) -> np.ndarray:
    """Deterministic (H, W, C) map for one image at the job's target size."""
    backbone = get_backbone(job.backbone)
    image = _load_grayscale(path, job.resize)
    return _pool_to_target(backbone.features(image), job.target_size)


def export(job: ExportJob) -> ExportReport:
    """Write one AAFM per readable image plus a manifest.

    Per-image failures are logged and skipped; the report carries them.
    Identical inputs always produce byte-identical payloads.
    """
    images = sorted(
        p for p in Path(job.image_dir).iterdir()
        if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file()
    )
    if not images:
        raise FileNotFoundError(f"no images found in {job.image_dir}")
    out = Path(job.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = ExportReport()
    lines = []
    for path in images:
        image_id = path.stem
        try:
            fmap = encode_image(path, job)
            (out / f"{image_id}.aafm").write_bytes(feature_map_bytes(fmap))
        except Exception as e:
            log.warning("skipping %s: %s", path.name, e)
            report.failed[image_id] = str(e)
            continue
        lines.append(manifest_line(image_id, f"{image_id}.aafm", job.role))
        report.exported.append(image_id)
    if report.exported:
        manifest = out / "manifest.tsv"
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
        report.manifest_path = manifest
    return report
