"""Synthetic ultrasound-like frames for smoke tests and demos.

Each video is a short clip over a speckled sector-shaped field.  COVID
videos carry a bright blob (the stand-in "pathology") that drifts from frame
to frame; its mask is written alongside.  Healthy videos have empty masks.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import SampleRecord, save_manifest
from .imageio import write_pgm


def _sector(size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, top = size / 2, -0.1 * size
    r = np.hypot(xx - cx, yy - top)
    angle = np.arctan2(xx - cx, yy - top)
    return (r > 0.2 * size) & (r < 1.05 * size) & (np.abs(angle) < 0.6)


def make_frame(rng: np.random.Generator, size: int, blob=None):
    """One frame and its mask; ``blob`` is (cx, cy, radius) in pixels or None."""
    field = _sector(size)
    speckle = rng.gamma(2.0, 25.0, size=(size, size))
    img = np.where(field, np.clip(speckle, 0, 140), 0.0)
    mask = np.zeros((size, size), dtype=np.uint8)
    if blob is not None:
        cx, cy, radius = blob
        yy, xx = np.mgrid[0:size, 0:size]
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        inside = d2 <= radius**2
        img = np.where(inside, 230 + rng.normal(0, 8, size=(size, size)), img)
        mask[inside] = 255
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8), mask


def make_dataset(out_dir, n_videos: int = 4, frames_per_video: int = 10, size: int = 512, seed: int = 0,
                 with_masks: bool = True) -> Path:
    """Write frames, masks and ``manifest.jsonl`` under ``out_dir``; returns the manifest path.

    Videos alternate covid / healthy, starting with covid.
    """
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    if with_masks:
        (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for v in range(n_videos):
        video_id = f"vid{v:03d}"
        label = "covid" if v % 2 == 0 else "healthy"
        cx, cy = rng.uniform(0.35, 0.65) * size, rng.uniform(0.45, 0.7) * size
        for f in range(frames_per_video):
            blob = None
            if label == "covid":
                drift = 0.01 * size * f
                blob = (cx + drift, cy + 0.5 * drift, 0.09 * size)
            img, mask = make_frame(rng, size, blob)
            sid = f"{video_id}_f{f:03d}"
            image_rel = f"frames/{sid}.pgm"
            write_pgm(out / image_rel, img)
            mask_rel = None
            if with_masks:
                mask_rel = f"masks/{sid}.pgm"
                write_pgm(out / mask_rel, mask)
            records.append(SampleRecord(sid, image_rel, label, video_id, f, mask_rel))
    manifest = out / "manifest.jsonl"
    save_manifest(records, manifest)
    return manifest
