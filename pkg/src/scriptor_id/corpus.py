"""Patch files and the tab-separated manifest shared by real and synthetic corpora.

A manifest is a text file with one record per line::

    <patch file>\t<center x>\t<center y>\t<writer id>

Lines starting with ``#`` are comments. Patch paths are relative to the
manifest's directory.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

MANIFEST_HEADER = "# file\tcenter_x\tcenter_y\twriter"


@dataclass(frozen=True)
class PatchRecord:
    file: str
    x: int
    y: int
    writer: str


def write_pgm(path, pixels: np.ndarray):
    """Binary (P5) 8-bit PGM."""
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format="PPM")


def write_manifest(path, records) -> None:
    lines = [MANIFEST_HEADER]
    lines += [f"{r.file}\t{r.x}\t{r.y}\t{r.writer}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[PatchRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        try:
            records.append(PatchRecord(parts[0], int(parts[1]), int(parts[2]), parts[3]))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return records


def load_patch_sets(manifest_path) -> dict[str, np.ndarray]:
    """Read every patch listed in a manifest, grouped by writer, as ``(N, 1, 64, 64)`` tensors.

    Writers are returned in sorted order; patches keep manifest order.
    """
    from .preprocess import normalize_patch, read_gray, resize_bilinear

    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    groups: dict[str, list] = defaultdict(list)
    for rec in read_manifest(manifest_path):
        img = read_gray(root / rec.file)
        if img.shape != (64, 64):
            img = resize_bilinear(img)
        groups[rec.writer].append(normalize_patch(img))
    return {w: np.stack(groups[w]) for w in sorted(groups)}
