"""Page preprocessing: Otsu binarization, ink-probability map, patch sampling.

Gray images are ``uint8`` arrays of shape ``(height, width)`` with 0 = black
ink and 255 = white paper.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .corpus import PatchRecord, write_pgm
from .errors import DataError, ParameterError, ShapeError

log = logging.getLogger(__name__)

PATCH_SIZE = 64


@dataclass(frozen=True)
class PatchExtractionConfig:
    n_sub_img: int = 500
    k_sub_img: int = 64
    filter_window: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.n_sub_img < 1:
            raise ParameterError("n_sub_img must be >= 1")
        if self.k_sub_img < 1 or self.filter_window < 1:
            raise ParameterError("k_sub_img and filter_window must be >= 1")


def read_gray(path) -> np.ndarray:
    """Load a PGM/PNG (or anything Pillow reads) as an 8-bit gray array."""
    with Image.open(path) as im:
        return np.array(im.convert("L"), dtype=np.uint8)


def otsu_threshold(img: np.ndarray) -> int:
    """Threshold ``t`` in 0..255 maximizing between-class variance of ``{<t}`` vs ``{>=t}``.

    Scores are compared as exact rationals; among equal scores the lowest
    ``t`` wins, so a single-valued image gets ``t = 0``.
    """
    img = np.asarray(img)
    if img.size == 0:
        raise ShapeError("cannot threshold an empty image")
    hist = np.bincount(img.ravel().astype(np.int64), minlength=256)[:256]
    total = int(hist.sum())
    total_sum = int(np.dot(hist, np.arange(256)))
    best_t, best = 0, Fraction(0)
    n0 = s0 = 0
    for t in range(256):
        # class 0 holds intensities < t
        if t > 0:
            n0 += int(hist[t - 1])
            s0 += (t - 1) * int(hist[t - 1])
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        # N^2 * sigma_b^2 = (N*S0 - S*n0)^2 / (n0*n1)
        score = Fraction((total * s0 - total_sum * n0) ** 2, n0 * n1)
        if score > best:
            best, best_t = score, t
    return best_t


def binarize_otsu(img: np.ndarray) -> tuple[np.ndarray, int]:
    """Returns ``(ink_mask, t)`` with ink = 1 where intensity < t."""
    t = otsu_threshold(img)
    return (np.asarray(img) < t).astype(np.uint8), t


def ink_density(binary: np.ndarray, window: int) -> np.ndarray:
    """Box-filter mean of the ink mask; outside the page counts as no ink.

    The window at ``(y, x)`` spans rows ``y - window//2 .. y - window//2 + window - 1``
    (same for columns). Sums are exact integers before the final division.
    """
    if window < 1:
        raise ParameterError(f"window must be >= 1, got {window}")
    b = (np.asarray(binary) > 0).astype(np.int64)
    h, w = b.shape
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = b.cumsum(0).cumsum(1)
    lo = window // 2
    r0 = np.clip(np.arange(h) - lo, 0, h)
    r1 = np.clip(np.arange(h) - lo + window, 0, h)
    c0 = np.clip(np.arange(w) - lo, 0, w)
    c1 = np.clip(np.arange(w) - lo + window, 0, w)
    sums = (
        integral[r1][:, c1] - integral[r0][:, c1] - integral[r1][:, c0] + integral[r0][:, c0]
    )
    return sums / float(window * window)


def ink_probability_map(binary: np.ndarray, window: int = 32) -> np.ndarray:
    """Ink density scaled so its maximum is 1 (all zeros for a blank page)."""
    dens = ink_density(binary, window)
    peak = dens.max() if dens.size else 0.0
    if peak == 0:
        return np.zeros_like(dens)
    return dens / peak


def valid_center_range(extent: int, k: int) -> tuple[int, int]:
    """Inclusive range of centers whose k-wide window ``[c - k//2, c - k//2 + k)`` fits."""
    return k // 2, extent - k + k // 2


def sample_patches(img: np.ndarray, prob_map: np.ndarray, cfg: PatchExtractionConfig):
    """Draw ``cfg.n_sub_img`` patch centers (with replacement) proportionally to ``prob_map``.

    Only centers whose full ``k x k`` patch lies inside the page are eligible.
    Returns a list of ``(patch, (cx, cy))``.
    """
    img = np.asarray(img)
    prob_map = np.asarray(prob_map, dtype=np.float64)
    if prob_map.shape != img.shape:
        raise ShapeError(f"probability map {prob_map.shape} does not match image {img.shape}")
    h, w = img.shape
    k = cfg.k_sub_img
    if k > min(h, w):
        raise ShapeError(f"patch size {k} exceeds page extent {w}x{h}")
    y_lo, y_hi = valid_center_range(h, k)
    x_lo, x_hi = valid_center_range(w, k)
    weights = prob_map[y_lo:y_hi + 1, x_lo:x_hi + 1]
    total = weights.sum()
    if not total > 0:
        raise DataError("no ink found")
    rng = np.random.default_rng(cfg.seed)
    picks = rng.choice(weights.size, size=cfg.n_sub_img, p=(weights / total).ravel())
    out = []
    for idx in picks:
        cy = y_lo + int(idx) // weights.shape[1]
        cx = x_lo + int(idx) % weights.shape[1]
        top, left = cy - k // 2, cx - k // 2
        out.append((img[top:top + k, left:left + k].copy(), (cx, cy)))
    return out


def resize_bilinear(img: np.ndarray, size: int = PATCH_SIZE) -> np.ndarray:
    """Resample an isolated-character image to ``size x size``."""
    im = Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8))
    return np.array(im.resize((size, size), Image.BILINEAR), dtype=np.uint8)


def normalize_patch(patch: np.ndarray) -> np.ndarray:
    """``(255 - intensity) / 255`` as a ``(1, 64, 64)`` tensor: ink ~ 1, paper ~ 0."""
    patch = np.asarray(patch)
    if patch.shape != (PATCH_SIZE, PATCH_SIZE):
        raise ShapeError(f"patch must be 64x64, got {patch.shape}; resize_bilinear first")
    return ((255.0 - patch.astype(np.float64)) / 255.0)[None]


def extract_page(page_path, out_dir, writer: str, cfg: PatchExtractionConfig, page_id: str | None = None):
    """Run the full page pipeline and write ``<page_id>_patch<idx>.pgm`` files.

    Returns the manifest records; raises :class:`DataError` for a blank page.
    """
    page_path = Path(page_path)
    out_dir = Path(out_dir)
    page_id = page_id or page_path.stem
    img = read_gray(page_path)
    binary, _ = binarize_otsu(img)
    prob = ink_probability_map(binary, cfg.filter_window)
    patches = sample_patches(img, prob, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for idx, (patch, (cx, cy)) in enumerate(patches):
        name = f"{page_id}_patch{idx}.pgm"
        write_pgm(out_dir / name, patch)
        records.append(PatchRecord(name, cx, cy, writer))
    return records
