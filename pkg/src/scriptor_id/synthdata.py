"""Synthetic handwriting: parameterized writer styles rendering a shared glyph vocabulary.

Every glyph is a fixed set of stroke skeletons (shared by all writers). A
writer's style bends, slants and thickens those skeletons and may add small
loops at stroke starts; per-instance jitter perturbs the control points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy.stats import qmc

from .corpus import PatchRecord, write_manifest, write_pgm
from .errors import DataError, ParameterError
from .sampling import derive_seed

SIZE = 64
SPLITS = ("train", "val", "test")

SLANT_RANGE = (-30.0, 30.0)
THICKNESS_RANGE = (1.0, 4.0)
CURVATURE_RANGE = (-0.35, 0.35)
JITTER_RANGE = (0.3, 1.5)
LOOP_RANGE = (0.0, 1.0)
_RANGES = (SLANT_RANGE, THICKNESS_RANGE, CURVATURE_RANGE, JITTER_RANGE, LOOP_RANGE)

_GLYPH_SALT = 0x5EED
_MIN_SKELETON = 5.5


@dataclass(frozen=True)
class WriterStyle:
    slant: float
    thickness: float
    curvature: float
    jitter: float
    loop_tendency: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.slant, self.thickness, self.curvature, self.jitter, self.loop_tendency])


def make_writer_style(writer_id: int, corpus_seed: int) -> WriterStyle:
    """Style for one writer, taken from a scrambled Halton sequence so writers spread evenly."""
    if writer_id < 0:
        raise ParameterError("writer id must be non-negative")
    sampler = qmc.Halton(d=len(_RANGES), scramble=True, seed=np.random.default_rng(corpus_seed))
    if writer_id:
        sampler.fast_forward(writer_id)
    u = sampler.random(1)[0]
    vals = [lo + (hi - lo) * float(x) for x, (lo, hi) in zip(u, _RANGES)]
    return WriterStyle(*vals)


def _stroke(rng) -> np.ndarray:
    """One skeleton stroke: a down/up zigzag, a near-vertical stem, or a free curve.

    Most strokes run close to vertical, like the down-strokes of real script,
    so a writer's slant shows up as a shift of the dominant stroke angle.
    """
    kind = rng.random()
    if kind < 0.45:
        n_pts = int(rng.integers(3, 6))
        top, bottom = rng.uniform(0.35, 0.8), rng.uniform(-0.8, -0.35)
        x = rng.uniform(-0.75, 0.15)
        ys = [top, bottom] if rng.random() < 0.5 else [bottom, top]
        pts = []
        for i in range(n_pts):
            pts.append((x, ys[i % 2] + rng.normal(0, 0.08)))
            x += rng.uniform(0.15, 0.35)
        return np.clip(np.array(pts), -0.9, 0.9)
    if kind < 0.75:
        x = rng.uniform(-0.6, 0.6)
        top, bottom = rng.uniform(0.3, 0.85), rng.uniform(-0.85, -0.3)
        mid = (top + bottom) / 2
        return np.array([(x + rng.normal(0, 0.05), top), (x + rng.normal(0, 0.08), mid),
                         (x + rng.normal(0, 0.05), bottom)])
    n_pts = int(rng.integers(3, 6))
    pts = [rng.uniform(-0.8, 0.8, size=2)]
    heading = rng.uniform(0, 2 * math.pi)
    for _ in range(n_pts - 1):
        heading += rng.normal(0, 1.0)
        step = rng.uniform(0.35, 0.8)
        pts.append(np.clip(pts[-1] + step * np.array([math.cos(heading), math.sin(heading)]), -0.9, 0.9))
    return np.array(pts)


def glyph_strokes(glyph_id: int, vocabulary: int) -> list[np.ndarray]:
    """Control points of the glyph's strokes in the unit box ``[-1, 1]^2`` (y up).

    Strokes are added until there are at least three and their total length
    reaches ``_MIN_SKELETON``, which keeps thin writers above the ink floor.
    """
    g = int(glyph_id) % vocabulary
    rng = np.random.default_rng([_GLYPH_SALT, g])
    strokes: list[np.ndarray] = []
    total = 0.0
    while len(strokes) < 3 or total < _MIN_SKELETON:
        stroke = _stroke(rng)
        strokes.append(stroke)
        total += float(np.hypot(*np.diff(stroke, axis=0).T).sum())
    return strokes


def _smooth(points: np.ndarray, per_segment: int = 12) -> np.ndarray:
    """Catmull-Rom interpolation through the control points."""
    p = np.vstack([points[0], points, points[-1]])
    t = np.linspace(0, 1, per_segment, endpoint=False)[:, None]
    out = []
    for i in range(1, len(p) - 2):
        p0, p1, p2, p3 = p[i - 1], p[i], p[i + 1], p[i + 2]
        out.append(
            0.5 * ((2 * p1) + (-p0 + p2) * t + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t ** 2
                   + (-p0 + 3 * p1 - 3 * p2 + p3) * t ** 3)
        )
    out.append(points[-1:])
    return np.vstack(out)


def _bend(curve: np.ndarray, curvature: float) -> np.ndarray:
    """Bow the curve sideways by ``curvature`` times its chord length."""
    chord = curve[-1] - curve[0]
    length = float(np.hypot(*chord))
    if length < 1e-9:
        return curve
    normal = np.array([-chord[1], chord[0]]) / length
    s = np.linspace(0, 1, len(curve))[:, None]
    return curve + curvature * length * np.sin(np.pi * s) * normal


def _loop(at: np.ndarray, direction: np.ndarray, radius: float = 0.13) -> np.ndarray:
    ang = math.atan2(direction[1], direction[0]) + math.pi / 2
    centre = at + radius * np.array([math.cos(ang), math.sin(ang)])
    theta = np.linspace(ang + math.pi, ang + 3 * math.pi, 24)
    return centre + radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)


_SUPER = 4


def render_patch(style: WriterStyle, glyph_id: int, instance_seed: int, vocabulary: int = 100) -> np.ndarray:
    """Render one 64x64 gray patch (0 = ink, 255 = paper).

    Strokes are drawn at 4x resolution and box-downsampled, which gives
    anti-aliased edges and quarter-pixel control over stroke width.
    """
    rng = np.random.default_rng(instance_seed)
    loop_rng = np.random.default_rng([_GLYPH_SALT, int(glyph_id) % vocabulary, 1])
    shear = math.tan(math.radians(style.slant))
    scale = 22.0
    jitter = style.jitter / scale
    shift = rng.normal(0, style.jitter, size=2)
    width = max(1, int(round(_SUPER * style.thickness)))

    canvas = Image.new("L", (SIZE * _SUPER, SIZE * _SUPER), 0)
    draw = ImageDraw.Draw(canvas)
    for stroke in glyph_strokes(glyph_id, vocabulary):
        pts = stroke + rng.normal(0, jitter, size=stroke.shape) if jitter > 0 else stroke
        curve = _bend(_smooth(pts), style.curvature)
        if loop_rng.random() < style.loop_tendency:
            head = _loop(curve[0], curve[min(3, len(curve) - 1)] - curve[0])
            curve = np.vstack([head, curve])
        xy = curve.copy()
        xy[:, 0] += shear * xy[:, 1]
        # to pixel coordinates, y down
        pix = np.stack([SIZE / 2 + scale * xy[:, 0], SIZE / 2 - scale * xy[:, 1]], axis=1) + shift
        pix = np.round(pix * _SUPER, 2)
        draw.line([tuple(p) for p in pix.tolist()], fill=255, width=width, joint="curve")
        r = width / 2
        for x, y in (pix[0], pix[-1]):
            draw.ellipse((x - r, y - r, x + r, y + r), fill=255)
    cover = np.asarray(canvas, dtype=np.float64).reshape(SIZE, _SUPER, SIZE, _SUPER).mean(axis=(1, 3))
    return np.round(255.0 - cover).astype(np.uint8)


def ink_fraction(patch: np.ndarray) -> float:
    return float((np.asarray(patch) < 128).mean())


@dataclass(frozen=True)
class SynthCorpusSpec:
    num_writers: int = 10
    patches_per_writer: int = 100
    vocabulary: int = 100
    seed: int = 0
    splits: tuple[float, float, float] = (0.6, 0.1, 0.3)

    def __post_init__(self):
        if self.num_writers < 1 or self.patches_per_writer < 1:
            raise ParameterError("need at least one writer and one patch per writer")
        if len(self.splits) != 3 or any(f < 0 for f in self.splits) or not math.isclose(sum(self.splits), 1.0):
            raise ParameterError(f"split fractions must be three non-negatives summing to 1, got {self.splits}")
        if self.vocabulary < 3:
            raise ParameterError("vocabulary must hold at least one glyph per split")


def _counts(total: int, fractions) -> list[int]:
    counts = [int(round(total * f)) for f in fractions[:-1]]
    counts.append(total - sum(counts))
    return counts


def split_glyphs(spec: SynthCorpusSpec) -> dict[str, list[int]]:
    """Disjoint glyph-id sets per split."""
    perm = np.random.default_rng(derive_seed(spec.seed, 1)).permutation(spec.vocabulary)
    sizes = [max(1, c) for c in _counts(spec.vocabulary, spec.splits)]
    out, start = {}, 0
    for name, size in zip(SPLITS, sizes):
        out[name] = sorted(int(g) for g in perm[start:start + size])
        start += size
    return out


def writer_name(idx: int) -> str:
    return f"w{idx:03d}"


def corpus_plan(spec: SynthCorpusSpec):
    """Yield ``(split, writer_idx, glyph_id, instance)`` for every patch, in a fixed order."""
    glyphs = split_glyphs(spec)
    per_split = _counts(spec.patches_per_writer, spec.splits)
    for w in range(spec.num_writers):
        rng = np.random.default_rng(derive_seed(spec.seed, 2, w))
        for name, count in zip(SPLITS, per_split):
            pool = glyphs[name]
            order = rng.permutation(len(pool))
            for j in range(count):
                yield name, w, pool[order[j % len(pool)]], j // len(pool)


def generate_corpus(spec: SynthCorpusSpec, out_dir) -> dict[str, int]:
    """Write ``<out>/<split>/*.pgm`` plus ``<out>/<split>/manifest.tsv``; returns patch counts per split."""
    out_dir = Path(out_dir)
    try:
        for name in SPLITS:
            (out_dir / name).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create corpus directory {out_dir}: {exc}") from exc
    styles = [make_writer_style(w, spec.seed) for w in range(spec.num_writers)]
    records: dict[str, list[PatchRecord]] = {name: [] for name in SPLITS}
    for name, w, glyph, inst in corpus_plan(spec):
        seed = derive_seed(spec.seed, 3, w, glyph, inst)
        patch = render_patch(styles[w], glyph, seed, spec.vocabulary)
        writer = writer_name(w)
        fname = f"{writer}_g{glyph:04d}_i{inst}_patch0.pgm"
        write_pgm(out_dir / name / fname, patch)
        records[name].append(PatchRecord(fname, SIZE // 2, SIZE // 2, writer))
    for name in SPLITS:
        write_manifest(out_dir / name / "manifest.tsv", records[name])
    return {name: len(records[name]) for name in SPLITS}


def render_corpus_arrays(spec: SynthCorpusSpec) -> dict[str, dict[str, np.ndarray]]:
    """In-memory twin of :func:`generate_corpus`: split -> writer -> ``(N, 1, 64, 64)`` tensors."""
    from .preprocess import normalize_patch

    styles = [make_writer_style(w, spec.seed) for w in range(spec.num_writers)]
    out: dict[str, dict[str, list]] = {name: {} for name in SPLITS}
    for name, w, glyph, inst in corpus_plan(spec):
        seed = derive_seed(spec.seed, 3, w, glyph, inst)
        patch = render_patch(styles[w], glyph, seed, spec.vocabulary)
        out[name].setdefault(writer_name(w), []).append(normalize_patch(patch))
    return {name: {w: np.stack(v) for w, v in sorted(d.items())} for name, d in out.items()}
