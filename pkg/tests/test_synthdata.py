import hashlib
from dataclasses import replace

import numpy as np
import pytest

from scriptor_id.corpus import read_manifest
from scriptor_id.errors import ParameterError
from scriptor_id.synthdata import (
    CURVATURE_RANGE,
    JITTER_RANGE,
    LOOP_RANGE,
    SLANT_RANGE,
    THICKNESS_RANGE,
    SynthCorpusSpec,
    WriterStyle,
    generate_corpus,
    ink_fraction,
    make_writer_style,
    render_corpus_arrays,
    render_patch,
    split_glyphs,
)


def test_style_is_deterministic():
    assert make_writer_style(3, 11) == make_writer_style(3, 11)
    assert make_writer_style(3, 11) != make_writer_style(3, 12)


def test_first_ten_styles_distinct():
    vecs = [make_writer_style(i, 0).as_vector() for i in range(10)]
    for i in range(10):
        for j in range(i + 1, 10):
            assert not np.array_equal(vecs[i], vecs[j])


def test_style_fields_in_range():
    ranges = (SLANT_RANGE, THICKNESS_RANGE, CURVATURE_RANGE, JITTER_RANGE, LOOP_RANGE)
    assert SLANT_RANGE == (-30.0, 30.0) and THICKNESS_RANGE == (1.0, 4.0) and LOOP_RANGE == (0.0, 1.0)
    for i in range(1000):
        v = make_writer_style(i, 5).as_vector()
        for x, (lo, hi) in zip(v, ranges):
            assert lo <= x <= hi


def test_negative_writer_id():
    with pytest.raises(ParameterError):
        make_writer_style(-1, 0)


def test_zero_jitter_renders_identical():
    style = replace(make_writer_style(2, 0), jitter=0.0)
    a = render_patch(style, 17, instance_seed=1)
    b = render_patch(style, 17, instance_seed=2)
    assert a.tobytes() == b.tobytes()


def test_render_format_and_glyph_wrap():
    style = make_writer_style(0, 0)
    p = render_patch(style, 5, 9)
    assert p.shape == (64, 64) and p.dtype == np.uint8
    assert render_patch(style, 105, 9).tobytes() == p.tobytes()


def test_ink_fraction_bounds():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        style = make_writer_style(int(rng.integers(0, 500)), int(rng.integers(0, 50)))
        frac = ink_fraction(render_patch(style, int(rng.integers(0, 100)), int(rng.integers(0, 2 ** 31))))
        assert 0.02 <= frac <= 0.60


def test_extreme_styles_differ():
    thin = WriterStyle(slant=-30.0, thickness=1.0, curvature=-0.35, jitter=0.0, loop_tendency=0.0)
    bold = WriterStyle(slant=30.0, thickness=4.0, curvature=0.35, jitter=0.0, loop_tendency=1.0)
    for glyph in range(10):
        a = render_patch(thin, glyph, 0).astype(float)
        b = render_patch(bold, glyph, 0).astype(float)
        assert np.abs(a - b).mean() > 10


def test_split_fractions_validated():
    with pytest.raises(ParameterError):
        SynthCorpusSpec(splits=(0.5, 0.1, 0.1))
    with pytest.raises(ParameterError):
        SynthCorpusSpec(num_writers=0)


def test_glyph_splits_disjoint():
    for seed in range(5):
        g = split_glyphs(SynthCorpusSpec(seed=seed))
        assert not set(g["train"]) & set(g["test"])
        assert not set(g["train"]) & set(g["val"])
        assert not set(g["val"]) & set(g["test"])
        assert sorted(g["train"] + g["val"] + g["test"]) == list(range(100))


def _digest(root):
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def test_generate_corpus_counts_and_determinism(tmp_path):
    spec = SynthCorpusSpec(num_writers=10, patches_per_writer=100, seed=4)
    counts = generate_corpus(spec, tmp_path / "a")
    assert sum(counts.values()) == 1000
    files = [p for p in (tmp_path / "a").rglob("*.pgm")]
    assert len(files) == 1000
    rows = {s: read_manifest(tmp_path / "a" / s / "manifest.tsv") for s in ("train", "val", "test")}
    assert sum(len(r) for r in rows.values()) == 1000
    glyphs = {s: {r.file.split("_")[1] for r in rs} for s, rs in rows.items()}
    assert not glyphs["train"] & glyphs["test"]
    generate_corpus(spec, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_in_memory_twin_matches_disk(tmp_path):
    from scriptor_id.corpus import load_patch_sets

    spec = SynthCorpusSpec(num_writers=3, patches_per_writer=10, seed=1)
    generate_corpus(spec, tmp_path)
    mem = render_corpus_arrays(spec)
    disk = load_patch_sets(tmp_path / "test" / "manifest.tsv")
    assert sorted(disk) == sorted(mem["test"])
    for w in disk:
        np.testing.assert_array_equal(disk[w], mem["test"][w])


def test_nearest_centroid_floor():
    # raw-pixel nearest centroid must beat chance without solving the task
    data = render_corpus_arrays(SynthCorpusSpec(num_writers=10, patches_per_writer=100, seed=0))
    writers = sorted(data["train"])
    centroids = np.stack([data["train"][w].reshape(len(data["train"][w]), -1).mean(0) for w in writers])
    hit = total = 0
    for i, w in enumerate(writers):
        x = data["test"][w].reshape(len(data["test"][w]), -1)
        pred = np.argmin(((x[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
        hit += int((pred == i).sum())
        total += len(x)
    assert 0.1 < hit / total < 1.0
