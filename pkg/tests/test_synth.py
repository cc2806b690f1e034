import json

import numpy as np
import pytest

from flowsteer.synth import (
    ScreentonePattern,
    build_dataset,
    export_dataset,
    extract_line_art,
    gen_base_image,
    make_sample,
    read_pgm,
    render_text_glyphs,
    write_pgm,
)
from flowsteer.velocity import Prompt

# frozen from a run over seeds 0..999 at size 32
BASE_MEAN_1000 = 0.7236654785156249
MASK_COVERAGE_MIN_1000 = 0.0029296875
MASK_COVERAGE_MAX_1000 = 0.1767578125


def test_base_image_deterministic_and_in_range():
    a, b = gen_base_image(0), gen_base_image(0)
    assert np.array_equal(a, b) and a.shape == (1024,)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert not np.array_equal(a, gen_base_image(1))


def test_base_image_mean_over_1000_seeds():
    m = float(np.mean([gen_base_image(s).mean() for s in range(1000)]))
    assert m == pytest.approx(BASE_MEAN_1000, abs=1e-12)
    assert 0.2 < m < 0.8


def test_glyph_masks_over_1000_seeds():
    cov = []
    for s in range(1000):
        base = gen_base_image(s)
        x, mask = render_text_glyphs(base, s)
        assert mask.any()
        assert np.array_equal(x[mask == 0], base[mask == 0])
        assert np.all(np.abs(x - base)[mask == 1] > 1e-6)
        cov.append(mask.mean())
    assert max(cov) < 0.4
    assert min(cov) == MASK_COVERAGE_MIN_1000 and max(cov) == MASK_COVERAGE_MAX_1000


def test_glyphs_deterministic():
    base = gen_base_image(5)
    a, ma = render_text_glyphs(base, 5)
    b, mb = render_text_glyphs(base, 5)
    assert np.array_equal(a, b) and np.array_equal(ma, mb)


def test_line_art_constant_image():
    assert not extract_line_art(np.full(256, 0.4)).any()


def test_line_art_vertical_step():
    img = np.zeros((16, 16))
    img[:, 8:] = 1.0
    edges = extract_line_art(img.ravel()).reshape(16, 16)
    cols = np.nonzero(edges.any(axis=0))[0]
    assert set(cols) <= {7, 8} and edges[:, 7:9].any(axis=1).all()


def test_line_art_of_line_art_is_documented_not_idempotent():
    edges = extract_line_art(gen_base_image(3))
    again = extract_line_art(edges)
    assert again.shape == edges.shape  # edges of edges; no idempotence claim


def test_screentone_period_guard():
    with pytest.raises(ValueError):
        ScreentonePattern("hatch", 1, (0, 0), 0.5)
    for kind in ("halftone-dot", "hatch", "solid"):
        t = ScreentonePattern(kind, 4, (1, 2), 0.5, 2).render(12)
        assert t.shape == (12, 12) and t.min() >= 0 and t.max() <= 1


@pytest.mark.parametrize("task", ["text-removal", "screentone"])
def test_build_dataset_small(task):
    ds = build_dataset(10, task, 0)
    assert len(ds) == 10
    assert [s.split for s in ds] == ["train"] * 9 + ["eval"]
    for s in ds:
        for arr in (s.x_in, s.x_gt, s.mask):
            assert arr.min() >= 0 and arr.max() <= 1
        if task == "text-removal":
            assert np.array_equal(s.mask, (np.abs(s.x_in - s.x_gt) > 1e-6).astype(float))
            assert s.prompt == Prompt.EDIT_TEXT_REMOVAL
        else:
            assert s.prompt == Prompt.EDIT_SCREENTONE


def test_disjoint_seeds_give_distinct_images():
    a = build_dataset(20, "text-removal", 0)
    b = build_dataset(20, "text-removal", 1)
    for s in a:
        for t in b:
            assert np.max(np.abs(s.x_in - t.x_in)) > 0


def test_split_and_content_deterministic():
    a = build_dataset(30, "text-removal", 4)
    b = build_dataset(30, "text-removal", 4)
    assert [s.split for s in a] == [s.split for s in b]
    assert all(np.array_equal(s.x_in, t.x_in) for s, t in zip(a, b))
    assert sum(s.split == "eval" for s in a) == 3


def test_size_flag_range():
    assert make_sample(0, "text-removal", 64).x_in.shape == (4096,)
    with pytest.raises(ValueError):
        gen_base_image(0, 65)


def test_pgm_round_trip(tmp_path):
    img = np.round(np.random.default_rng(0).random(32 * 32) * 255) / 255
    write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n32 32\n255\n")
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_pgm_header_with_whitespace_like_pixels(tmp_path):
    img = np.zeros(16 * 16)
    img[:4] = np.array([9, 10, 13, 32]) / 255  # tab, newline, cr, space
    write_pgm(tmp_path / "w.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "w.pgm"), img)


def test_export_manifest(tmp_path):
    ds = build_dataset(5, "screentone", 2)
    path = export_dataset(ds, tmp_path, 2, "screentone")
    doc = json.loads(path.read_text())
    assert doc["n"] == 5 and doc["task"] == "screentone"
    for e in doc["samples"]:
        for key in ("x_in", "x_gt", "mask"):
            assert (tmp_path / e[key]).is_file()
    assert np.array_equal(read_pgm(tmp_path / doc["samples"][0]["x_gt"]),
                          np.round(ds[0].x_gt * 255) / 255)


@pytest.mark.parametrize("size", [11, 16, 64])
def test_masks_nonempty_at_other_sizes(size):
    for s in range(100):
        assert render_text_glyphs(gen_base_image(s, size), s)[1].any()
