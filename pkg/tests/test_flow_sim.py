import json
import math

import numpy as np
import pytest

from oracles import dense_time_counts, event_counts, step_edge
from tntlab.errors import DatasetDegeneracyError, RunawayTrajectoryError
from tntlab.flow_sim import (
    TEST,
    TRAIN,
    DirectionSweep,
    Glyph,
    IntensityImage,
    SimConfig,
    generate_direction_sweep,
    read_dataset,
    render_glyph_dataset,
    sample_bilinear,
    simulate_constant_flow,
    write_dataset,
)
from tntlab.geometry import FlowVector
from tntlab.glyphs import (
    pad_to,
    procedural_glyphs,
    read_idx_images,
    read_idx_labels,
    read_pgm,
    write_idx_images,
    write_pgm,
)


def sim(pixels, vx, vy, **kw):
    return simulate_constant_flow(IntensityImage(pixels), SimConfig(flow=FlowVector(vx, vy), **kw))


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(threshold=0)
    with pytest.raises(ValueError):
        SimConfig(substeps_per_pixel=1)
    with pytest.raises(ValueError):
        IntensityImage(np.full((3, 3), -1.0))
    with pytest.raises(ValueError):
        DirectionSweep(0)


def test_bilinear_sampling():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert sample_bilinear(img, np.array([0.5]), np.array([0.5]))[0] == 1.5
    assert sample_bilinear(img, np.array([-3.0]), np.array([9.0]))[0] == 2.0


def test_uniform_image_is_silent():
    assert len(sim(np.full((10, 10), 0.5), 40, -25)) == 0


def test_edge_parallel_to_flow_is_silent():
    assert len(sim(step_edge(16, 8, axis=0), 60, 0)) == 0
    assert len(sim(step_edge(16, 8, axis=1), 0, 60)) == 0


def test_step_edge_event_count_per_crossing():
    s = sim(step_edge(16, 8), 60, 0)
    pos, neg = event_counts(s, 16, 16)
    per_crossing = math.floor(math.log(1.0 / 1e-3) / 0.2)
    assert pos.sum() == 0
    np.testing.assert_array_equal(neg[:, 8:14], per_crossing)
    assert neg[:, :8].sum() == 0 and neg[:, 14:].sum() == 0


@pytest.mark.parametrize("vx, vy", [(60, 0), (-45, 20), (30, 50)])
def test_counts_match_dense_time_oracle(vx, vy):
    img = step_edge(16, 7)
    s = sim(img, vx, vy)
    pos, neg = dense_time_counts(img, vx, vy, 0.1, 0.2)
    got_pos, got_neg = event_counts(s, 16, 16)
    np.testing.assert_array_equal(got_pos, pos)
    np.testing.assert_array_equal(got_neg, neg)


@pytest.mark.parametrize("C", [0.2, 0.5])
def test_counts_scale_with_edge_length_and_threshold(C):
    full = sim(step_edge(16, 7), 60, 0, threshold=C)
    half_img = step_edge(16, 7)
    half_img[8:, :] = 1.0  # edge only on the top half
    half = sim(half_img, 60, 0, threshold=C)
    assert abs(len(half) / len(full) - 0.5) <= 0.1 * 0.5
    pos, neg = dense_time_counts(step_edge(16, 7), 60, 0, 0.1, C)
    assert abs(len(full) - (pos.sum() + neg.sum())) <= 0.1 * len(full)


def test_threshold_inverse_scaling():
    a = len(sim(step_edge(16, 7), 60, 0, threshold=0.1))
    b = len(sim(step_edge(16, 7), 60, 0, threshold=0.2))
    assert abs(a / b - 2.0) <= 0.1 * 2.0


def test_flow_reversal_flips_polarity():
    # travelling 6 px right over an edge at 6, vs 6 px left starting from the end position
    fwd = sim(step_edge(16, 6), 60, 0)
    back = sim(step_edge(16, 12), -60, 0)
    fp, fn = event_counts(fwd, 16, 16)
    bp, bn = event_counts(back, 16, 16)
    assert len(fwd) > 0
    np.testing.assert_array_equal(fp, bn)
    np.testing.assert_array_equal(fn, bp)


def test_per_pixel_timestamps_strictly_increase():
    s = sim(procedural_glyphs(2, 1, 0, seed=1)[0].image.pixels, 80, 30)
    key = s.y * 1000 + s.x
    for k in np.unique(key):
        ts = s.t[key == k]
        assert np.all(np.diff(ts) > 0)
    assert np.all(np.diff(s.t) >= 0)
    assert s.t.max() <= 0.1 * 1e6


def test_runaway_trajectory():
    with pytest.raises(RunawayTrajectoryError):
        sim(np.ones((10, 10)), 1e4, 0)


def test_direction_sweep_angles_and_speeds():
    sweep = DirectionSweep(30, 80.0)
    assert sweep.angles_deg()[:3] == [0.0, 12.0, 24.0] and sweep.angles_deg()[-1] == 348.0
    for f in sweep.flows():
        assert abs(f.magnitude - 80.0) <= 1e-12
    assert DirectionSweep(1).angles_deg() == [0.0]


def test_generate_direction_sweep():
    out = generate_direction_sweep(IntensityImage(step_edge(12, 6)), SimConfig(), DirectionSweep(4, 40))
    assert len(out) == 4
    assert out[0][0] == FlowVector(40.0, 0.0)
    assert len(out[1][1]) == 0  # 90 degrees: flow along the edge


def small_glyphs():
    return procedural_glyphs(n_classes=3, n_train=1, n_test=1, seed=2, size=20)


def test_dataset_cardinality_and_splits():
    ds = render_glyph_dataset(small_glyphs(), SimConfig(), DirectionSweep(5, 40))
    assert len(ds.items) == 6 * 5
    assert ds.n_classes == 3
    train_1 = ds.select(TRAIN, "1")
    assert len(train_1) == 3 and {it.direction_index for it in train_1} == {0}
    assert len(ds.select(TEST, "all")) == 15
    assert ds.split_metadata() == {"1": [0], "all": [0, 1, 2, 3, 4]}


def test_dataset_needs_two_classes():
    g = [Glyph(IntensityImage(step_edge(10, 5)), 0)]
    with pytest.raises(DatasetDegeneracyError):
        render_glyph_dataset(g, SimConfig(), DirectionSweep(2, 40))


def test_dataset_files_are_deterministic(tmp_path):
    files = []
    for name in ("a", "b"):
        ds = render_glyph_dataset(small_glyphs(), SimConfig(), DirectionSweep(3, 40), seed=2)
        write_dataset(ds, tmp_path / name)
        files.append({p.relative_to(tmp_path / name): p.read_bytes() for p in (tmp_path / name).rglob("*.*")})
    assert files[0] == files[1]
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert set(manifest["entries"][0]) >= {"path", "label", "direction_deg", "split"}


def test_parallel_rendering_matches_serial():
    a = render_glyph_dataset(small_glyphs(), SimConfig(), DirectionSweep(3, 40), jobs=1)
    b = render_glyph_dataset(small_glyphs(), SimConfig(), DirectionSweep(3, 40), jobs=2)
    assert all(x.stream == y.stream for x, y in zip(a.items, b.items))


def test_dataset_round_trip(tmp_path):
    ds = render_glyph_dataset(small_glyphs(), SimConfig(), DirectionSweep(2, 40))
    write_dataset(ds, tmp_path)
    back = read_dataset(tmp_path)
    assert back.n_classes == ds.n_classes and back.n_directions == 2
    for a, b in zip(ds.items, back.items):
        assert a.stream == b.stream and a.label == b.label and a.role == b.role


def test_pgm_and_idx_round_trip(tmp_path):
    img = IntensityImage(np.round(np.random.default_rng(0).uniform(0, 1, (7, 5)) * 255) / 255)
    write_pgm(img, tmp_path / "g.pgm")
    np.testing.assert_allclose(read_pgm(tmp_path / "g.pgm").pixels, img.pixels)
    write_idx_images([img, img], tmp_path / "g.idx")
    back = read_idx_images(tmp_path / "g.idx")
    assert len(back) == 2
    np.testing.assert_allclose(back[1].pixels, img.pixels)
    labels = tmp_path / "l.idx"
    labels.write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 3, 4, 1, 9]))
    np.testing.assert_array_equal(read_idx_labels(labels), [4, 1, 9])


def test_pad_to_centers_image():
    padded = pad_to(IntensityImage(np.ones((28, 28))), 34)
    assert padded.pixels.shape == (34, 34) and padded.pixels[3:31, 3:31].all() and padded.pixels.sum() == 784


def test_procedural_glyphs_are_reproducible():
    a = procedural_glyphs(4, 2, 1, seed=7)
    b = procedural_glyphs(4, 2, 1, seed=7)
    assert len(a) == 12
    assert all(np.array_equal(x.image.pixels, y.image.pixels) for x, y in zip(a, b))
    assert [g.role for g in a].count(TEST) == 4
