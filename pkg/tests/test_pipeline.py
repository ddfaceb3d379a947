import numpy as np
import pytest

from tntlab import nn
from tntlab.errors import EmptyEvidenceError, EmptyVolumeError, LabelError, TrainingDivergenceError
from tntlab.events import EventStream
from tntlab.geometry import Landmark, apply_shear, translate
from tntlab.pipeline import (
    BASELINE,
    EVENT_CENTROID,
    TNT,
    TNT_REGRESS,
    LandmarkEstimator,
    PipelineConfig,
    estimate_landmark,
    evaluate,
    heatmap_landmark,
    init_model,
    landmark_loss_and_grad,
    predict_labels,
    shift_input,
    soft_centroid,
    soft_centroid_backward,
    train,
    transform_stage,
)
from tntlab.voxel import VolumeSpec, build_volume

SMALL = dict(bins=5, width=16, height=16, hidden=16, batch_size=16)


def raw_stream(rng, n, cx, cy, spread=2.0, W=16, H=16, duration=1e5):
    t = np.sort(rng.uniform(0, duration, n))
    t[0], t[-1] = 0.0, duration
    return EventStream(cx + rng.uniform(-spread, spread, n), cy + rng.uniform(-spread, spread, n), t,
                       rng.choice(np.array([-1, 1], np.int8), n), W, H)


def toy_samples(seed, n_per_class=12):
    # class 0 lives on the left, class 1 on the right
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_per_class):
        out.append((raw_stream(rng, 40, 4, 8), 0))
        out.append((raw_stream(rng, 40, 11, 8), 1))
    return out


def test_heatmap_landmark_examples():
    h = np.full((10, 8), -1e3)
    h[5, 3] = 0
    lm = heatmap_landmark(h)
    assert lm.lx == pytest.approx(3) and lm.ly == pytest.approx(5)
    lm = heatmap_landmark(np.zeros((10, 8)))
    assert lm.lx == pytest.approx(3.5) and lm.ly == pytest.approx(4.5)


def test_image_center_landmark():
    vol = build_volume(EventStream.from_events([(1, 1, 1, 1)], 34, 34), VolumeSpec(9, 34, 34))
    assert estimate_landmark(vol, LandmarkEstimator()) == Landmark(16.5, 16.5)


def test_event_centroid_landmark():
    spec = VolumeSpec(9, 16, 16)
    vol = build_volume(EventStream.from_events([(2, 3, 1, 1), (6, 5, 4, -1)], 16, 16), spec)
    lm = estimate_landmark(vol, LandmarkEstimator(EVENT_CENTROID))
    assert (lm.lx, lm.ly) == (4.0, 4.0)
    empty = build_volume(EventStream.from_events([], 16, 16), spec)
    with pytest.raises(EmptyEvidenceError):
        estimate_landmark(empty, LandmarkEstimator(EVENT_CENTROID))


def test_soft_centroid_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(6, 7))
    dl = np.array([0.7, -1.3])
    lm, prob = soft_centroid(h)
    g = soft_centroid_backward(prob, lm, dl)
    eps = 1e-6
    for idx in [(0, 0), (2, 5), (5, 6)]:
        hp, hm = h.copy(), h.copy()
        hp[idx] += eps
        hm[idx] -= eps
        fd = (dl @ soft_centroid(hp)[0] - dl @ soft_centroid(hm)[0]) / (2 * eps)
        assert g[idx] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_baseline_transform_is_plain_voxelization():
    cfg = PipelineConfig(variant=BASELINE, **SMALL)
    s = raw_stream(np.random.default_rng(1), 30, 8, 8, duration=4.0)
    np.testing.assert_array_equal(transform_stage(s, (8, 8), cfg).data, build_volume(s, cfg.volume_spec).data)


def test_sheared_point_at_landmark_maps_to_one_position():
    cfg = PipelineConfig(variant=TNT, **SMALL)
    t = np.linspace(1, 4, 7)
    point = EventStream(np.full(7, 5.0), np.full(7, 6.0), t, np.ones(7, np.int8), 16, 16)
    vol = transform_stage(apply_shear(point, (1.0, 0.0)), (5, 6), cfg).data
    # TNT maps the sheared point to v = (1, 0), recentred to (W/2 + 1, H/2)
    assert np.count_nonzero(vol.sum(axis=0)) == 1 and vol.sum(axis=0)[8, 9] == 7


def test_shear_becomes_one_cell_shift():
    cfg = PipelineConfig(variant=TNT, **SMALL)
    s = raw_stream(np.random.default_rng(2), 80, 8, 8, duration=4.0)
    a = transform_stage(s, (8, 8), cfg).data
    b = transform_stage(apply_shear(s, (1.0, 0.0)), (8, 8), cfg).data
    np.testing.assert_allclose(b[:, 2:-2, 3:-2], a[:, 2:-2, 2:-3], atol=1e-6)


def test_all_events_clipped_is_an_error():
    cfg = PipelineConfig(variant=TNT, **SMALL)
    far = EventStream.from_events([(500, 0, 1, 1), (600, 0, 2, 1)], 16, 16)
    with pytest.raises(EmptyVolumeError):
        transform_stage(far, (0, 0), cfg)


def test_shift_input():
    x = np.arange(16.0).reshape(1, 4, 4)
    out = shift_input(x, 1, -1)
    assert out[0, 0, 1] == x[0, 1, 0] and out[0, 3].sum() == 0 and out[0, :, 0].sum() == 0


def test_toy_task_is_learned():
    cfg = PipelineConfig(variant=BASELINE, iterations=150, lr=0.05, **SMALL)
    data = toy_samples(3)
    model, log = train(data, cfg, seed=0)
    assert len(log) == 150 and set(log[0]) == {"iteration", "loss", "train_acc"}
    assert evaluate(model, data).accuracy == 1.0


def test_zero_learning_rate_keeps_parameters():
    cfg = PipelineConfig(variant=TNT, iterations=5, lr=0.0, **SMALL)
    model, log = train(toy_samples(4), cfg, seed=1)
    fresh = init_model(cfg, 2, seed=1)
    for a, b in zip(model.all_params(), fresh.all_params()):
        np.testing.assert_array_equal(a.weights, b.weights)
    cached = [r["loss"] for r in train(toy_samples(4), PipelineConfig(variant=TNT, iterations=4, lr=0.0,
                                                                      **{**SMALL, "batch_size": 24}), seed=1)[1]]
    assert max(cached) - min(cached) <= 1e-12


@pytest.mark.parametrize("variant", [BASELINE, TNT, TNT_REGRESS])
def test_training_is_bitwise_deterministic(variant):
    cfg = PipelineConfig(variant=variant, iterations=4, input_shift_px=1, augment_px=1, **SMALL)
    a, _ = train(toy_samples(5), cfg, seed=7)
    b, _ = train(toy_samples(5), cfg, seed=7)
    assert nn.encode_params(a.all_params()) == nn.encode_params(b.all_params())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_iteration():
    cfg = PipelineConfig(variant=BASELINE, iterations=50, lr=1e6, **SMALL)
    with pytest.raises(TrainingDivergenceError) as info:
        train(toy_samples(6), cfg, seed=0)
    assert info.value.iteration >= 0


def test_untrained_model_is_at_chance():
    K = 4
    cfg = PipelineConfig(variant=BASELINE, **SMALL)
    rng = np.random.default_rng(8)
    data = [(raw_stream(rng, 20, *rng.uniform(4, 12, 2)), i % K) for i in range(500)]
    res = evaluate(init_model(cfg, K, seed=3), data)
    assert abs(res.accuracy - 1 / K) <= 0.1
    assert res.accuracy == pytest.approx(np.trace(res.confusion) / res.n)


def test_evaluation_ignores_order_and_checks_labels():
    cfg = PipelineConfig(variant=TNT, **SMALL)
    model = init_model(cfg, 2, seed=0)
    data = toy_samples(9, 5)
    before = nn.encode_params(model.all_params())
    acc = evaluate(model, data).accuracy
    assert evaluate(model, data[::-1]).accuracy == acc
    assert nn.encode_params(model.all_params()) == before
    with pytest.raises(LabelError):
        evaluate(model, [(data[0][0], 2)])
    with pytest.raises(LabelError):
        train([(data[0][0], 0), (data[1][0], 0)], cfg)


def test_joint_translation_does_not_change_prediction():
    cfg = PipelineConfig(variant=TNT, **SMALL)
    model = init_model(cfg, 3, seed=2)
    s = raw_stream(np.random.default_rng(10), 60, 7.3, 8.1, duration=4.0)
    a = transform_stage(s, (7.3, 8.1), cfg).data
    b = transform_stage(translate(s, (3, -2)), (10.3, 6.1), cfg).data
    assert np.abs(a - b).max() <= 1e-6
    la, _ = nn.forward(model.classifier, a.reshape(1, -1, 16, 16))
    lb, _ = nn.forward(model.classifier, b.reshape(1, -1, 16, 16))
    assert np.argmax(la) == np.argmax(lb)


def test_landmark_gradient_matches_finite_differences():
    cfg = PipelineConfig(variant=TNT_REGRESS, **SMALL)
    model = init_model(cfg, 3, seed=4)
    rng = np.random.default_rng(11)
    s = raw_stream(rng, 120, 8, 8, spread=5, duration=4.0)
    lm = np.array([7.71, 8.23])
    _, grad = landmark_loss_and_grad(s, 1, lm, model.classifier, cfg)
    h = 1e-3
    for axis in range(2):
        d = np.zeros(2)
        d[axis] = h
        fp, _ = landmark_loss_and_grad(s, 1, lm + d, model.classifier, cfg)
        fm, _ = landmark_loss_and_grad(s, 1, lm - d, model.classifier, cfg)
        fd = (fp - fm) / (2 * h)
        assert abs(grad[axis] - fd) <= 0.05 * abs(fd)


def test_regress_variant_predicts():
    cfg = PipelineConfig(variant=TNT_REGRESS, iterations=2, **SMALL)
    model, _ = train(toy_samples(12, 3), cfg, seed=0)
    assert model.regressor is not None
    assert predict_labels(model, [s for s, _ in toy_samples(13, 2)]).shape == (4,)
