import csv
import io
import math

import numpy as np
import pytest

from cosimnet import numerics as nx
from cosimnet import pipeline
from cosimnet.data import ImagePair, SynthConfig, generate_synthetic, split_dataset
from cosimnet.encoder import EncoderConfig, init_encoder
from cosimnet.errors import DivergenceError, InvalidArgument
from cosimnet.evalsuite import rms_contrast
from cosimnet.losses import COSINE, TCL, LossConfig, pixel_cross_entropy
from cosimnet.numerics import Tensor
from cosimnet.pipeline import (
    FCN_METRICS,
    InferenceConfig,
    RunHistory,
    TrainConfig,
    build_model,
    choose_thresholds,
    classifier_logits,
    contrast_analysis,
    epoch_order,
    export_features,
    infer,
    load_model,
    save_model,
    train,
)

CHANNELS = (4, 6, 8)


@pytest.fixture(scope="module")
def dataset():
    ds = generate_synthetic(SynthConfig(size=(16, 16), count=10, object_size=(4, 8), seed=1))
    return split_dataset(ds, 0.8, seed=1)


@pytest.fixture(scope="module")
def encoder():
    return init_encoder(EncoderConfig(stage_channels=CHANNELS, seed=2))


def quick(**kw):
    base = dict(epochs=2, batch_size=4, lr=0.05, lr_head=0.05, monitor_size=4, eval_thresholds=11)
    base.update(kw)
    return TrainConfig(**base)


def weights(model):
    return [p.value.data.copy() for p in model.params]


def test_zero_learning_rate_keeps_weights(dataset, encoder):
    res = train(encoder, dataset, quick(lr=0.0, lr_head=0.0))
    assert all(np.array_equal(a, b.value.data) for a, b in zip(weights(res.model), encoder.params))


def test_train_leaves_input_encoder_untouched(dataset, encoder):
    before = [p.value.data.copy() for p in encoder.params]
    train(encoder, dataset, quick(epochs=1))
    assert all(np.array_equal(a, p.value.data) for a, p in zip(before, encoder.params))


def test_tcl_at_zero_trains_like_contrastive(dataset, encoder):
    a = train(encoder, dataset, quick())
    b = train(encoder, dataset, quick(loss=LossConfig(loss_kind=TCL, tau=0.0)))
    assert np.allclose(a.history.losses(), b.history.losses(), rtol=0, atol=1e-12)
    for x, y in zip(weights(a.model), weights(b.model)):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)


def test_training_is_deterministic(dataset, encoder):
    a = train(encoder, dataset, quick(seed=3))
    b = train(encoder, dataset, quick(seed=3))
    assert a.history.to_csv() == b.history.to_csv()
    assert all(np.array_equal(x, y) for x, y in zip(weights(a.model), weights(b.model)))


def test_history_contents(dataset, encoder):
    res = train(encoder, dataset, quick(epochs=3))
    hist = res.history
    assert [r.epoch for r in hist.records] == [1, 2, 3]
    rec = hist.records[-1]
    assert len(rec.layer_losses) == len(rec.rms) == 3
    assert math.isfinite(rec.eval_f) and 0.0 <= rec.eval_f <= 1.0
    assert rec.total_loss == pytest.approx(sum(rec.layer_losses), abs=1e-12)


def test_history_csv_roundtrip(tmp_path, dataset, encoder):
    hist = train(encoder, dataset, quick()).history
    hist.to_csv(tmp_path / "h.csv")
    back = RunHistory.from_csv(tmp_path / "h.csv")
    assert back.to_csv() == hist.to_csv()


def test_empty_training_set_rejected(encoder):
    from cosimnet.data import Dataset
    with pytest.raises(InvalidArgument):
        train(encoder, Dataset([]), quick())


def test_divergence_names_epoch_and_batch(dataset, encoder, monkeypatch):
    monkeypatch.setattr(pipeline, "batch_loss", lambda *a: (Tensor(np.array(np.nan)), [0.0] * 3))
    with pytest.raises(DivergenceError, match="epoch 1, batch 1"):
        train(encoder, dataset, quick())


def test_epoch_order_is_seeded():
    assert np.array_equal(epoch_order(0, 1, 20), epoch_order(0, 1, 20))
    assert not np.array_equal(epoch_order(0, 1, 20), epoch_order(0, 2, 20))
    assert sorted(epoch_order(5, 3, 20)) == list(range(20))


def test_infer_identical_pair_gives_zero_map(encoder):
    model = build_model(encoder, LossConfig())
    img = np.random.default_rng(0).uniform(size=(3, 16, 16))
    res = infer(model, ImagePair(img, img))
    assert np.all(res.fused.values.data == 0.0)
    assert not res.prediction.changed.any()


def test_infer_maps_in_unit_range(dataset, encoder):
    model = build_model(encoder, LossConfig())
    res = infer(model, dataset.items[0].pair, InferenceConfig((0.2, 0.4, 0.6)))
    for cm in res.layer_maps + [res.fused]:
        assert cm.values.shape == (16, 16)
        assert cm.values.data.min() >= 0.0 and cm.values.data.max() <= 1.0
    expected = res.fused.values.data >= 0.4
    assert np.array_equal(res.prediction.changed, expected)


def test_infer_rejects_bad_size(encoder):
    model = build_model(encoder, LossConfig())
    img = np.zeros((3, 12, 16))
    with pytest.raises(InvalidArgument):
        infer(model, ImagePair(img, img))


def test_inference_config_validation():
    with pytest.raises(InvalidArgument):
        InferenceConfig((0.5, 1.5, 0.5))
    with pytest.raises(InvalidArgument):
        InferenceConfig(fusion="max")


def test_contrast_analysis_recomputes(dataset, encoder):
    res = train(encoder, dataset, quick(epochs=1))
    rep = contrast_analysis(res.history)
    assert len(rep.rows) == 3
    maps = res.history.monitor_maps[1]
    for level in range(3):
        assert abs(rep.value(1, level + 1, "euclidean") - rms_contrast(maps[level])) <= 1e-12
        assert rep.value(1, level + 1, "euclidean") == res.history.records[0].rms[level]


def test_export_features(dataset, encoder):
    model = build_model(encoder, LossConfig())
    items = dataset.items[:3]
    empty = export_features(model, items, 1, 0)
    assert empty.strip().split(",")[:5] == ["pair_id", "branch", "x", "y", "changed"]
    assert len(empty.strip().splitlines()) == 1
    a = export_features(model, items, 1, 5, seed=9)
    assert a == export_features(model, items, 1, 5, seed=9)
    rows = list(csv.reader(io.StringIO(a)))
    assert len(rows) - 1 == 3 * 5 * 2
    assert len(rows[0]) == 5 + CHANNELS[1]
    with pytest.raises(InvalidArgument):
        export_features(model, items, 3, 1)


def test_fcn_with_zero_lambda_matches_cross_entropy_trainer(dataset, encoder):
    cfg = quick(mode=FCN_METRICS, loss=LossConfig(lam=0.0), epochs=1)
    res = train(encoder, dataset, cfg)

    model = build_model(init_encoder(EncoderConfig(stage_channels=CHANNELS, seed=2)),
                        LossConfig(), FCN_METRICS, cfg.seed)
    items = dataset.subset("train")
    order = epoch_order(cfg.seed, 1, len(items))
    for start in range(0, len(order), cfg.batch_size):
        batch = [items[i] for i in order[start:start + cfg.batch_size]]
        x0 = np.stack([it.pair.t0 for it in batch])
        x1 = np.stack([it.pair.t1 for it in batch])
        y = np.stack([it.mask.y for it in batch])
        from cosimnet.encoder import encode
        p0, p1 = encode(model.encoder, x0), encode(model.encoder, x1)
        loss = pixel_cross_entropy(classifier_logits(model, p0, p1, 16, 16), y)
        nx.zero_grads(model.params)
        nx.backward(loss)
        nx.sgd_step(model.params, cfg.lr_groups, cfg.momentum, cfg.weight_decay)
    for a, b in zip(weights(res.model), weights(model)):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind,mode", [("l2_contrastive", "metric"), (COSINE, "metric"),
                                       ("l2_contrastive", FCN_METRICS)])
def test_model_checkpoint_roundtrip(tmp_path, dataset, encoder, kind, mode):
    res = train(encoder, dataset, quick(epochs=1, loss=LossConfig(loss_kind=kind), mode=mode))
    res.model.thresholds = choose_thresholds(res.model, dataset.subset("test"), 11)
    save_model(res.model, tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt")
    assert (back.distance, back.mode, back.thresholds) == (res.model.distance, res.model.mode,
                                                           res.model.thresholds)
    assert [p.name for p in back.params] == [p.name for p in res.model.params]
    assert all(np.array_equal(a, b) for a, b in zip(weights(back), weights(res.model)))
    pair = dataset.items[0].pair
    np.testing.assert_array_equal(infer(back, pair).fused.values.data,
                                  infer(res.model, pair).fused.values.data)


def test_cosine_model_has_head_group_params(encoder):
    model = build_model(encoder, LossConfig(loss_kind=COSINE))
    assert [(p.name, p.group) for p in model.params[-2:]] == [("cos3.w", "head"), ("cos3.b", "head")]


def test_fcn_rejects_cosine_loss():
    with pytest.raises(InvalidArgument):
        quick(mode=FCN_METRICS, loss=LossConfig(loss_kind=COSINE)).validate()


def test_learning_rates_follow_loss_kind():
    assert TrainConfig.for_loss(LossConfig(loss_kind=COSINE)).lr_groups == {
        "backbone": pipeline.COSINE_LEARNING_RATE, "head": pipeline.COSINE_LEARNING_RATE}
    assert TrainConfig.for_loss(LossConfig(loss_kind=COSINE), lr=0.1).lr == 0.1
    assert TrainConfig.for_loss(LossConfig(loss_kind=TCL)).lr == TrainConfig().lr
