import json

import numpy as np
import pytest

from deskseg import nn
from deskseg.data.synth import SynthConfig, render_image
from deskseg.model import ModelConfig, init_params
from deskseg.train import (
    CheckpointMismatch,
    Sample,
    TrainConfig,
    TrainingDiverged,
    batch_gradients,
    epoch_order,
    evaluate_samples,
    load_checkpoint,
    predict_results,
    save_checkpoint,
    sgd_step,
    train,
)

MODEL = ModelConfig(height=32, width=32, backbone_channels=(4, 8, 8, 8), embed_dim=8, encoder_depth=1,
                    encoder_heads=2, num_queries=5, decoder_heads=2, class_hidden=8)


def samples(n, seed=0):
    cfg = SynthConfig(num_images=n, height=32, width=32, radius_range=(4, 8), min_visible_area=8, seed=seed)
    out = []
    for i in range(n):
        img, inst = render_image(cfg, i)
        out.append(Sample(i + 1, img, np.array([c for _, c in inst]), np.stack([m for m, _ in inst]).astype(float)))
    return out


def test_one_epoch_of_four_images_is_one_step(tmp_path):
    log = tmp_path / "log.jsonl"
    res = train(samples(4), init_params(MODEL), MODEL, TrainConfig(epochs=1, batch_size=4), log)
    assert res.steps == 1 and res.epochs_done == 1
    records = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["kind"] for r in records] == ["step", "epoch"]
    assert set(records[-1]) >= {"epoch", "step", "total", "class", "bce", "dice"}


def test_partial_last_batch_counts_as_a_step():
    res = train(samples(6), init_params(MODEL), MODEL, TrainConfig(epochs=2, batch_size=4))
    assert res.steps == 4


def test_zero_learning_rate_changes_nothing():
    params = init_params(MODEL)
    before = {k: v.data.copy() for k, v in params.items()}
    grads, _ = batch_gradients(params, MODEL, samples(2), TrainConfig())
    assert any(np.abs(g).max() > 0 for g in grads.values())
    sgd_step(params, grads, 0.0)
    assert all(np.array_equal(params[k].data, before[k]) for k in params)


def test_loss_decreases_on_fixed_micro_fixture():
    data = samples(1, seed=3)
    params = init_params(MODEL)
    res = train(data, params, MODEL, TrainConfig(epochs=10, batch_size=1, learning_rate=1e-3))
    totals = [r["total"] for r in res.history if r["kind"] == "step"]
    assert len(totals) == 10
    assert all(b < a for a, b in zip(totals, totals[1:]))


def test_training_is_deterministic():
    data = samples(6)
    cfg = TrainConfig(epochs=2, batch_size=4)
    a = train(data, init_params(MODEL), MODEL, cfg)
    b = train(data, init_params(MODEL), MODEL, cfg)
    assert a.history == b.history
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)


def test_threaded_gradients_match_serial_bitwise():
    data = samples(4)
    params = init_params(MODEL)
    from concurrent.futures import ThreadPoolExecutor

    serial, _ = batch_gradients(params, MODEL, data, TrainConfig())
    with ThreadPoolExecutor(3) as pool:
        threaded, _ = batch_gradients(params, MODEL, data, TrainConfig(), pool)
    assert all(serial[k].tobytes() == threaded[k].tobytes() for k in serial)


def test_epoch_order_is_seeded_permutation():
    a = epoch_order(10, 0, 3)
    assert sorted(a) == list(range(10))
    assert np.array_equal(a, epoch_order(10, 0, 3))
    assert not np.array_equal(a, epoch_order(10, 0, 4))


def test_divergence_names_the_term(tmp_path):
    params = init_params(MODEL)
    params["mask_decoder.class_head.out.bias"].data = np.array([np.nan, 0.0, 0.0])
    log = tmp_path / "log.jsonl"
    with pytest.raises(TrainingDiverged, match="class_logits"):
        train(samples(2), params, MODEL, TrainConfig(epochs=1), log)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"momentum": 0.9})
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.epochs) == (1e-4, 4, 100)


def test_checkpoint_round_trip_and_mismatch(tmp_path):
    params = init_params(MODEL)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, params, MODEL, {"epochs_done": 3})
    back, cfg, meta = load_checkpoint(path)
    assert cfg == MODEL and meta["epochs_done"] == 3
    assert all(back[k].data.tobytes() == params[k].data.tobytes() for k in params)
    wider = ModelConfig(**{**MODEL.to_dict(), "embed_dim": 16})
    with pytest.raises(CheckpointMismatch, match="shape"):
        load_checkpoint(path, wider)


def test_prediction_records_follow_the_results_schema():
    data = samples(3)
    params = nn.detached(init_params(MODEL))
    results = predict_results(params, MODEL, data, score_threshold=0.0)
    for r in results:
        assert set(r) == {"image_id", "category_id", "score", "bbox", "segmentation"}
        assert r["segmentation"]["size"] == [32, 32]
        assert sum(r["segmentation"]["counts"]) == 32 * 32
    assert predict_results(params, MODEL, data, 0.0) == results
    reports = evaluate_samples(params, MODEL, data, 0.0)
    assert set(reports) == {"detection", "segmentation"}
