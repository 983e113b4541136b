import numpy as np
import pytest

from src.archspace import SEQ_LEN, VOCAB, tokenize
from src.controller import ControllerConfig, DNASController, LatentCode
from src.data_processing import prepare_training_data, tokens_matrix
from src.errors import ConfigError, MissingCheckpointError, ShapeMismatchError
from src.nnkernel import grad_check
from tests.conftest import synthetic_records


def test_default_config_matches_published_settings():
    cfg = ControllerConfig()
    assert cfg.latent_dim == 26
    assert cfg.acc_widths == [26, 64, 1]
    assert cfg.flops_widths == [26, 1]
    assert cfg.weights() == {"alpha": 0.8, "lam": 0.3, "mu": 0.2, "beta": 1.0}
    assert cfg.learning_rate == 0.001
    assert (cfg.free_bits, cfg.kl_warmup_epochs) == (1.0, 50)
    large = ControllerConfig.large()
    assert large.latent_dim == 46 and large.acc_widths[0] == 46


@pytest.mark.parametrize("field, flag", [("alpha", "--alpha"), ("lam", "--lam"), ("mu", "--mu")])
def test_config_rejects_non_positive_weights(field, flag):
    with pytest.raises(ConfigError) as exc:
        ControllerConfig(**{field: 0.0}).validate()
    assert exc.value.flag == flag


def test_config_allows_zero_beta_but_not_negative():
    ControllerConfig(beta=0.0).validate()
    with pytest.raises(ConfigError):
        ControllerConfig(beta=-0.1).validate()


def test_encode_deterministic_and_sized(chain_cell):
    controller = DNASController(seed=3)
    tokens = tokenize(chain_cell)
    a, b = controller.encode(tokens, seed=1), controller.encode(tokens, seed=1)
    assert a.mean.shape == a.logvar.shape == a.sample.shape == (26,)
    assert np.array_equal(a.mean, b.mean)
    assert np.array_equal(a.sample, b.sample)


def test_encode_rejects_wrong_length():
    controller = DNASController(ControllerConfig(hidden_size=4), seed=0)
    with pytest.raises(ShapeMismatchError):
        controller.encode([0] * (SEQ_LEN - 1))


def test_distinct_cells_get_distinct_means(synth_bench, flops_model):
    controller = DNASController(ControllerConfig(hidden_size=8), seed=0)
    cells = [r.cell for r in synthetic_records(200, 11, synth_bench, flops_model)]
    means = controller.encode_means(cells)
    rounded = {tuple(np.round(m, 12)) for m in means}
    assert len(rounded) == len(cells)


def test_zero_weights_give_bias(chain_cell):
    controller = DNASController(ControllerConfig(hidden_size=8), seed=0)
    for name in controller.store.names():
        if name.startswith(("acc_", "flops_")):
            controller.store[name][...] = 0.0
    controller.store["acc_b2"][...] = 0.37
    controller.store["flops_b1"][...] = -1.25
    z = controller.encode(tokenize(chain_cell))
    assert controller.predict_acc(z) == pytest.approx(0.37)
    assert controller.predict_flops_norm(z) == pytest.approx(-1.25)


def test_predictions_use_mean(chain_cell):
    controller = DNASController(ControllerConfig(hidden_size=8), seed=0)
    code = controller.encode(tokenize(chain_cell), seed=4)
    assert controller.predict_acc(code) == controller.predict_acc(code.mean)
    assert controller.predict_acc(code) == controller.predict_acc(code)


def _batch(n, seed, synth_bench, flops_model, controller):
    records = synthetic_records(n, seed, synth_bench, flops_model)
    data = prepare_training_data(records, controller.scaler)
    return data.tokens, data.accuracy, data.flops_norm


@pytest.mark.parametrize("free_bits", [0.0, 1.0])
def test_full_loss_passes_gradient_check(free_bits, synth_bench, flops_model):
    cfg = ControllerConfig(hidden_size=8, free_bits=free_bits)
    controller = DNASController(cfg, seed=2)
    tokens, y_acc, y_flops = _batch(3, 21, synth_bench, flops_model, controller)

    def loss_fn(store):
        losses, grads = controller.total_loss(tokens, y_acc, y_flops, seed=5)
        return losses.total, grads

    report = grad_check(loss_fn, controller.store)
    assert report.max_rel_error < 1e-3, report


@pytest.mark.parametrize("component", ["acc", "flops", "rec", "kl"])
def test_single_weight_isolates_component(component, synth_bench, flops_model):
    controller = DNASController(ControllerConfig(hidden_size=8, free_bits=0.0), seed=0)
    tokens, y_acc, y_flops = _batch(5, 2, synth_bench, flops_model, controller)
    key = {"acc": "alpha", "flops": "lam", "rec": "mu", "kl": "beta"}[component]
    weights = {"alpha": 0.0, "lam": 0.0, "mu": 0.0, "beta": 0.0, key: 1.0}
    losses, grads = controller.total_loss(tokens, y_acc, y_flops, seed=1, weights=weights)
    assert losses.total == pytest.approx(getattr(losses, component))

    untouched = {
        "acc": ("flops_", "dec_", "out_"),
        "flops": ("acc_", "dec_", "out_"),
        "rec": ("acc_", "flops_"),
        "kl": ("acc_", "flops_", "dec_", "out_"),
    }[component]
    for name, g in grads.items():
        if name.startswith(untouched):
            assert not np.any(g), name


def test_kl_only_loss_equals_closed_form(synth_bench, flops_model):
    controller = DNASController(ControllerConfig(hidden_size=8, free_bits=0.0), seed=0)
    tokens, y_acc, y_flops = _batch(4, 6, synth_bench, flops_model, controller)
    weights = {"alpha": 0.0, "lam": 0.0, "mu": 0.0, "beta": 1.0}
    losses, _ = controller.total_loss(tokens, y_acc, y_flops, seed=0, weights=weights)
    mu, logvar, _ = controller._encode_forward(tokens)
    expected = 0.5 * np.sum(mu ** 2 + np.exp(logvar) - 1.0 - logvar)
    assert losses.total == pytest.approx(expected)


def test_free_bits_floor_only_penalizes_dimensions_above_it(synth_bench, flops_model):
    controller = DNASController(ControllerConfig(hidden_size=8, free_bits=5.0), seed=0)
    tokens, y_acc, y_flops = _batch(4, 6, synth_bench, flops_model, controller)
    weights = {"alpha": 0.0, "lam": 0.0, "mu": 0.0, "beta": 1.0}

    losses, grads = controller.total_loss(tokens, y_acc, y_flops, seed=0, weights=weights)
    assert losses.total == pytest.approx(8 * 4 * 5.0)
    assert all(not np.any(g) for g in grads.values())

    controller.store["mu_b"][0] = 10.0
    losses, grads = controller.total_loss(tokens, y_acc, y_flops, seed=0, weights=weights)
    mu, logvar, _ = controller._encode_forward(tokens)
    kl_dims = 0.5 * np.sum(mu ** 2 + np.exp(logvar) - 1.0 - logvar, axis=0)
    assert losses.total == pytest.approx(kl_dims[0] + 7 * 4 * 5.0)
    assert losses.kl == pytest.approx(kl_dims.sum())
    assert grads["mu_b"][0] > 0
    assert not np.any(grads["mu_b"][1:])


def test_beta_warms_up_linearly():
    cfg = ControllerConfig(beta=2.0, kl_warmup_epochs=4)
    assert [cfg.beta_at(e) for e in range(6)] == pytest.approx([0.5, 1.0, 1.5, 2.0, 2.0, 2.0])
    assert ControllerConfig(beta=2.0, kl_warmup_epochs=0).beta_at(0) == 2.0
    with pytest.raises(ConfigError):
        ControllerConfig(free_bits=-1.0).validate()
    with pytest.raises(ConfigError):
        ControllerConfig(kl_warmup_epochs=-1).validate()


def test_training_keeps_latent_informative(synth_bench, flops_model):
    records = synthetic_records(8, 30, synth_bench, flops_model)
    cfg = ControllerConfig(hidden_size=16, epochs=400, batch_size=8, learning_rate=0.005)
    controller = DNASController(cfg, seed=0)
    controller.train_model(records, seed=0)
    assert controller.history.epochs[-1]["kl"] > 1.0

    tokens = tokens_matrix([r.cell for r in records])
    # accuracy of the best latent-free guess: the most common token at each position
    modes = [np.bincount(col, minlength=VOCAB).max() for col in tokens.T]
    baseline = sum(modes) / tokens.size
    decoded = controller.decode_tokens(controller.encode_means([r.cell for r in records]))
    accuracy = float(np.mean(decoded == tokens))
    assert accuracy >= baseline + 0.5 * (1.0 - baseline)


def test_total_loss_rejects_bad_targets(synth_bench, flops_model):
    controller = DNASController(ControllerConfig(hidden_size=4), seed=0)
    tokens, y_acc, y_flops = _batch(3, 0, synth_bench, flops_model, controller)
    with pytest.raises(ShapeMismatchError):
        controller.total_loss(tokens, y_acc[:2], y_flops, seed=0)


def test_training_reduces_loss(trained_tiny):
    controller, _ = trained_tiny
    totals = controller.history.totals
    assert len(totals) == 30
    assert np.all(np.isfinite(totals))
    rec = [e["rec"] for e in controller.history.epochs]
    assert rec[-1] < rec[0]
    assert controller.is_trained


def test_training_is_bit_identical(tiny_config, synth_bench, flops_model):
    records = synthetic_records(12, 8, synth_bench, flops_model)
    a = DNASController(tiny_config, seed=4)
    b = DNASController(tiny_config, seed=4)
    a.train_model(records, seed=9)
    b.train_model(records, seed=9)
    for name in a.store.names():
        assert np.array_equal(a.store[name], b.store[name]), name
    assert a.history.totals == b.history.totals


def test_decode_is_deterministic(trained_tiny):
    controller, records = trained_tiny
    z = controller.encode_means([records[0].cell])[0]
    first = controller.decode(LatentCode.point(z))
    assert first == controller.decode(z)
    assert len(first) == SEQ_LEN
    assert all(0 <= t < VOCAB for t in first)


def test_decode_tokens_batch_matches_single(trained_tiny):
    controller, records = trained_tiny
    Z = controller.encode_means([r.cell for r in records[:5]])
    batch = controller.decode_tokens(Z)
    for row, z in zip(batch, Z):
        assert tuple(int(t) for t in row) == controller.decode(z)


def test_predict_flops_is_denormalized(trained_tiny):
    controller, records = trained_tiny
    Z = controller.encode_means([r.cell for r in records])
    norm = controller.predict_flops_norm(Z)
    raw = controller.predict_flops(Z)
    np.testing.assert_allclose(raw, controller.scaler.inverse_transform(norm))
    assert isinstance(controller.predict_flops(Z[0]), float)


def test_evaluate_predictors_keys(trained_tiny):
    controller, records = trained_tiny
    metrics = controller.evaluate_predictors(records)
    assert set(metrics) == {"kendall_tau", "median_flops_rel_error"}
    assert -1.0 <= metrics["kendall_tau"] <= 1.0


def test_save_load_round_trip(trained_tiny, tmp_path):
    controller, records = trained_tiny
    controller.save_model(tmp_path / "ckpt")
    loaded = DNASController.load_model(tmp_path / "ckpt")
    cells = [r.cell for r in records[:6]]
    np.testing.assert_array_equal(loaded.encode_means(cells), controller.encode_means(cells))
    Z = controller.encode_means(cells)
    np.testing.assert_array_equal(loaded.predict_flops(Z), controller.predict_flops(Z))
    np.testing.assert_array_equal(loaded.decode_tokens(Z), controller.decode_tokens(Z))
    assert loaded.config == controller.config


def test_load_missing_checkpoint(tmp_path):
    with pytest.raises(MissingCheckpointError):
        DNASController.load_model(tmp_path / "nowhere")


def test_save_untrained_controller_raises(tmp_path):
    with pytest.raises(ValueError):
        DNASController(ControllerConfig(hidden_size=4)).save_model(tmp_path)


def test_tokens_matrix_shape(chain_cell):
    assert tokens_matrix([chain_cell, chain_cell]).shape == (2, SEQ_LEN)
