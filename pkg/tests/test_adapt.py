import math
import warnings
from datetime import datetime

import numpy as np
import pytest

from fadacs.adapt import (
    ArchConfig, DomainDataset, Forecaster, HistoricalAverage, TrainConfig, adversarial_adapt,
    adversarial_losses, assemble_predict, baseline_ha, baseline_train, build_discriminator, build_encoder,
    discriminator_accuracy, fit_regression, held_out_accuracy, new_forecaster, parameter_transfer,
    pretrain_source,
)
from fadacs.errors import InvalidConfig, NoHistory, SeriesTooShort
from fadacs.features import FeatureTensor, OccupancyGrid, TargetGrid
from fadacs.ingest import to_seconds
from fadacs.neural import ConvLSTM, Dense, LayerStack, LogSoftmax, LSTM
from fadacs.neural.checkpoint import save_checkpoint

from oracles import adversarial_losses_scalar

TINY = ArchConfig(hidden=6, code=4, mlp_hidden=8, disc_hidden=8)


def dataset(x, y=None, tag="Source"):
    X = FeatureTensor(np.asarray(x, dtype=float), [f"c{n}" for n in range(x.shape[-1])])
    return DomainDataset(X, None if y is None else TargetGrid(np.asarray(y, dtype=float), 1), tag)


def random_windows(seed, n=120, T=4, L=3, C=2):
    return np.random.default_rng(seed).uniform(size=(n, T, L, C))


def test_constant_target_is_learned():
    x = random_windows(0)
    data = dataset(x, np.full((len(x), 3), 0.3))
    enc, reg, curve = pretrain_source(data, TrainConfig(epochs=40, lr=1e-2, batch_size=32, patience=0), TINY)
    pred = assemble_predict(enc, reg, x)
    assert np.abs(pred - 0.3).max() < 0.02


def test_lookback_copy_task():
    x = random_windows(1, n=300)
    data = dataset(x, x[:, -1, :, 0])
    cfg = TrainConfig(epochs=50, lr=1e-2, batch_size=32, patience=0)
    arch = ArchConfig(hidden=8, code=8, mlp_hidden=8, disc_hidden=8)
    enc, reg, _ = pretrain_source(data, cfg, arch, val=data)
    pred = assemble_predict(enc, reg, x)
    assert math.sqrt(np.mean((pred - x[:, -1, :, 0]) ** 2)) < 0.03


def test_zero_epochs_returns_initialization():
    x = random_windows(2)
    data = dataset(x, np.zeros((len(x), 3)))
    enc, reg, curve = pretrain_source(data, TrainConfig(epochs=0, seed=7), TINY)
    init = new_forecaster(TINY, data.X, 7)
    assert curve == []
    assert all(np.array_equal(v, init.encoder.state()[k]) for k, v in enc.state().items())
    assert all(np.array_equal(v, init.regressor.state()[k]) for k, v in reg.state().items())


def test_predictions_strictly_inside_unit_interval_and_match_validation():
    x = random_windows(3)
    data = dataset(x, x[:, -1, :, 1])
    model = baseline_train("ConvLSTM", data, TrainConfig(epochs=2), TINY)
    pred = model.predict(data.X)
    assert pred.shape == (len(x), 3) and (pred > 0).all() and (pred < 1).all()
    again = assemble_predict(model.encoder, model.regressor, data.X)
    assert np.array_equal(pred, again)


def test_mlp_fits_linear_target():
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(400, 3, 2, 2))
    w = rng.uniform(-0.5, 0.5, size=(3, 2))
    y = 0.5 + 0.2 * np.einsum("ntlc,tc->nl", x - 0.5, w)
    data = dataset(x, y)
    model = baseline_train("MLP", data, TrainConfig(epochs=30, lr=5e-3, batch_size=32), TINY)
    assert math.sqrt(np.mean((model.predict(data.X) - y) ** 2)) < 0.05


def test_lstm_and_degenerate_convlstm_train_identically():
    rng = np.random.default_rng(5)
    x = rng.uniform(size=(64, 4, 1, 3))
    y = x[:, -1, :, 0]
    data = dataset(x, y)
    lstm = LSTM(3, 4, rng)
    conv = ConvLSTM(3, 4, 1, kernel=1, rng=rng, peepholes=False)
    for k, v in lstm.params.items():
        conv.params[k][...] = v[..., None] if k.startswith("W_") else v
    head = Dense(4, 4, rng)
    arch = ArchConfig(hidden=4, code=4)
    from fadacs.adapt import build_regressor, clone_stack
    reg = build_regressor(arch, rng)
    a = Forecaster(LayerStack([lstm, head]), reg, arch)
    b = Forecaster(LayerStack([conv, clone_stack(LayerStack([head])).layers[0]]), clone_stack(reg), arch)
    cfg = TrainConfig(epochs=5, batch_size=16, patience=0)
    ca = fit_regression(a, data, data, cfg)
    cb = fit_regression(b, data, data, cfg)
    for ra, rb in zip(ca, cb):
        assert abs(ra["train_rmse"] - rb["train_rmse"]) < 1e-9 and abs(ra["val_rmse"] - rb["val_rmse"]) < 1e-9


def test_uniform_discriminator_losses():
    out = np.log(np.full((8, 2), 0.5))
    loss_d, loss_m = adversarial_losses(out, out)
    assert loss_d == 2 * math.log(2) and loss_m == math.log(2)


def test_losses_match_hand_rolled_values():
    rng = np.random.default_rng(6)
    disc = build_discriminator(TINY, rng, n_lots=3)
    cs, ct = rng.normal(size=(8, 3, 4)), rng.normal(size=(8, 3, 4))
    # raw logits: run the stack without its final LogSoftmax
    logits = LayerStack(disc.layers[:-1])
    ls, lt = logits.forward(cs), logits.forward(ct)
    assert isinstance(disc.layers[-1], LogSoftmax)
    got = adversarial_losses(disc.forward(cs), disc.forward(ct))
    ref = adversarial_losses_scalar(ls.tolist(), lt.tolist())
    assert abs(got[0] - ref[0]) < 1e-12 and abs(got[1] - ref[1]) < 1e-12


def test_one_logit_head_agrees_with_two_logit_head():
    z_s, z_t = np.array([[0.3], [-1.2]]), np.array([[2.0], [0.1]])
    two_s = np.concatenate([-np.logaddexp(0, -z_s), -np.logaddexp(0, z_s)], axis=1)
    two_t = np.concatenate([-np.logaddexp(0, -z_t), -np.logaddexp(0, z_t)], axis=1)
    assert adversarial_losses(z_s, z_t, "logit1") == pytest.approx(adversarial_losses(two_s, two_t))
    assert discriminator_accuracy(z_s, z_t, "logit1") == discriminator_accuracy(two_s, two_t)


def test_balanced_accuracy():
    src = np.log(np.array([[0.9, 0.1], [0.9, 0.1], [0.2, 0.8]]))
    tgt = np.log(np.array([[0.1, 0.9]]))
    assert discriminator_accuracy(src, tgt) == pytest.approx(0.5 * (2 / 3 + 1))


def pretrained_source(seed=0, n=200):
    x = random_windows(seed, n=n)
    data = dataset(x, x[:, -1, :, 0])
    model = baseline_train("ConvLSTM", data, TrainConfig(epochs=2, seed=seed), TINY)
    return model, x


def test_identical_domains_leave_discriminator_at_chance():
    model, _ = pretrained_source()
    rng = np.random.default_rng(11)
    xs, xt = rng.uniform(size=(1500, 4, 3, 2)), rng.uniform(size=(1500, 4, 3, 2))
    cfg = TrainConfig(adapt_steps=150, m_lr=0.0, seed=1)
    res = adversarial_adapt(model.encoder, xs[:1000], xt[:1000], cfg, TINY)
    acc = held_out_accuracy(model.encoder, res.target_encoder, res.discriminator, xs[1000:], xt[1000:], TINY)
    assert 0.4 <= acc <= 0.6


@pytest.mark.filterwarnings("ignore:discriminator accuracy pinned")
def test_random_target_encoder_is_easy_to_detect():
    model, x = pretrained_source()
    other = build_encoder(TINY, 2, 3, 4, np.random.default_rng(99))
    cfg = TrainConfig(adapt_steps=200, m_lr=0.0, seed=2)
    res = adversarial_adapt(model.encoder, x[:150], x[:150], cfg, TINY, target_init=other)
    assert held_out_accuracy(model.encoder, res.target_encoder, res.discriminator, x[150:], x[150:], TINY) > 0.9


def _bytes(tmp_path, name, stack):
    path = tmp_path / name
    save_checkpoint(path, {"m": stack.state()})
    return path.read_bytes()


def test_source_encoder_and_regressor_frozen(tmp_path):
    model, x = pretrained_source()
    before = (_bytes(tmp_path, "e0", model.encoder), _bytes(tmp_path, "r0", model.regressor))
    res = adversarial_adapt(model.encoder, x, x + 0.3, TrainConfig(adapt_steps=20), TINY)
    after = (_bytes(tmp_path, "e1", model.encoder), _bytes(tmp_path, "r1", model.regressor))
    assert before == after
    assert res.target_encoder is not model.encoder
    assert len(res.curves) == 20 and set(res.curves[0]) == {"step", "loss_d", "loss_m", "d_accuracy"}


@pytest.mark.parametrize("scope", ["calibration", "both"])
def test_calibration_scope_adds_identity_input_layer(scope):
    model, x = pretrained_source()
    res = adversarial_adapt(model.encoder, x, x, TrainConfig(adapt_steps=0, adapt_scope=scope), TINY)
    assert len(res.target_encoder.layers) == len(model.encoder.layers) + 1
    assert np.array_equal(assemble_predict(res.target_encoder, model.regressor, x), model.predict(x))


def test_calibration_scope_trains_only_the_affine_layer():
    model, x = pretrained_source()
    res = adversarial_adapt(model.encoder, x, x * 1.5, TrainConfig(adapt_steps=10, adapt_scope="calibration"), TINY)
    tail = res.target_encoder.layers[1:]
    assert all(np.array_equal(a.params[k], b.params[k]) for a, b in zip(tail, model.encoder.layers) for k in a.params)
    assert not np.array_equal(res.target_encoder.layers[0].params["scale"], np.ones(2))


def test_mode_collapse_warning():
    model, x = pretrained_source()
    cfg = TrainConfig(adapt_steps=60, m_lr=0.0, collapse_patience=5, d_lr=1e-2)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = adversarial_adapt(model.encoder, x, x + 50.0, cfg, TINY)
    assert any("pinned" in str(w.message) for w in caught)
    assert res.warnings and res.warnings[0]["warning"] == "ModeCollapse"


def test_adaptation_is_reproducible():
    model, x = pretrained_source()
    cfg = TrainConfig(adapt_steps=15, seed=3)
    a = adversarial_adapt(model.encoder, x, x * 0.8, cfg, TINY)
    b = adversarial_adapt(model.encoder, x, x * 0.8, cfg, TINY)
    assert a.curves == b.curves
    assert all(np.array_equal(v, b.target_encoder.state()[k]) for k, v in a.target_encoder.state().items())


def test_parameter_transfer():
    model, x = pretrained_source()
    same = dataset(x, x[:, -1, :, 0])
    assert parameter_transfer(model, same, TrainConfig(epochs=0)).trees().keys() == model.trees().keys()
    untouched = parameter_transfer(model, same, TrainConfig(epochs=0))
    assert all(np.array_equal(v, untouched.encoder.state()[k]) for k, v in model.encoder.state().items())
    src_val = math.sqrt(np.mean((model.predict(x) - x[:, -1, :, 0]) ** 2))
    tuned = parameter_transfer(model, same, TrainConfig(epochs=3, lr=1e-4), val=same)
    assert math.sqrt(np.mean((tuned.predict(x) - x[:, -1, :, 0]) ** 2)) <= 1.05 * src_val
    with pytest.raises(SeriesTooShort):
        parameter_transfer(model, same.take(np.arange(0)), TrainConfig(epochs=1))


def test_config_validation():
    with pytest.raises(InvalidConfig):
        ArchConfig(encoder="gru").validate()
    with pytest.raises(InvalidConfig):
        TrainConfig(loss="MAE").validate()
    with pytest.raises(InvalidConfig):
        TrainConfig(adapt_scope="half").validate()


MONDAY = to_seconds(datetime(2020, 2, 3))


def test_historical_average():
    # two Mondays at 09:00
    grid = OccupancyGrid([5], [MONDAY + 9 * 3600, MONDAY + 9 * 3600 + 7 * 86400], [[0.2, 0.4]])
    ha = HistoricalAverage(grid)
    assert ha.predict_one(5, MONDAY + 9 * 3600 + 14 * 86400) == pytest.approx(0.3)
    assert baseline_ha(grid, (5, MONDAY + 9 * 3600)) == pytest.approx(0.3)
    assert ha.predict_one(5, MONDAY + 11 * 3600) == pytest.approx(0.3)  # fallback: lot mean
    with pytest.raises(NoHistory):
        ha.predict_one(6, MONDAY)
    const = OccupancyGrid([1, 2], MONDAY + 300 * np.arange(50), np.full((2, 50), 0.7))
    assert np.allclose(HistoricalAverage(const).predict(MONDAY + 300 * np.arange(100, 140)), 0.7)
    with pytest.raises(NoHistory):
        HistoricalAverage(OccupancyGrid([1], [], np.zeros((1, 0))))
