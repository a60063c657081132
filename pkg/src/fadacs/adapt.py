"""Source pre-training, adversarial adaptation of a target encoder, and the baselines.

Encoders map a window ``[batch, time, lots, channels]`` to per-lot codes
``[batch, lots, code]``. A shared regressor head turns each code into an
occupancy rate; the discriminator classifies each lot code as source or target.
"""
from __future__ import annotations

import copy
import math
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import Divergence, InvalidConfig, NoHistory, SeriesTooShort, ShapeMismatch
from .features import FeatureTensor, TargetGrid
from .ingest import DAY_S
from .neural import (Adam, ChannelAffine, ConvLSTM, Dense, FlattenLots, LayerStack, LogSoftmax, LSTM, ReLU, Sigmoid, SplitLots,
                     Squeeze, WindowFlatten)

SOURCE, TARGET = "Source", "Target"


@dataclass
class ArchConfig:
    """Layer sizes. Defaults are the full-size model; benchmarks use much smaller widths."""

    encoder: str = "convlstm"  # convlstm | lstm | mlp
    hidden: int = 200
    code: int = 60
    kernel: int = 3
    peepholes: bool = True
    projection: bool = True  # ConvLSTM(hidden) + 1x1 projection to code, else ConvLSTM(code)
    mlp_hidden: int = 200
    mlp_scope: str = "lot"  # lot | all
    disc_hidden: int = 100
    disc_head: str = "logsoftmax2"  # logsoftmax2 | logit1
    disc_input: str = "flat"  # flat: whole [lots x code] map; lot: one decision per lot code

    def validate(self):
        if self.encoder not in ("convlstm", "lstm", "mlp"):
            raise InvalidConfig(f"unknown encoder {self.encoder!r}")
        if self.disc_head not in ("logsoftmax2", "logit1"):
            raise InvalidConfig(f"unknown discriminator head {self.disc_head!r}")
        if self.disc_input not in ("flat", "lot"):
            raise InvalidConfig(f"unknown discriminator input {self.disc_input!r}")
        if self.kernel % 2 != 1:
            raise InvalidConfig("kernel width must be odd")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    patience: int = 5
    val_fraction: float = 0.15
    loss: str = "RMSE"
    clip_norm: float | None = 5.0
    # adversarial stage
    adapt_steps: int = 400
    d_steps_per_g_step: int = 1
    d_lr: float | None = None
    m_lr: float | None = None
    collapse_patience: int = 50
    adapt_scope: str = "all"  # all | calibration | both (calibration = per-channel input affine)

    def validate(self):
        if self.loss != "RMSE":
            raise InvalidConfig("only the RMSE training loss is supported")
        if self.adapt_scope not in ("all", "calibration", "both"):
            raise InvalidConfig(f"unknown adapt_scope {self.adapt_scope!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.adapt_steps < 0:
            raise InvalidConfig("batch_size >= 1, epochs >= 0 and adapt_steps >= 0 required")
        if self.lr <= 0 or (self.d_lr is not None and self.d_lr < 0) or (self.m_lr is not None and self.m_lr < 0):
            raise InvalidConfig("lr must be > 0; d_lr and m_lr must be >= 0 when given")
        if self.d_steps_per_g_step < 1 or self.patience < 0:
            raise InvalidConfig("d_steps_per_g_step >= 1 and patience >= 0 (0 disables early stopping) required")


@dataclass
class DomainDataset:
    X: FeatureTensor
    Y: TargetGrid | None = None
    domain_tag: str = SOURCE

    def __post_init__(self):
        if self.domain_tag not in (SOURCE, TARGET):
            raise ValueError(f"domain_tag must be {SOURCE!r} or {TARGET!r}")
        if self.domain_tag == SOURCE and self.Y is None:
            raise ValueError("source datasets need labels")
        if self.Y is not None and len(self.Y) != len(self.X):
            raise ShapeMismatch(f"{len(self.X)} windows but {len(self.Y)} targets")

    def __len__(self):
        return len(self.X)

    def take(self, idx):
        return DomainDataset(self.X.take(idx), None if self.Y is None else self.Y.take(idx), self.domain_tag)


def build_encoder(arch, n_in, n_lots, lookback, rng):
    arch.validate()
    if arch.encoder == "convlstm":
        if not arch.projection:
            return LayerStack([ConvLSTM(n_in, arch.code, n_lots, arch.kernel, rng, arch.peepholes)], "encoder")
        return LayerStack([ConvLSTM(n_in, arch.hidden, n_lots, arch.kernel, rng, arch.peepholes),
                           Dense(arch.hidden, arch.code, rng)], "encoder")
    if arch.encoder == "lstm":
        return LayerStack([LSTM(n_in, arch.hidden, rng), Dense(arch.hidden, arch.code, rng)], "encoder")
    if arch.mlp_scope == "lot":
        return LayerStack([WindowFlatten("lot"), Dense(lookback * n_in, arch.mlp_hidden, rng), ReLU(),
                           Dense(arch.mlp_hidden, arch.code, rng)], "encoder")
    return LayerStack([WindowFlatten("all"), Dense(lookback * n_lots * n_in, arch.mlp_hidden, rng), ReLU(),
                       Dense(arch.mlp_hidden, n_lots * arch.code, rng), SplitLots(n_lots)], "encoder")


def build_regressor(arch, rng):
    return LayerStack([Dense(arch.code, 1, rng), Sigmoid(), Squeeze()], "regressor")


def build_discriminator(arch, rng, n_lots=1):
    out = 2 if arch.disc_head == "logsoftmax2" else 1
    if arch.disc_input == "flat":
        layers = [FlattenLots(), Dense(n_lots * arch.code, arch.disc_hidden, rng)]
    else:
        layers = [Dense(arch.code, arch.disc_hidden, rng)]
    layers += [ReLU(), Dense(arch.disc_hidden, arch.disc_hidden, rng), ReLU(), Dense(arch.disc_hidden, out, rng)]
    if arch.disc_head == "logsoftmax2":
        layers.append(LogSoftmax())
    return LayerStack(layers, "discriminator")


def clone_stack(stack, name=None):
    twin = copy.deepcopy(stack)
    for layer in twin.layers:
        layer._cache = None
    if name:
        twin.name = name
    return twin


# --- losses -------------------------------------------------------------------

def rmse_loss(pred, y):
    """``(sqrt(mean((pred - y)^2)), d/dpred)``."""
    diff = pred - y
    value = math.sqrt(float(np.mean(diff * diff)))
    grad = diff / (diff.size * value) if value > 0 else np.zeros_like(diff)
    return value, grad


def _log_softplus(z):
    return np.logaddexp(0.0, z)


def domain_log_probs(d_out, head):
    """``(log P(source), log P(target))`` from the discriminator output."""
    if head == "logsoftmax2":
        return d_out[..., 0], d_out[..., 1]
    z = d_out[..., 0]
    return -_log_softplus(-z), -_log_softplus(z)


def _dlogp(d_out, head, which, weight):
    """Gradient of ``weight * sum(log P(which))`` w.r.t. the discriminator output."""
    g = np.zeros_like(d_out)
    if head == "logsoftmax2":
        g[..., 0 if which == SOURCE else 1] = weight
    else:
        z = d_out[..., 0]
        p = 1.0 / (1.0 + np.exp(-z))
        g[..., 0] = weight * ((1.0 - p) if which == SOURCE else -p)
    return g


def adversarial_losses(d_src_out, d_tgt_out, head="logsoftmax2"):
    """Discriminator loss and target-encoder loss.

    ``L_D = -mean log D_src(source codes) - mean log(1 - D_src(target codes))``
    and ``L_M = -mean log D_src(target codes)``.
    """
    ls_s, _ = domain_log_probs(d_src_out, head)
    ls_t, lt_t = domain_log_probs(d_tgt_out, head)
    return float(-ls_s.mean() - lt_t.mean()), float(-ls_t.mean())


def discriminator_accuracy(d_src_out, d_tgt_out, head="logsoftmax2"):
    """Balanced accuracy: the mean of the per-domain hit rates, so 0.5 means chance at any size ratio."""
    ls_s, lt_s = domain_log_probs(d_src_out, head)
    ls_t, lt_t = domain_log_probs(d_tgt_out, head)
    return 0.5 * (float((ls_s > lt_s).mean()) + float((lt_t > ls_t).mean()))


# --- forecasting model --------------------------------------------------------

@dataclass
class Forecaster:
    encoder: LayerStack
    regressor: LayerStack
    arch: ArchConfig = field(default_factory=ArchConfig)
    curve: list = field(default_factory=list)

    def predict(self, X, batch_size=256):
        return assemble_predict(self.encoder, self.regressor, X, batch_size)

    def trees(self):
        return {"encoder": self.encoder.state(), "regressor": self.regressor.state()}

    def copy(self):
        return Forecaster(clone_stack(self.encoder), clone_stack(self.regressor), copy.deepcopy(self.arch),
                          list(self.curve))


def _values(X):
    return X.values if isinstance(X, FeatureTensor) else np.asarray(X, dtype=float)


def assemble_predict(encoder, regressor, X, batch_size=256):
    """``regressor(encoder(X))`` in batches; returns ``[samples, lots]``."""
    x = _values(X)
    if x.ndim != 4:
        raise ShapeMismatch(f"expected [samples, time, lots, channels], got {x.shape}")
    out = [regressor.forward(encoder.forward(x[a:a + batch_size])) for a in range(0, len(x), batch_size)]
    if not out:
        return np.zeros((0, x.shape[2]))
    return np.concatenate(out, axis=0)


def encode(encoder, X, batch_size=256):
    x = _values(X)
    return np.concatenate([encoder.forward(x[a:a + batch_size]) for a in range(0, len(x), batch_size)])


def split_train_val(data, val_fraction):
    n = len(data)
    n_val = int(round(n * val_fraction))
    if n - n_val < 1:
        raise SeriesTooShort(f"{n} samples leave no training data")
    return data.take(np.arange(0, n - n_val)), (data.take(np.arange(n - n_val, n)) if n_val else None)


def _eval_rmse(model, data):
    pred = model.predict(data.X)
    return math.sqrt(float(np.mean((pred - data.Y.values) ** 2)))


def fit_regression(model, train, val, cfg, trainable=None):
    """Minibatch RMSE training with early stopping on validation RMSE.

    Returns the curve ``[{"epoch", "train_rmse", "val_rmse"}]``; the model is
    left at the best-validation parameters (or the last epoch without ``val``).
    """
    cfg.validate()
    stacks = trainable if trainable is not None else [model.encoder, model.regressor]
    opts = [Adam(s, lr=cfg.lr, clip_norm=cfg.clip_norm) for s in stacks]
    rng = np.random.default_rng(cfg.seed)
    x_all, y_all = train.X.values, train.Y.values
    curve = []
    best = (math.inf, None)
    stale = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x_all))
        total, count = 0.0, 0
        for a in range(0, len(order), cfg.batch_size):
            idx = order[a:a + cfg.batch_size]
            for s in (model.encoder, model.regressor):
                s.zero_grad()
            pred = model.regressor.forward(model.encoder.forward(x_all[idx]))
            loss, grad = rmse_loss(pred, y_all[idx])
            if not math.isfinite(loss):
                raise Divergence(f"training loss became {loss} at epoch {epoch}")
            model.encoder.backward(model.regressor.backward(grad))
            for opt in opts:
                opt.step()
            total += loss * len(idx)
            count += len(idx)
        row = {"epoch": epoch + 1, "train_rmse": total / count}
        if val is not None and len(val):
            v = _eval_rmse(model, val)
            if not math.isfinite(v):
                raise Divergence(f"validation loss became {v} at epoch {epoch}")
            row["val_rmse"] = v
            if v < best[0]:
                best = (v, (model.encoder.state(), model.regressor.state()))
                stale = 0
            else:
                stale += 1
        curve.append(row)
        if val is not None and cfg.patience and stale >= cfg.patience:
            break
    if best[1] is not None:
        model.encoder.load_state(best[1][0])
        model.regressor.load_state(best[1][1])
    return curve


def _shape_of(X):
    _, T, L, C = X.values.shape
    return T, L, C


def new_forecaster(arch, X, seed):
    T, L, C = _shape_of(X)
    rng = np.random.default_rng(seed)
    return Forecaster(build_encoder(arch, C, L, T, rng), build_regressor(arch, rng), arch)


def forecaster_from_trees(arch, dims, trees, calibrated=False):
    """Rebuild a :class:`Forecaster` from checkpoint trees; ``dims = (lookback, lots, channels)``."""
    T, L, C = dims
    rng = np.random.default_rng(0)
    model = Forecaster(build_encoder(arch, C, L, T, rng), build_regressor(arch, rng), arch)
    if calibrated:
        model.encoder.layers.insert(0, ChannelAffine(C))
    model.encoder.load_state(trees["encoder"])
    model.regressor.load_state(trees["regressor"])
    return model


def pretrain_source(data, cfg, arch=None, val=None):
    """Stage 1: train the source encoder and regressor on labeled source windows.

    Without ``val`` the last ``cfg.val_fraction`` of ``data`` (in time order)
    is held out for early stopping. Returns ``(encoder, regressor, curve)``.
    """
    arch = arch or ArchConfig()
    if data.Y is None:
        raise ValueError("pre-training needs labeled source data")
    if val is None:
        data, val = split_train_val(data, cfg.val_fraction)
    model = new_forecaster(arch, data.X, cfg.seed)
    model.curve = fit_regression(model, data, val, cfg)
    return model.encoder, model.regressor, model.curve


def baseline_train(kind, data, cfg, arch=None, val=None):
    """Train an ``MLP``, ``LSTM`` or ``ConvLSTM`` forecaster with the stage-1 loop."""
    arch = copy.deepcopy(arch or ArchConfig())
    arch.encoder = {"MLP": "mlp", "LSTM": "lstm", "CONVLSTM": "convlstm"}.get(kind.upper(), kind.lower())
    enc, reg, curve = pretrain_source(data, cfg, arch, val)
    return Forecaster(enc, reg, arch, curve)


def parameter_transfer(model, target_labeled, cfg, val=None):
    """Fine-tune a copy of a source-trained forecaster on a few labeled target windows."""
    if target_labeled.Y is None:
        raise ValueError("parameter transfer needs labeled target data")
    if len(target_labeled) == 0:
        raise SeriesTooShort("no labeled target windows")
    tuned = model.copy()
    if cfg.epochs == 0:
        return tuned
    tuned.curve = fit_regression(tuned, target_labeled, val, cfg)
    return tuned


@dataclass
class AdaptResult:
    target_encoder: LayerStack
    discriminator: LayerStack
    curves: list
    warnings: list


def adversarial_adapt(source_encoder, Xs, Xt, cfg, arch=None, target_init=None):
    """Stage 2: train a target encoder against a domain discriminator.

    The target encoder starts from the source encoder's parameters (or
    ``target_init``). Each step updates the discriminator
    ``cfg.d_steps_per_g_step`` times, then the target encoder once. The source
    encoder is only ever evaluated.
    """
    cfg.validate()
    arch = arch or ArchConfig()
    rng = np.random.default_rng(cfg.seed + 1)
    target = clone_stack(target_init or source_encoder, "target_encoder")
    xs_all, xt_all = _values(Xs), _values(Xt)
    if cfg.adapt_scope != "all" and not isinstance(target.layers[0], ChannelAffine):
        target.layers.insert(0, ChannelAffine(xt_all.shape[-1]))
    trainable = LayerStack(target.layers[:1]) if cfg.adapt_scope == "calibration" else target
    disc = build_discriminator(arch, np.random.default_rng(cfg.seed + 2), xs_all.shape[2])
    opt_d = Adam(disc, lr=cfg.lr if cfg.d_lr is None else cfg.d_lr, clip_norm=cfg.clip_norm)
    opt_m = Adam(trainable, lr=cfg.lr if cfg.m_lr is None else cfg.m_lr, clip_norm=cfg.clip_norm)
    bs = cfg.batch_size
    head = arch.disc_head
    curves, notes = [], []
    pinned = 0
    codes_s = encode(source_encoder, xs_all)  # the source encoder is frozen, so encode once
    for step in range(cfg.adapt_steps):
        cs = codes_s[rng.integers(0, len(codes_s), bs)]
        xt = xt_all[rng.integers(0, len(xt_all), bs)]
        target.zero_grad()
        ct = target.forward(xt)
        for _ in range(cfg.d_steps_per_g_step):
            disc.zero_grad()
            out_s = disc.forward(cs)
            disc.backward(_dlogp(out_s, head, SOURCE, -1.0 / out_s[..., 0].size))
            out_t = disc.forward(ct)
            disc.backward(_dlogp(out_t, head, TARGET, -1.0 / out_t[..., 0].size))
            opt_d.step()
        # the target encoder's forward cache is still valid: the discriminator steps never touch it
        disc.zero_grad()
        out_t = disc.forward(ct)
        target.backward(disc.backward(_dlogp(out_t, head, SOURCE, -1.0 / out_t[..., 0].size)))
        opt_m.step()
        out_s = disc.forward(cs)
        loss_d, loss_m = adversarial_losses(out_s, out_t, head)
        if not (math.isfinite(loss_d) and math.isfinite(loss_m)):
            raise Divergence(f"adversarial losses became non-finite at step {step}")
        acc = discriminator_accuracy(out_s, out_t, head)
        curves.append({"step": step + 1, "loss_d": loss_d, "loss_m": loss_m, "d_accuracy": acc})
        pinned = pinned + 1 if acc >= 1.0 else 0
        if cfg.collapse_patience and pinned == cfg.collapse_patience:
            msg = f"discriminator accuracy pinned at 1.0 for {pinned} steps (step {step + 1})"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            notes.append({"warning": "ModeCollapse", "step": step + 1})
    return AdaptResult(target, disc, curves, notes)


def held_out_accuracy(source_encoder, target_encoder, disc, Xs, Xt, arch=None):
    head = (arch or ArchConfig()).disc_head
    out_s = disc.forward(encode(source_encoder, Xs))
    out_t = disc.forward(encode(target_encoder, Xt))
    return discriminator_accuracy(out_s, out_t, head)


# --- historical average ---------------------------------------------------------

class HistoricalAverage:
    """Mean occupancy per lot keyed by ``(day_of_week, time_of_day)``; falls back to the lot mean."""

    def __init__(self, grid):
        if grid.values.shape[1] == 0:
            raise NoHistory("empty history")
        self.lot_ids = list(grid.lot_ids)
        self.index = {lid: n for n, lid in enumerate(self.lot_ids)}
        keys = [self._key(int(t)) for t in grid.timestamps]
        sums = defaultdict(float)
        counts = defaultdict(int)
        for n, key in enumerate(keys):
            col = grid.values[:, n]
            for li in range(len(self.lot_ids)):
                sums[(li, key)] += col[li]
                counts[(li, key)] += 1
        self.slot_mean = {k: sums[k] / counts[k] for k in sums}
        self.lot_mean = grid.values.mean(axis=1)

    @staticmethod
    def _key(t):
        return ((t // DAY_S + 3) % 7, t % DAY_S)

    def predict_one(self, lot_id, t):
        if lot_id not in self.index:
            raise NoHistory(f"no history for lot {lot_id}")
        li = self.index[lot_id]
        return float(self.slot_mean.get((li, self._key(int(t))), self.lot_mean[li]))

    def predict(self, target_times, lot_ids=None):
        """``[len(target_times), lots]`` predictions."""
        lot_ids = self.lot_ids if lot_ids is None else list(lot_ids)
        return np.array([[self.predict_one(lid, t) for lid in lot_ids] for t in target_times])


def baseline_ha(history, query):
    """Historical-average prediction for ``query = (lot_id, t)``."""
    lot_id, t = query
    return HistoricalAverage(history).predict_one(lot_id, t)


def describe_arch(arch):
    return asdict(arch)


__all__ = [
    "AdaptResult", "ArchConfig", "DomainDataset", "Forecaster", "HistoricalAverage", "SOURCE", "TARGET",
    "TrainConfig", "adversarial_adapt", "adversarial_losses", "assemble_predict", "baseline_ha",
    "baseline_train", "build_discriminator", "build_encoder", "build_regressor", "clone_stack",
    "discriminator_accuracy", "domain_log_probs", "encode", "fit_regression", "forecaster_from_trees", "held_out_accuracy",
    "new_forecaster", "parameter_transfer", "pretrain_source", "rmse_loss",
]
