"""Joint training of network weights and mixture parameters."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .datagen import fit_feature_prior
from .gnn import Architecture, CgnnModel, save_model
from .grid import build_adjacency

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch, value):
        self.epoch = epoch
        super().__init__(f"loss became {value} at epoch {epoch}")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 10
    learning_rate: float = 1e-3
    patience: int = 20
    min_delta: float = 0.0
    validation_fraction: float = 0.1
    seed: int = 0
    optimizer: str = "adam"
    # halve the rate after this many epochs without validation improvement (0 disables)
    lr_plateau: int = 10
    lr_factor: float = 0.5
    min_lr: float = 1e-5
    checkpoint_every: int = 0          # 0 disables periodic checkpoints
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    initial_val_loss: float = float("nan")
    best_epoch: int = 0
    stopped_epoch: int = 0
    early_stopped: bool = False
    lr_changes: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2)


def split_indices(n, fraction, seed):
    """Seeded shuffle; returns (train, validation) index arrays."""
    order = np.random.default_rng([seed, 7]).permutation(n)
    n_val = max(1, int(round(fraction * n)))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def channel_scaling(targets):
    """Per-channel mean and standard deviation over every bus and snapshot."""
    flat = np.asarray(targets).reshape(-1, 2)
    scale = flat.std(axis=0)
    return flat.mean(axis=0), np.where(scale > 0, scale, 1.0)


def init_model(dataset, grid, arch=None, seed=0, train_idx=None, standardize=True):
    """Fresh model whose mixture layer starts from EM fits on training-split true states.

    With ``standardize`` the model's fixed feature scaling comes from the
    training targets; otherwise it is the identity.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    arch = arch or Architecture()
    idx = np.arange(len(dataset)) if train_idx is None else np.asarray(train_idx)
    y = dataset.targets()[idx]
    center, scale = channel_scaling(y) if standardize else (np.zeros(2), np.ones(2))
    z = (y - center) / scale
    prior = fit_feature_prior(z[..., 0], z[..., 1], c=arch.components, seed=seed)
    # head bias starts at the mean target so early epochs fit shape, not offset
    bias = z.reshape(-1, 2).mean(axis=0)
    return CgnnModel.init(build_adjacency(grid), dataset.mask, prior, arch, seed, bias, dataset.grid_hash,
                          center, scale)


def mse(pred, target):
    """Mean squared error over every entry; works for arrays and tape tensors."""
    if tuple(pred.shape) != tuple(np.shape(target)):
        raise nx.ShapeError(f"prediction {tuple(pred.shape)} and target {np.shape(target)} differ")
    if isinstance(pred, nx.Tensor):
        return nx.mean(nx.square(pred - np.asarray(target)))
    return float(np.mean((np.asarray(pred) - target) ** 2))


def evaluate_loss(model, x, z, mask=None, batch=256):
    """MSE in the model's standardized units; ``z`` is already standardized."""
    total = 0.0
    with nx.no_tape():
        for s in range(0, len(x), batch):
            p = model.forward(x[s:s + batch], mask).value
            total += float(np.sum((p - z[s:s + batch]) ** 2))
    return total / z.size


def loss_and_grad(model, x, y, mask=None):
    """Loss and per-parameter gradients for one batch; ``y`` in standardized units."""
    leaves = model.leaves()
    with nx.Tape() as tape:
        loss = mse(model.forward(x, mask, tensors=leaves), y)
    grads = nx.gradient(tape, loss, list(leaves.values()))
    return float(loss.value), dict(zip(leaves, grads))


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m[k] = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


class Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for k, g in grads.items():
            params[k] = params[k] - self.lr * g
        return params


def fit(model, dataset, config=None, progress=None):
    """Train in place and return ``(model, report)``; the model ends at its best validation epoch."""
    config = config or TrainConfig()
    x_all, y_all = dataset.features(), model.standardize(dataset.targets())
    tr, va = split_indices(len(dataset), config.validation_fraction, config.seed)
    if len(tr) < config.batch_size or len(va) < 1:
        raise ValueError(f"split of {len(dataset)} snapshots too small for batch size {config.batch_size}")
    xt, yt, xv, yv = x_all[tr], y_all[tr], x_all[va], y_all[va]
    opt = Adam(config.learning_rate) if config.optimizer == "adam" else Sgd(config.learning_rate)
    rng = np.random.default_rng([config.seed, 11])

    report = TrainReport()
    best = evaluate_loss(model, xv, yv)
    report.initial_val_loss = best
    best_params, stale, flat = model.get_flat(), 0, 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(tr))
        params = model.get_flat()
        running = 0.0
        for s in range(0, len(order), config.batch_size):
            b = order[s:s + config.batch_size]
            loss, grads = loss_and_grad(model, xt[b], yt[b])
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            running += loss * len(b)
            params = opt.step(params, grads)
            model.set_flat(params)
        val = evaluate_loss(model, xv, yv)
        if not math.isfinite(val):
            raise TrainingDiverged(epoch, val)
        report.train_loss.append(running / len(order))
        report.val_loss.append(val)
        report.epoch_seconds.append(time.perf_counter() - t0)
        report.stopped_epoch = epoch
        if val < best - config.min_delta:
            best, best_params, stale, flat = val, model.get_flat(), 0, 0
            report.best_epoch = epoch
            if config.checkpoint_dir:
                save_model(f"{config.checkpoint_dir}/best.ckpt", model)
        else:
            stale += 1
            flat += 1
            if config.lr_plateau and flat >= config.lr_plateau and opt.lr > config.min_lr:
                opt.lr = max(opt.lr * config.lr_factor, config.min_lr)
                flat = 0
                report.lr_changes.append([epoch, opt.lr])
        if config.checkpoint_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_model(f"{config.checkpoint_dir}/epoch{epoch:05d}.ckpt", model)
        if progress:
            progress(epoch, report.train_loss[-1], val)
        log.debug("epoch %d train %.3e val %.3e", epoch, report.train_loss[-1], val)
        if stale >= config.patience:
            report.early_stopped = True
            break
    model.set_flat(best_params)
    report.summary = {"best_val_loss": best, "parameters": model.parameter_count(),
                      "train_snapshots": int(len(tr)), "val_snapshots": int(len(va))}
    return model, report
