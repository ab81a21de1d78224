"""Desk-scale trainer: AdamW, a one-cycle learning-rate schedule, seeded
restarts, and a finite-difference gradient check."""

from __future__ import annotations

import configparser
import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels as K
from .kernels import LossSpec
from .meshnet import MeshNetConfig, Model, WeightSet, init_model
from .metrics import confusion, dice

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    lr_max: float = 1e-3
    weight_decay: float = 3e-5
    eps: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 1

    def __post_init__(self):
        if self.lr_max < 0:
            raise ValueError("lr_max must be >= 0")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")


@dataclass(frozen=True)
class ScheduleConfig:
    lr_max: float = 1e-3
    warmup_frac: float = 0.01
    start_div: float = 100.0
    final_div: float = 1e4
    total_steps: int = 1

    def __post_init__(self):
        if not 0 < self.warmup_frac < 1:
            raise ValueError("warmup_frac must lie in (0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    @property
    def peak_step(self) -> int:
        # at least one step of ramp so the start and peak anchors are distinct
        if self.total_steps < 2:
            return 0
        return min(max(1, int(self.warmup_frac * self.total_steps)), self.total_steps - 1)


@dataclass(frozen=True)
class TrainRunConfig:
    epochs: int = 50
    restarts: int = 1
    seed: int = 0
    loss: LossSpec = field(default_factory=LossSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    warmup_frac: float = 0.01
    start_div: float = 100.0
    final_div: float = 1e4

    def __post_init__(self):
        if self.epochs < 1 or self.restarts < 1:
            raise ValueError("epochs and restarts must be >= 1")

    def schedule(self, steps_per_epoch: int) -> ScheduleConfig:
        return ScheduleConfig(
            self.optimizer.lr_max, self.warmup_frac, self.start_div, self.final_div, self.epochs * steps_per_epoch
        )


class NonFiniteError(FloatingPointError):
    def __init__(self, what: str, layer: int, role: str | None = None):
        where = f"layer {layer}" + (f" ({role})" if role else "")
        super().__init__(f"non-finite {what} at {where}")
        self.layer = layer
        self.role = role


def _annealing_cos(start: float, end: float, pct: float) -> float:
    # endpoints returned as given so the schedule anchors are exact
    if pct <= 0:
        return start
    if pct >= 1:
        return end
    return end + (start - end) / 2.0 * (math.cos(math.pi * pct) + 1)


def onecycle_lr(step: int, sched: ScheduleConfig) -> float:
    """Cosine ramp from lr_max/start_div up to lr_max at the peak step, then
    cosine decay to lr_max/final_div at the last step."""
    if not 0 <= step < sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps})")
    lo = sched.lr_max / sched.start_div
    peak = sched.peak_step
    if step <= peak:
        return lo if peak == 0 else _annealing_cos(lo, sched.lr_max, step / peak)
    last = sched.total_steps - 1
    return _annealing_cos(sched.lr_max, sched.lr_max / sched.final_div, (step - peak) / (last - peak))


@dataclass
class AdamWState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamWState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adamw_step(params, grads, state: AdamWState, opt: OptimizerConfig, lr_t: float, names=None):
    """One decoupled-weight-decay Adam update, in place.

    ``theta -= lr_t * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``
    """
    b1, b2 = opt.betas
    state.t += 1
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            layer, role = names[i] if names else (i, None)
            raise NonFiniteError("gradient", layer, role)
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p -= (lr_t * (m_hat / (np.sqrt(v_hat) + opt.eps) + opt.weight_decay * p)).astype(p.dtype, copy=False)
    return params, state


def _flat_grads(model: Model, grads) -> list[np.ndarray]:
    out = []
    for layer_id, role, _ in model.parameters():
        out.append(grads[layer_id][role])
    return out


def loss_and_grads(model: Model, x: np.ndarray, target: np.ndarray, loss: LossSpec, update_stats: bool = True):
    logits, cache = model.forward(x, mode="train", update_stats=update_stats, keep=True)
    value, g = K.weighted_smoothed_ce(logits, target, loss)
    if not math.isfinite(value):
        raise NonFiniteError("loss", len(model.layers) - 1)
    return value, model.backward(cache, g, mode="train")


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    return K.argmax_channels(model.forward(x, mode="eval"))


def validation_dice(model: Model, val_set) -> float:
    scores = [dice(confusion(predict(model, v.as_float32()), m.data)) for v, m in val_set]
    return float(np.mean(scores)) if scores else float("nan")


def _snapshot(model: Model) -> WeightSet:
    return WeightSet([(i, r, a.copy()) for i, r, a in model.weight_set()])


def train(model, dataset, cfg: TrainRunConfig, val_set=None, progress=None):
    """Train with ``cfg.restarts`` independently seeded runs.

    ``model`` is either a :class:`Model` (restart 0 starts from its weights,
    later restarts are re-initialised with ``seed + r``) or a
    :class:`MeshNetConfig`. Validation DICE is measured after each epoch on
    ``val_set`` (the training set if omitted); the weights with the best
    validation DICE over all restarts and epochs are returned together with
    the per-epoch history.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty training set")
    shapes = {v.shape for v, _ in dataset}
    if len(shapes) != 1:
        raise ValueError(f"all training volumes must share one shape, got {sorted(shapes)}")
    val_set = dataset if val_set is None else list(val_set)
    config = model.config if isinstance(model, Model) else model
    sched = cfg.schedule(len(dataset))
    inputs = [(v.as_float32(), np.asarray(m.data)) for v, m in dataset]

    history = []
    best = (-math.inf, None, None)
    for r in range(cfg.restarts):
        if r == 0 and isinstance(model, Model):
            net = model.copy()
        else:
            net = init_model(config, cfg.seed + r)
        rng = np.random.default_rng([cfg.seed, r])
        params = net.parameters()
        names = [(i, role) for i, role, _ in params]
        arrays = [a for _, _, a in params]
        state = AdamWState.zeros_like(arrays)
        step = 0
        for epoch in range(cfg.epochs):
            losses = []
            lr = 0.0
            for idx in rng.permutation(len(inputs)):
                x, target = inputs[idx]
                lr = onecycle_lr(step, sched)
                value, grads = loss_and_grads(net, x, target, cfg.loss)
                adamw_step(arrays, _flat_grads(net, grads), state, cfg.optimizer, lr, names)
                losses.append(value)
                step += 1
            val = validation_dice(net, val_set)
            row = {"epoch": epoch, "step": step, "lr": lr, "loss": float(np.mean(losses)), "val_dice": val, "restart": r}
            history.append(row)
            log.debug("restart %d epoch %d loss %.4f val dice %.4f", r, epoch, row["loss"], val)
            if progress is not None:
                progress(row)
            if val > best[0]:
                best = (val, _snapshot(net), row)
    return best[1], history


def write_history_csv(history, path) -> None:
    cols = ["epoch", "step", "lr", "loss", "val_dice", "restart"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=cols)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in cols})


# -- gradient check ------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    worst: tuple[int, str, tuple] | None
    finite: bool

    @property
    def passed(self) -> bool:
        return self.finite and self.max_rel_error < self.tolerance


def grad_check(
    model: Model,
    sample,
    tolerance: float = 1e-4,
    loss: LossSpec = LossSpec(),
    per_tensor: int = 4,
    h: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare backpropagated gradients with central differences.

    Runs in float64 on a copy of ``model``, sampling ``per_tensor`` entries of
    every trainable tensor. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    x, target = sample
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    target = np.asarray(getattr(target, "data", target))
    net = model.astype(np.float64)
    _, grads = loss_and_grads(net, x, target, loss, update_stats=False)

    def f():
        logits = net.forward(x, mode="train", update_stats=False)
        return K.weighted_smoothed_ce(logits, target, loss)[0]

    rng = np.random.default_rng(seed)
    worst_err, worst, n = 0.0, None, 0
    finite = all(np.all(np.isfinite(g)) for entry in grads for g in entry.values())
    for layer_id, role, arr in net.parameters():
        analytic = grads[layer_id][role]
        flat = rng.choice(arr.size, size=min(per_tensor, arr.size), replace=False)
        for fi in flat:
            idx = np.unravel_index(fi, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            up = f()
            arr[idx] = orig - h
            down = f()
            arr[idx] = orig
            numeric = (up - down) / (2 * h)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if not math.isfinite(err):
                finite = False
            elif err > worst_err:
                worst_err, worst = err, (layer_id, role, tuple(int(i) for i in idx))
            n += 1
    return GradCheckReport(worst_err, tolerance, n, worst, finite)


# -- config files --------------------------------------------------------------

CONFIG_SCHEMA = """\
[model]
channels = 5                 ; int >= 1
dilations = 1,2,4,8,16,16,8,4,2

[run]
epochs = 50
restarts = 10
seed = 0

[optimizer]
lr = 0.001
weight_decay = 3e-5
eps = 1e-4
beta1 = 0.9
beta2 = 0.999

[schedule]
warmup_frac = 0.01
start_div = 100
final_div = 1e4

[loss]
label_smoothing = 0.01
background_weight = 0.5
lesion_weight = 1.0
"""


def parse_train_config(text: str) -> tuple[MeshNetConfig, TrainRunConfig]:
    """Parse an INI-style training config (see ``CONFIG_SCHEMA``); missing keys
    take the defaults shown there."""
    defaults = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    defaults.read_string(CONFIG_SCHEMA)
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read_dict(defaults)
    cp.read_string(text)
    known = {s: set(defaults[s]) for s in defaults.sections()}
    for section in cp.sections():
        if section not in known:
            raise ValueError(f"unknown config section [{section}]")
        extra = set(cp[section]) - known[section]
        if extra:
            raise ValueError(f"unknown keys in [{section}]: {sorted(extra)}")
    model = MeshNetConfig(
        channels=cp.getint("model", "channels"),
        dilations=tuple(int(d) for d in cp.get("model", "dilations").split(",")),
    )
    opt = OptimizerConfig(
        lr_max=cp.getfloat("optimizer", "lr"),
        weight_decay=cp.getfloat("optimizer", "weight_decay"),
        eps=cp.getfloat("optimizer", "eps"),
        betas=(cp.getfloat("optimizer", "beta1"), cp.getfloat("optimizer", "beta2")),
    )
    run = TrainRunConfig(
        epochs=cp.getint("run", "epochs"),
        restarts=cp.getint("run", "restarts"),
        seed=cp.getint("run", "seed"),
        loss=LossSpec(
            cp.getfloat("loss", "label_smoothing"),
            (cp.getfloat("loss", "background_weight"), cp.getfloat("loss", "lesion_weight")),
        ),
        optimizer=opt,
        warmup_frac=cp.getfloat("schedule", "warmup_frac"),
        start_div=cp.getfloat("schedule", "start_div"),
        final_div=cp.getfloat("schedule", "final_div"),
    )
    return model, run


def load_train_config(path) -> tuple[MeshNetConfig, TrainRunConfig]:
    with open(path) as f:
        return parse_train_config(f.read())


def with_search_config(cfg: TrainRunConfig, config: dict, epochs: int) -> TrainRunConfig:
    """Apply a sampled hyperparameter configuration to a base run config."""
    return replace(
        cfg,
        epochs=epochs,
        optimizer=replace(cfg.optimizer, lr_max=config["lr"], weight_decay=config["weight_decay"]),
        loss=LossSpec(cfg.loss.label_smoothing, (config["background_weight"], cfg.loss.class_weights[1])),
        warmup_frac=config["warmup_frac"],
    )
