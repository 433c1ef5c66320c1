"""Adam optimisation, the epoch loop, grid search, and checkpointing.

Training is fully deterministic under a seed: batch order derives from
(seed, epoch), dropout masks from (seed, epoch, step), so an interrupted
run resumed from a checkpoint walks the exact trajectory of an
uninterrupted one.

The loss matches the head: per-unit binary cross-entropy for the two-unit
sigmoid head, categorical cross-entropy for the softmax head. A
divergence guard aborts on NaN loss or on a loss stuck above ten times
its initial value for three consecutive epochs.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import DatasetManifest, batch_iter
from .errors import DivergenceError, NanGradientError, WeightShapeError
from .model import ModelConfig, ModelState, init_model_state, model_forward, predict
from .preprocessing import AugmentPolicy
from .rng import Rng
from .weights_io import read_checkpoint, write_checkpoint

EpochRecord = tuple[int, float, float, float, float, float]
# (epoch, train_loss, train_acc, val_loss, val_acc, wall_time_s)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def for_state(state: ModelState, lr: float = 1e-3) -> "AdamState":
        opt = AdamState(lr=lr)
        for name, p in state.params.items():
            opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        return opt


def adam_step(state: ModelState, grads: dict[str, np.ndarray], opt: AdamState) -> None:
    """One Adam update over the non-frozen parameters; frozen ones untouched."""
    for name, g in grads.items():
        if name not in state.frozen and np.isnan(g).any():
            raise NanGradientError(f"NaN gradient for parameter {name!r}")
    opt.t += 1
    c1 = 1.0 - opt.beta1 ** opt.t
    c2 = 1.0 - opt.beta2 ** opt.t
    for name, p in state.params.items():
        if name in state.frozen:
            continue
        g = grads.get(name)
        if g is None:
            continue
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * np.square(g)
        p.data -= (opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)).astype(p.data.dtype)


def freeze_backbone(state: ModelState, frozen: bool) -> ModelState:
    """Add or remove every backbone parameter from the frozen set (in place)."""
    backbone = {name for name in state.params if name.startswith("backbone.")}
    if frozen:
        state.frozen |= backbone
    else:
        state.frozen -= backbone
    return state


@dataclass
class TrainSettings:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    augment_policy: AugmentPolicy | None = None
    checkpoint_dir: str | None = None
    checkpoint_every: int = 10
    freeze: bool = True
    divergence_factor: float = 10.0
    divergence_patience: int = 3


def _loss_fn(config: ModelConfig):
    return (T.binary_cross_entropy if config.output_activation == "sigmoid"
            else T.cross_entropy)


class DivergenceGuard:
    """Aborts when the loss is NaN or stuck above factor x its initial value.

    The first observed loss is the baseline; a streak of `patience`
    consecutive epochs above factor x baseline raises, and any epoch back
    inside the budget resets the streak.
    """

    def __init__(self, factor: float = 10.0, patience: int = 3,
                 initial: float | None = None):
        self.factor = factor
        self.patience = patience
        self.initial = initial
        self.streak = 0

    def observe(self, epoch: int, loss: float) -> None:
        if np.isnan(loss):
            raise DivergenceError(f"loss became NaN at epoch {epoch}")
        if self.initial is None:
            self.initial = loss
            return
        if loss > self.factor * max(self.initial, 1e-12):
            self.streak += 1
            if self.streak >= self.patience:
                raise DivergenceError(
                    f"train loss {loss:.4g} stayed above {self.factor:g}x its "
                    f"initial value {self.initial:.4g} for {self.streak} consecutive epochs"
                )
        else:
            self.streak = 0


def evaluate_split(config: ModelConfig, state: ModelState, manifest: DatasetManifest,
                   split: str, batch_size: int, rng: Rng) -> tuple[float, float]:
    """(mean loss, accuracy) of a split in eval mode, no augmentation."""
    loss_fn = _loss_fn(config)
    h, w = config.input_shape[:2]
    total_loss = 0.0
    correct = 0
    n = 0
    for xb, yb in batch_iter(manifest, split, batch_size=batch_size, shuffle=False,
                             rng=rng, image_hw=(h, w), augment_policy=None):
        probs = model_forward(config, state, xb, "eval")
        loss = loss_fn(probs, yb)
        k = xb.shape[0]
        total_loss += float(loss.data) * k
        correct += int((predict(probs) == yb.data.argmax(axis=1)).sum())
        n += k
    return total_loss / n, correct / n


def train(config: ModelConfig, manifest: DatasetManifest, rng: Rng,
          settings: TrainSettings | None = None, state: ModelState | None = None,
          opt: AdamState | None = None, history: list[EpochRecord] | None = None,
          start_epoch: int = 1) -> tuple[ModelState, list[EpochRecord]]:
    """Run the epoch loop; returns the final state and per-epoch history.

    Pass `state`/`opt`/`history`/`start_epoch` to resume from a
    checkpoint; everything else is derived from the rng exactly as in an
    uninterrupted run.
    """
    settings = settings or TrainSettings()
    loss_fn = _loss_fn(config)
    h, w = config.input_shape[:2]

    if state is None:
        state = init_model_state(config, rng.derive("init"))
        freeze_backbone(state, settings.freeze)
    if opt is None:
        opt = AdamState.for_state(state, lr=settings.lr)
    history = list(history) if history is not None else []

    guard = DivergenceGuard(settings.divergence_factor, settings.divergence_patience,
                            initial=history[0][1] if history else None)
    best_val_acc = max((rec[4] for rec in history), default=-1.0)

    for epoch in range(start_epoch, settings.epochs + 1):
        t0 = time.time()
        step = 0
        for xb, yb in batch_iter(manifest, "train", batch_size=settings.batch_size,
                                 shuffle=True, rng=rng, epoch=epoch, image_hw=(h, w),
                                 augment_policy=settings.augment_policy):
            with T.Tape() as tape:
                probs = model_forward(config, state, xb, "train",
                                      rng=rng.derive("dropout", epoch, step))
                loss = loss_fn(probs, yb)
            T.backward(loss, tape)
            grads = {name: p.grad for name, p in state.params.items()
                     if p.grad is not None and name not in state.frozen}
            adam_step(state, grads, opt)
            step += 1

        train_loss, train_acc = evaluate_split(config, state, manifest, "train",
                                               settings.batch_size, rng)
        val_loss, val_acc = evaluate_split(config, state, manifest, "val",
                                           settings.batch_size, rng)
        history.append((epoch, train_loss, train_acc, val_loss, val_acc, time.time() - t0))

        if np.isnan(val_loss):
            raise DivergenceError(f"validation loss became NaN at epoch {epoch}")
        guard.observe(epoch, train_loss)

        if settings.checkpoint_dir:
            is_best = val_acc > best_val_acc
            best_val_acc = max(best_val_acc, val_acc)
            if epoch % settings.checkpoint_every == 0:
                checkpoint_save(state, opt, history, config, rng.seed, epoch + 1,
                                os.path.join(settings.checkpoint_dir,
                                             f"ckpt-epoch{epoch:04d}.bin"))
            if is_best:
                checkpoint_save(state, opt, history, config, rng.seed, epoch + 1,
                                os.path.join(settings.checkpoint_dir, "ckpt-best.bin"))

    if settings.checkpoint_dir:
        checkpoint_save(state, opt, history, config, rng.seed, settings.epochs + 1,
                        os.path.join(settings.checkpoint_dir, "ckpt-final.bin"))
    return state, history


# ---------------------------------------------------------------------------
# grid search


@dataclass(frozen=True)
class GridSpec:
    lr_candidates: tuple[float, ...] = (1e-2, 1e-3, 1e-4)
    batch_candidates: tuple[int, ...] = (16, 32)

    def __post_init__(self):
        if not self.lr_candidates or not self.batch_candidates:
            raise ValueError("grid candidate lists must be nonempty")


@dataclass
class GridCell:
    lr: float
    batch_size: int
    val_acc: float
    diverged: bool
    history: list[EpochRecord]


@dataclass
class GridResult:
    cells: list[GridCell]
    best: GridCell


def grid_search(grid: GridSpec, config: ModelConfig, manifest: DatasetManifest,
                rng: Rng, settings: TrainSettings | None = None) -> GridResult:
    """Train one model per (lr, batch) cell on the shared pre-split manifest.

    Selection: highest final-epoch validation accuracy; ties break toward
    lower lr, then smaller batch. A diverging cell is recorded as such
    without aborting the others.
    """
    settings = settings or TrainSettings()
    cells: list[GridCell] = []
    for i, lr in enumerate(grid.lr_candidates):
        for j, batch_size in enumerate(grid.batch_candidates):
            cell_settings = replace(settings, lr=lr, batch_size=batch_size,
                                    checkpoint_dir=None)
            cell_rng = rng.derive("grid", i, j)
            try:
                _, history = train(config, manifest, cell_rng, settings=cell_settings)
                val_acc = history[-1][4] if history else 0.0
                cells.append(GridCell(lr, batch_size, val_acc, False, history))
            except DivergenceError:
                cells.append(GridCell(lr, batch_size, float("-inf"), True, []))
    best = min(cells, key=lambda c: (-c.val_acc, c.lr, c.batch_size))
    return GridResult(cells=cells, best=best)


# ---------------------------------------------------------------------------
# checkpoints


def _config_to_json(config: ModelConfig) -> str:
    return json.dumps(asdict(config), sort_keys=True)


def config_from_json(text: str) -> ModelConfig:
    from .model import BackboneSpec, ConvBlockSpec, StageSpec

    raw = json.loads(text)
    raw["input_shape"] = tuple(raw["input_shape"])
    bb = raw["backbone"]
    bb["stages"] = tuple(StageSpec(**s) for s in bb["stages"])
    raw["backbone"] = BackboneSpec(**bb)
    raw["stack"] = tuple(ConvBlockSpec(**blk) for blk in raw["stack"])
    return ModelConfig(**raw)


def checkpoint_save(state: ModelState, opt: AdamState, history: list[EpochRecord],
                    config: ModelConfig, seed: int, next_epoch: int, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    write_checkpoint(
        path,
        params=state.params,
        frozen=state.frozen,
        opt_t=opt.t,
        opt_hyper=(opt.lr, opt.beta1, opt.beta2, opt.eps),
        moments_m=opt.m,
        moments_v=opt.v,
        history_rows=history,
        seed=seed,
        next_epoch=next_epoch,
        config_json=_config_to_json(config),
    )


@dataclass
class Checkpoint:
    state: ModelState
    opt: AdamState
    history: list[EpochRecord]
    config: ModelConfig
    seed: int
    next_epoch: int


def checkpoint_load(path: str, expected_config: ModelConfig | None = None) -> Checkpoint:
    """Restore a checkpoint; with `expected_config`, shapes must match it."""
    raw = read_checkpoint(path)
    config = config_from_json(raw["meta"]["config"])
    if expected_config is not None and config != expected_config:
        probe = init_model_state(expected_config, Rng(0))
        for name in sorted(set(probe.params) | set(raw["weights"])):
            got = raw["weights"].get(name)
            want = probe.params.get(name)
            if got is None or want is None or got.shape != want.data.shape:
                raise WeightShapeError(
                    f"checkpoint does not fit target config at parameter {name!r}"
                )
        config = expected_config
    params = {name: T.Tensor(arr, requires_grad=True)
              for name, arr in raw["weights"].items()}
    state = ModelState(params, frozen=set(raw["meta"]["frozen"]))
    lr, beta1, beta2, eps = raw["opt_hyper"]
    opt = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=raw["opt_t"],
                    m=raw["moments_m"], v=raw["moments_v"])
    history = [(int(e), tl, ta, vl, va, wall) for e, tl, ta, vl, va, wall in raw["history"]]
    return Checkpoint(state=state, opt=opt, history=history, config=config,
                      seed=int(raw["meta"]["seed"]), next_epoch=int(raw["meta"]["next_epoch"]))
