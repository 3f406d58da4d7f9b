"""Optimization loop: AdamW with cosine decay, EMA shadow weights,
per-epoch evaluation, metrics logging and checkpointing."""
from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .data import DataError, Sample, batches, select
from .model import NUM_CLASSES, EmoNeXt, ModelConfig, build, forward, total_loss
from .rng import DROP_PATH, stream
from .tensor import ContractError, Tensor, no_grad

logger = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    min_lr: float = 0.0
    weight_decay: float = 0.05
    ema_decay: float = 0.999
    seed: int = 0
    workers: int = 0
    eval_batch_size: int = 64
    detach_sa: bool = False


# ---------------------------------------------------------------------------
# schedule, optimizer, EMA
# ---------------------------------------------------------------------------


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    if total_steps < 1:
        raise ContractError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside 0..{total_steps}")
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    no_decay: frozenset[int] = frozenset()  # parameter indices exempt from weight decay


def init_optim(params: Sequence[Tensor], **hyper) -> OptimState:
    return OptimState(
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
        **hyper,
    )


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimState, lr_t: float) -> None:
    """In-place AdamW update with decoupled weight decay and bias correction."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError(f"got {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ContractError(f"parameter {i}: shape {p.shape} vs grad {g.shape} vs moment {state.m[i].shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay and i not in state.no_decay:
            p.data *= 1.0 - lr_t * state.weight_decay
        p.data -= lr_t * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class EmaState:
    shadow: list[np.ndarray]
    decay: float = 0.999


def init_ema(params: Sequence[Tensor], decay: float = 0.999) -> EmaState:
    return EmaState(shadow=[p.data.copy() for p in params], decay=decay)


def ema_update(ema: EmaState, params: Sequence[Tensor]) -> None:
    d = ema.decay
    for s, p in zip(ema.shadow, params):
        if s.shape != p.shape:
            raise ContractError(f"EMA shadow shape {s.shape} != parameter shape {p.shape}")
        s *= d
        s += (1.0 - d) * p.data


@contextlib.contextmanager
def swapped(params: Sequence[Tensor], arrays: Sequence[np.ndarray]):
    """Temporarily evaluate with ``arrays`` as parameter values."""
    saved = [p.data for p in params]
    for p, a in zip(params, arrays):
        p.data = a
    try:
        yield
    finally:
        for p, a in zip(params, saved):
            p.data = a


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # [true][predicted]
    loss_ce: float

    @property
    def precision(self) -> np.ndarray:
        col = self.confusion.sum(axis=0)
        return np.divide(np.diag(self.confusion), col, out=np.zeros(len(col)), where=col > 0)

    @property
    def recall(self) -> np.ndarray:
        row = self.confusion.sum(axis=1)
        return np.divide(np.diag(self.confusion), row, out=np.zeros(len(row)), where=row > 0)


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, k: int = NUM_CLASSES) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def accuracy_from(cm: np.ndarray) -> float:
    total = int(cm.sum())
    return float(np.trace(cm)) / total if total else float("nan")


def evaluate(
    model: EmoNeXt,
    samples: Sequence[Sample],
    ema: EmaState | None = None,
    batch_size: int = 64,
    workers: int = 0,
) -> EvalResult:
    """Deterministic, augmentation-free evaluation; uses EMA weights if given."""
    if not samples:
        raise DataError("cannot evaluate on an empty split")
    cfg = model.config
    params = model.parameters()
    shadow = ema.shadow if ema is not None else [p.data for p in params]
    cm = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    ce_sum = 0.0
    with swapped(params, shadow), no_grad():
        for batch in batches(samples, batch_size, image_size=cfg.input_size, train=False, workers=workers):
            out = forward(model, batch.x, training=False)
            pred = np.argmax(out.logits.data, axis=-1)
            cm += confusion_matrix(batch.y, pred)
            parts = total_loss(out.logits, batch.y, out.weights, 0.0, 0.0)
            ce_sum += float(parts.ce.data) * len(batch.y)
    return EvalResult(accuracy=accuracy_from(cm), confusion=cm, loss_ce=ce_sum / len(samples))


@dataclass
class EpochMetrics:
    epoch: int
    step: int
    lr: float
    loss_total: float
    loss_ce: float
    loss_sa: float
    train_acc: float
    val_acc: float | None
    confusion: list[int]

    def to_json(self) -> str:
        return json.dumps(asdict(self))


# ---------------------------------------------------------------------------
# training state and persistence
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    model: EmoNeXt
    optim: OptimState
    ema: EmaState
    step: int = 0
    epoch: int = 0
    seed: int = 0
    history: list[EpochMetrics] = field(default_factory=list)


def new_state(model: EmoNeXt, cfg: TrainConfig) -> TrainState:
    params = model.named_parameters()
    no_decay = frozenset(i for i, (_, p) in enumerate(params) if p.ndim <= 1)
    optim = init_optim(
        [p for _, p in params], lr=cfg.lr, weight_decay=cfg.weight_decay, no_decay=no_decay
    )
    return TrainState(model=model, optim=optim, ema=init_ema([p for _, p in params], cfg.ema_decay), seed=cfg.seed)


def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    named = state.model.named_parameters()
    for name, p in named:
        out[name] = p.data
    for (name, _), m, v in zip(named, state.optim.m, state.optim.v):
        out[f"optim/m/{name}"] = m
        out[f"optim/v/{name}"] = v
    for (name, _), s in zip(named, state.ema.shadow):
        out[f"ema/{name}"] = s
    return out


def save_checkpoint(path: str | Path, state: TrainState, extra: dict | None = None) -> None:
    o = state.optim
    meta = {
        "config": state.model.config.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "seed": state.seed,
        "optim": {
            "t": o.t, "lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps,
            "weight_decay": o.weight_decay, "no_decay": sorted(o.no_decay),
        },
        "ema_decay": state.ema.decay,
    }  # fmt: skip
    if extra:
        meta.update(extra)
    checkpoint.save(path, state_tensors(state), meta)


def restore(model: EmoNeXt, ckpt: checkpoint.Checkpoint) -> TrainState:
    """Load parameters, optimizer moments and EMA into ``model``.

    Raises ``checkpoint.FormatError`` naming the first tensor whose shape
    does not match the model.
    """
    named = model.named_parameters()
    t = ckpt.tensors
    for name, p in named:
        for key in (name, f"optim/m/{name}", f"optim/v/{name}", f"ema/{name}"):
            if key not in t:
                raise checkpoint.FormatError(f"checkpoint is missing tensor {key!r}")
            if t[key].shape != p.shape:
                raise checkpoint.FormatError(
                    f"shape mismatch for {key!r}: checkpoint {t[key].shape} vs model {p.shape}"
                )
    for name, p in named:
        p.data = t[name].copy()
        p.grad = None
    meta = ckpt.metadata
    om = meta.get("optim", {})
    optim = OptimState(
        m=[t[f"optim/m/{n}"].copy() for n, _ in named],
        v=[t[f"optim/v/{n}"].copy() for n, _ in named],
        t=int(om.get("t", 0)),
        lr=float(om.get("lr", 1e-4)),
        beta1=float(om.get("beta1", 0.9)),
        beta2=float(om.get("beta2", 0.999)),
        eps=float(om.get("eps", 1e-8)),
        weight_decay=float(om.get("weight_decay", 0.05)),
        no_decay=frozenset(om.get("no_decay", [])),
    )
    ema = EmaState(shadow=[t[f"ema/{n}"].copy() for n, _ in named], decay=float(meta.get("ema_decay", 0.999)))
    return TrainState(
        model=model,
        optim=optim,
        ema=ema,
        step=int(meta.get("step", 0)),
        epoch=int(meta.get("epoch", 0)),
        seed=int(meta.get("seed", 0)),
    )


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> TrainState:
    """Rebuild a model from the checkpoint (or ``config`` if given) and restore it."""
    ckpt = checkpoint.load(path)
    if config is None:
        if "config" not in ckpt.metadata:
            raise checkpoint.FormatError(f"{path}: metadata carries no model config")
        config = ModelConfig.from_dict(ckpt.metadata["config"])
    first = next(iter(ckpt.tensors.values()), None)
    dtype = first.dtype if first is not None else np.float32
    return restore(build(config, rng=0, dtype=dtype), ckpt)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


def train(
    model: EmoNeXt,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainState:
    """Run the full recipe over the Training rows of ``samples``.

    Validation (PublicTest) is evaluated with EMA weights after every epoch.
    With ``out_dir`` set, writes ``metrics.jsonl``, ``last.emnx`` and
    ``best.emnx`` (best validation accuracy; training accuracy when the data
    has no validation rows).
    """
    train_set = select(samples, "train")
    val_set = select(samples, "val")
    if not train_set:
        raise DataError("no Training rows to train on")
    mcfg = model.config
    state = new_state(model, cfg)
    params = model.parameters()
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        metrics_path.write_text("")
    best_score = -1.0

    for epoch in range(cfg.epochs):
        sums = np.zeros(3)
        seen = 0
        running_cm = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
        lr_t = cfg.lr
        for batch in batches(
            train_set, cfg.batch_size, cfg.seed, epoch, image_size=mcfg.input_size, train=True, workers=cfg.workers
        ):
            rng = stream(cfg.seed, DROP_PATH, state.step)
            res = forward(model, batch.x, training=True, rng=rng)
            parts = total_loss(res.logits, batch.y, res.weights, mcfg.sa_lambda, mcfg.label_smoothing, cfg.detach_sa)
            loss = float(parts.total.data)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at step {state.step} (epoch {epoch})")
            parts.total.backward()
            lr_t = cosine_lr(state.step, total_steps, cfg.lr, cfg.min_lr)
            adamw_step(params, [p.grad for p in params], state.optim, lr_t)
            ema_update(state.ema, params)
            model.zero_grad()

            n = len(batch.y)
            sums += n * np.array([loss, float(parts.ce.data), float(parts.sa.data)])
            seen += n
            running_cm += confusion_matrix(batch.y, np.argmax(res.logits.data, axis=-1))
            state.step += 1
        state.epoch = epoch + 1

        val = evaluate(model, val_set, state.ema, cfg.eval_batch_size, cfg.workers) if val_set else None
        train_acc = accuracy_from(running_cm)
        metrics = EpochMetrics(
            epoch=epoch,
            step=state.step,
            lr=lr_t,
            loss_total=sums[0] / seen,
            loss_ce=sums[1] / seen,
            loss_sa=sums[2] / seen,
            train_acc=train_acc,
            val_acc=val.accuracy if val else None,
            confusion=(val.confusion if val else running_cm).reshape(-1).tolist(),
        )
        state.history.append(metrics)
        logger.info(
            "epoch %d step %d lr %.3g loss %.4f (ce %.4f sa %.3g) train_acc %.4f val_acc %s",
            epoch, state.step, lr_t, metrics.loss_total, metrics.loss_ce, metrics.loss_sa,
            train_acc, "n/a" if val is None else f"{val.accuracy:.4f}",
        )  # fmt: skip
        if out is not None:
            with metrics_path.open("a") as fh:
                fh.write(metrics.to_json() + "\n")
            extra = {"val_acc": metrics.val_acc, "train_acc": train_acc, "eval_batch_size": cfg.eval_batch_size}
            save_checkpoint(out / "last.emnx", state, extra)
            score = val.accuracy if val else train_acc
            if score > best_score:
                best_score = score
                save_checkpoint(out / "best.emnx", state, extra)
    return state
