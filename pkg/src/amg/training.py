"""Optimization loop, evaluation metric, and the pointwise MLP baseline.

Training is per-sample with gradient accumulation over small chunks
(meshes vary in size, so there is no intra-tape batching); the epoch
shuffle derives from (seed, epoch) alone, which together with the
optimizer state stored in checkpoints makes any run resumable with a
bitwise-identical continuation.

The metrics stream is an append-only CSV with a stable column order;
wall_time is the one clock-dependent column and sits last so the
deterministic prefix of each row can be compared directly.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tape, Tensor
from .datagen import Dataset, SampleRecord
from .graphformer import uniform_init
from .graphs import PositionalPlan
from .model import save_checkpoint

__all__ = [
    "TrainConfig",
    "MetricsRecord",
    "TrainingAbort",
    "mse_objective",
    "relative_l2",
    "evaluate_records",
    "AdamState",
    "adam_step",
    "lr_schedule",
    "train",
    "MLPConfig",
    "MLPBaseline",
]


@dataclass
class TrainConfig:
    epochs: int = 500
    lr: float = 1e-3
    decay_gamma: float = 0.5
    decay_interval: int = 100
    batch_size: int = 4
    seed: int = 0
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.decay_interval < 1:
            raise ValueError("invalid training configuration")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("invalid training configuration")


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    val_rel_l2: list[float]
    lr: float
    wall_time: float

    def row(self) -> list[str]:
        return ([str(self.epoch), repr(self.train_loss)]
                + [repr(v) for v in self.val_rel_l2]
                + [repr(self.lr), repr(self.wall_time)])

    @staticmethod
    def header(channel_names: list[str]) -> list[str]:
        return (["epoch", "train_loss"]
                + [f"val_rel_l2_{c}" for c in channel_names]
                + ["lr", "wall_time"])


class TrainingAbort(RuntimeError):
    """Non-finite numbers during training; the last checkpoint survives."""

    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


def mse_objective(preds: Tensor, targets) -> Tensor:
    """Mean over nodes of the squared per-node error norm."""
    targets = targets if isinstance(targets, Tensor) else Tensor(targets)
    if preds.shape != targets.shape:
        raise ValueError(f"prediction shape {preds.shape} != target {targets.shape}")
    diff = preds - targets
    return (diff * diff).sum() * (1.0 / preds.shape[0])


def relative_l2(preds: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-channel ||pred - target|| / ||target||; NaN flags a zero-norm
    target channel (excluded from aggregates upstream)."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError(f"prediction shape {preds.shape} != target {targets.shape}")
    err = np.linalg.norm(preds - targets, axis=0)
    norm = np.linalg.norm(targets, axis=0)
    out = np.full(preds.shape[1], np.nan)
    ok = norm > 0
    out[ok] = err[ok] / norm[ok]
    return out


def evaluate_records(model, records: list[SampleRecord],
                     plans: list | None = None) -> np.ndarray:
    """Mean per-channel relative L2 across records (flagged ones excluded)."""
    rows = []
    for i, rec in enumerate(records):
        plan = plans[i] if plans is not None else None
        preds = model.forward(rec.positions, rec.input_values, plan=plan)
        rows.append(relative_l2(preds.data, rec.target_values))
    with np.errstate(invalid="ignore"):
        return np.nanmean(np.stack(rows), axis=0)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.t = 0

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.m.items():
            out[f"adam.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"adam.v.{name}"] = arr
        return out

    @classmethod
    def from_arrays(cls, params: dict[str, Tensor], arrays: dict[str, np.ndarray],
                    t: int) -> "AdamState":
        state = cls(params)
        for name in params:
            state.m[name] = arrays[f"adam.m.{name}"]
            state.v[name] = arrays[f"adam.v.{name}"]
        state.t = t
        return state


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; a non-finite gradient rejects the
    whole step (no buffer is touched) and raises with the culprit's name."""
    for name, t in params.items():
        g = t.grad
        if g is None:
            raise ValueError(f"parameter {name} has no gradient")
        if not math.isfinite(float(np.sum(g))):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.t += 1
    correction1 = 1.0 - beta1**state.t
    correction2 = 1.0 - beta2**state.t
    for name, t in params.items():
        g = t.grad
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        t.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Step decay: lr0 * gamma^floor(epoch / interval)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return config.lr * config.decay_gamma ** (epoch // config.decay_interval)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


class _PlanCache:
    """Lazy per-record positional plans (positions never change)."""

    def __init__(self, model, records):
        self._model = model
        self._records = records
        self._plans = [None] * len(records)

    def __getitem__(self, i):
        if self._plans[i] is None and hasattr(self._model, "positional_plan"):
            self._plans[i] = self._model.positional_plan(self._records[i].positions)
        return self._plans[i]

    def all(self):
        return [self[i] for i in range(len(self._records))]


def train(model, dataset: Dataset, config: TrainConfig, out_dir,
          start_epoch: int = 0, adam_state: AdamState | None = None,
          log=None) -> list[MetricsRecord]:
    """Epoch loop: shuffled samples, accumulated gradients, Adam steps,
    per-epoch validation, metrics appending and periodic checkpoints.

    Pass ``start_epoch``/``adam_state`` from a loaded checkpoint to
    resume; given the same seed the continuation is bitwise identical to
    an uninterrupted run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    state = adam_state if adam_state is not None else AdamState(params)
    channel_names = dataset.manifest.get("channel_names") or [
        f"c{i}" for i in range(dataset.train[0].target_values.shape[1])]

    metrics_path = out_dir / "metrics.csv"
    write_header = not metrics_path.exists()
    metrics_file = open(metrics_path, "a", newline="")
    writer = csv.writer(metrics_file)
    if write_header:
        writer.writerow(MetricsRecord.header(channel_names))
        metrics_file.flush()

    train_plans = _PlanCache(model, dataset.train)
    val_plans = _PlanCache(model, dataset.val)
    last_path = out_dir / "last.ckpt"
    last_checkpoint: Path | None = last_path if last_path.exists() else None
    history: list[MetricsRecord] = []
    t0 = time.monotonic()

    def checkpoint(path: Path, epoch: int) -> Path:
        save_checkpoint(path, model, extra={"epoch": epoch, "adam_t": state.t},
                        opt_state=state.to_arrays())
        return path

    try:
        for epoch in range(start_epoch, config.epochs):
            lr = lr_schedule(epoch, config)
            order = _epoch_order(config.seed, epoch, len(dataset.train))
            epoch_losses = []
            for chunk in _chunks(order, config.batch_size):
                for _, t in params.items():
                    t.zero_grad()
                inv = 1.0 / len(chunk)
                for idx in chunk:
                    rec = dataset.train[idx]
                    with Tape() as tape:
                        preds = model.forward(rec.positions, rec.input_values,
                                              plan=train_plans[int(idx)])
                        loss = mse_objective(preds, rec.target_values)
                        tape.backward(loss * inv)
                    epoch_losses.append(float(loss.data))
                adam_step(params, state, lr)

            val_err = evaluate_records(model, dataset.val, val_plans.all()) \
                if dataset.val else np.array([math.nan] * len(channel_names))
            record = MetricsRecord(
                epoch=epoch,
                train_loss=float(np.mean(epoch_losses)) if epoch_losses else math.nan,
                val_rel_l2=[float(v) for v in val_err],
                lr=lr,
                wall_time=time.monotonic() - t0,
            )
            history.append(record)
            writer.writerow(record.row())
            metrics_file.flush()
            if log is not None:
                log(f"epoch {epoch}: loss {record.train_loss:.6e} "
                    f"val {record.val_rel_l2} lr {lr:.2e}")

            last_checkpoint = checkpoint(out_dir / "last.ckpt", epoch)
            if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs:
                checkpoint(out_dir / f"epoch-{epoch:05d}.ckpt", epoch)
    except NumericError as exc:
        raise TrainingAbort(f"training aborted: {exc}", last_checkpoint) from exc
    finally:
        metrics_file.close()
    return history


# ---------------------------------------------------------------------------
# pointwise baseline
# ---------------------------------------------------------------------------


@dataclass
class MLPConfig:
    d_h: int = 64
    depth: int = 4
    seed: int = 0
    d_a: int = 1
    d_pos: int = 2
    d_u: int = 1

    def to_dict(self) -> dict:
        return {"kind": "mlp", **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "MLPConfig":
        d = {k: v for k, v in d.items() if k != "kind"}
        valid = {f.name for f in fields(cls)}
        unknown = set(d) - valid
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class MLPBaseline:
    """Per-node MLP on (position, input value); no graph structure at all."""

    def __init__(self, config: MLPConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        widths = ([config.d_a + config.d_pos]
                  + [config.d_h] * (config.depth - 1) + [config.d_u])
        self.weights = []
        self.biases = []
        for d_in, d_out in zip(widths[:-1], widths[1:]):
            self.weights.append(uniform_init(rng, (d_in, d_out), d_in))
            self.biases.append(Tensor(np.zeros(d_out), requires_grad=True))

    def named_tensors(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"mlp.{i}.w", w
            yield f"mlp.{i}.b", b

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_tensors())

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.zero_grad()

    def config_dict(self) -> dict:
        return self.config.to_dict()

    def forward(self, positions: np.ndarray, values: np.ndarray,
                plan=None) -> Tensor:
        cfg = self.config
        positions = np.asarray(positions, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (positions.shape[0], cfg.d_a):
            raise ValueError(f"values must be (N, {cfg.d_a})")
        h = ad.concat_rows(Tensor(values), Tensor(positions))
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.linear(h, w, b)
            if i != last:
                h = ad.gelu(h)
        return h
