"""Training pipeline: history-to-next-step supervision with ADAM.

The learning rate follows a fixed closed-form schedule indexed by epoch: a
sinusoidal ramp for the first half of training and the same sinusoid under
an exponential decay for the second half, all scaled by a per-model factor
alpha in (0, 1].  Data windows are z-scored per field with training-set
statistics; runs are deterministic given the seed (initialization and
shuffling both derive from it).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dfield
from math import exp, pi, sin

import numpy as np

from . import models, tensor as T
from .trajectory import Trajectory, pooled_stats


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss_value: float):
        super().__init__(f"non-finite loss {loss_value} at step {step}")
        self.step = step
        self.loss_value = loss_value


@dataclass
class TrainConfig:
    epochs: int = 16
    batch_size: int = 16
    lr_scale: float = 1.0
    seed: int = 2
    history_length: int = 1
    loss: str = "scaled_l2"        # or "mse"

    def validate(self):
        if self.epochs < 2 or self.epochs % 2:
            raise ValueError("epochs must be even (warm-up is half of training)")
        if not 0.0 < self.lr_scale <= 1.0:
            raise ValueError("lr_scale must lie in (0, 1]")
        if self.loss not in ("scaled_l2", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.history_length < 1 or self.batch_size < 1:
            raise ValueError("history_length and batch_size must be positive")


@dataclass
class RunRecord:
    """One trained cell: configuration in, measured costs and errors out."""
    system: str = ""
    family: str = ""
    width: int = 0
    waves: int = 1
    seed: int = 0
    params: int = 0
    train_wall_s: float = 0.0
    infer_s_per_step: float = float("nan")
    err_first: float = float("nan")
    err_last: float = float("nan")
    final_loss: float = float("nan")
    hardware: str = ""
    selected: bool = False
    failed: bool = False
    loss_history: list = dfield(default_factory=list, repr=False)


def lr_schedule(i: float, n_total: int, alpha: float) -> float:
    """Closed-form learning rate at epoch i of n_total, scaled by alpha."""
    n_warm = n_total / 2.0
    decay = exp(-5.0 * (max(i, n_warm) - n_warm) / n_total)
    wobble = 0.8 + 0.5 * sin(2.0 * pi * (0.75 + i / n_warm))
    return 0.01 * alpha * decay * wobble


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Standard bias-corrected ADAM update, in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


def compute_loss(pred: T.Tensor, target: np.ndarray, kind: str) -> T.Tensor:
    if kind == "scaled_l2":
        return T.scaled_l2_loss(pred, target)
    if kind == "mse":
        return T.mse_loss(pred, target)
    raise ValueError(f"unknown loss {kind!r}")


class Dataset:
    """Training trajectories plus the pooled per-field normalization stats."""

    def __init__(self, trajectories: list[Trajectory],
                 stats: tuple[np.ndarray, np.ndarray] | None = None):
        if not trajectories:
            raise ValueError("empty dataset")
        self.trajectories = trajectories
        self.mean, self.std = stats if stats is not None else pooled_stats(trajectories)
        self.std = np.where(self.std > 0, self.std, 1.0)

    @property
    def num_fields(self) -> int:
        return self.trajectories[0].num_fields

    def normalized(self, traj_idx: int) -> np.ndarray:
        f = self.trajectories[traj_idx].fields.astype(np.float32)
        mu = self.mean.astype(np.float32).reshape(1, -1, 1, 1)
        sd = self.std.astype(np.float32).reshape(1, -1, 1, 1)
        return (f - mu) / sd

    def windows(self, history_length: int) -> list[tuple[int, int]]:
        """All (trajectory, start) pairs with history_length + 1 frames."""
        out = []
        for ti, tr in enumerate(self.trajectories):
            for s in range(tr.frames - history_length):
                out.append((ti, s))
        if not out:
            raise ValueError(
                f"no trajectory is long enough for history {history_length} + 1 frames")
        return out


def train(model: models.Model, dataset: Dataset, cfg: TrainConfig,
          adam_state: AdamState | None = None) -> tuple[models.Model, RunRecord]:
    """Train in place; returns the model and a record with wall time and loss.

    Each epoch shuffles every (trajectory, start) window with the run seed,
    assembles minibatches of (history -> next frame) pairs on normalized
    data, and applies one ADAM step per batch at the epoch's scheduled rate.
    """
    cfg.validate()
    h = cfg.history_length
    m_fields = dataset.num_fields
    if model.config.in_channels != h * m_fields:
        raise ValueError(f"model expects {model.config.in_channels} input channels "
                         f"but history x fields = {h * m_fields}")
    windows = dataset.windows(h)
    norm = [dataset.normalized(i) for i in range(len(dataset.trajectories))]
    rng = np.random.default_rng(cfg.seed)
    state = adam_state if adam_state is not None else AdamState.for_params(model.params)
    losses: list[float] = []

    t0 = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.epochs, cfg.lr_scale)
        order = rng.permutation(len(windows))
        for lo in range(0, len(order), cfg.batch_size):
            batch = [windows[j] for j in order[lo:lo + cfg.batch_size]]
            xb = np.stack([norm[ti][s:s + h].reshape(h * m_fields, *norm[ti].shape[2:])
                           for ti, s in batch])
            yb = np.stack([norm[ti][s + h] for ti, s in batch])
            tape = T.Tape()
            out, bound = model.forward_training(tape, xb)
            loss = compute_loss(out, yb, cfg.loss)
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise TrainingDiverged(step, lval)
            grads = T.backward(tape, loss)
            gmap = {name: grads[leaf.node] for name, leaf in bound.items()}
            adam_step(model.params, gmap, state, lr)
            losses.append(lval)
            step += 1
    wall = time.perf_counter() - t0

    rec = RunRecord(family=model.config.family.value, width=model.config.width,
                    waves=model.config.waves, seed=cfg.seed,
                    params=models.param_count(model), train_wall_s=wall,
                    final_loss=losses[-1], loss_history=losses)
    return model, rec


def save_training_state(path, model: models.Model, state: AdamState) -> None:
    """Checkpoint model parameters plus optimizer state, bit-exactly."""
    extras = {"adam.step": np.asarray(float(state.step), np.float32)}
    for k, arr in state.m.items():
        extras[f"adam.m.{k}"] = arr
    for k, arr in state.v.items():
        extras[f"adam.v.{k}"] = arr
    models.save_checkpoint(path, model, extras)


def load_training_state(path) -> tuple[models.Model, AdamState]:
    model, extras = models.load_checkpoint(path)
    state = AdamState.for_params(model.params)
    state.step = int(extras.pop("adam.step", np.asarray(0.0)))
    for k, arr in extras.items():
        if k.startswith("adam.m."):
            state.m[k[len("adam.m."):]] = arr
        elif k.startswith("adam.v."):
            state.v[k[len("adam.v."):]] = arr
    return model, state
