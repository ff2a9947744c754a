"""Optimization loop wiring sampler -> encoder -> objective.

Training is deterministic given (corpus, config): parameters initialize
from a named substream of the master seed, batches are counter-based, and
checkpoints carry optimizer state plus the stream position so a resumed run
is bit-identical to an uninterrupted one. Checkpoint writes are atomic.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .encoder import Checkpoint, Encoder, EncoderConfig, load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, TrainingDivergedError
from .objective import CrossCorrelation, loss_and_gradient
from .sampler import CorpusIndex, JitterConfig, epoch_batch_count, epoch_batches

TRAIN_LOG_HEADER = ("step", "loss", "invariance", "redundancy", "offdiag_mean_abs", "jitter_frac", "seconds")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 48
    embedding_dim: int = 128
    lam: float = 0.005
    learning_rate: float = 1e-3
    epochs: int = 1
    master_seed: int = 0
    checkpoint_every: int = 0  # steps between intermediate checkpoints; 0 = final only
    channels: tuple[int, ...] = (16, 32, 64, 128)
    hidden_dim: int = 256
    grad_clip_norm: float = 5.0
    max_steps: int | None = None
    jitter: JitterConfig = field(default_factory=JitterConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch statistics)")
        # learning_rate 0 is allowed as an explicit no-update run (it also
        # serves as the frozen-baseline construction); negative rates are not.
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            channels=tuple(self.channels),
            feature_dim=self.channels[-1],
            hidden_dim=self.hidden_dim,
            embedding_dim=self.embedding_dim,
            init_seed=self.master_seed,
        )

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["channels"] = list(self.channels)
        d["jitter"] = asdict(self.jitter)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        if "jitter" in d and isinstance(d["jitter"], dict):
            d["jitter"] = JitterConfig(**d["jitter"])
        if "max_steps" in d and d["max_steps"] is not None:
            d["max_steps"] = int(d["max_steps"])
        return cls(**d)


@dataclass
class LogRow:
    step: int
    loss: float
    invariance: float
    redundancy: float
    offdiag_mean_abs: float
    jitter_frac: float
    seconds: float


class Adam:
    """Stochastic gradient updates with per-parameter adaptive moments."""

    def __init__(self, params: dict[str, np.ndarray], learning_rate: float,
                 beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 epsilon: float = ADAM_EPSILON):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / b1c) / (np.sqrt(v / b2c) + self.epsilon)
            p -= np.asarray(self.learning_rate * update, dtype=p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, arr in self.m.items():
            out[f"adam_m/{k}"] = arr
        for k, arr in self.v.items():
            out[f"adam_v/{k}"] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.m:
            self.m[k] = arrays[f"adam_m/{k}"].astype(self.m[k].dtype)
            self.v[k] = arrays[f"adam_v/{k}"].astype(self.v[k].dtype)
        self.t = int(t)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= np.asarray(scale, dtype=g.dtype)
    return total


@dataclass
class TrainOutcome:
    encoder: Encoder
    log: list[LogRow]
    checkpoint_path: str | None
    step: int


def _diverged(summary: CrossCorrelation, step: int, epoch: int, batch) -> TrainingDivergedError:
    c = summary.matrix
    diag = {
        "step": step,
        "epoch": epoch,
        "jitter_frac": batch.jitter_fraction,
        "n_cross_year": sum(p == "cross_year" for p in batch.provenance),
        "c_min": float(np.nanmin(c)),
        "c_max": float(np.nanmax(c)),
        "loss": summary.loss,
    }
    return TrainingDivergedError(
        f"non-finite loss at step {step} (epoch {epoch}): {diag}", diagnostics=diag
    )


def write_train_log(path, rows: list[LogRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAIN_LOG_HEADER)
        for r in rows:
            writer.writerow([r.step, repr(r.loss), repr(r.invariance), repr(r.redundancy),
                             repr(r.offdiag_mean_abs), repr(r.jitter_frac), repr(r.seconds)])


def _checkpoint_meta(config: TrainConfig, step: int, epoch: int, next_batch: int) -> dict:
    return {
        "step": step,
        "epoch": epoch,
        "next_batch": next_batch,
        "train_config": config.to_json_dict(),
    }


def _save_train_checkpoint(path, encoder: Encoder, adam: Adam, config: TrainConfig,
                           step: int, epoch: int, next_batch: int) -> None:
    save_checkpoint(
        path,
        config=encoder.config,
        params=encoder.params,
        state=encoder.state,
        meta=_checkpoint_meta(config, step, epoch, next_batch),
        extra_arrays=adam.state_arrays(),
    )


def _resume_position(ckpt: Checkpoint, config: TrainConfig, n_locations: int) -> tuple[int, int, int]:
    meta = ckpt.meta
    saved = meta.get("train_config")
    if saved is None:
        raise CheckpointError("checkpoint carries no training state; cannot resume")
    saved_cfg = TrainConfig.from_json_dict(saved)
    stream_fields = ("batch_size", "embedding_dim", "lam", "learning_rate",
                     "master_seed", "channels", "hidden_dim", "grad_clip_norm", "jitter")
    for name in stream_fields:
        if getattr(saved_cfg, name) != getattr(config, name):
            raise ConfigError(
                f"resume config mismatch on {name}: checkpoint has "
                f"{getattr(saved_cfg, name)!r}, requested {getattr(config, name)!r}"
            )
    step, epoch, next_batch = int(meta["step"]), int(meta["epoch"]), int(meta["next_batch"])
    if next_batch >= epoch_batch_count(n_locations, config.batch_size):
        epoch, next_batch = epoch + 1, 0
    return step, epoch, next_batch


def train(
    index: CorpusIndex,
    loader,
    config: TrainConfig,
    checkpoint_path=None,
    log_path=None,
    resume_from=None,
    progress: bool = False,
) -> TrainOutcome:
    """Train (or continue training) on a corpus index.

    ``loader`` maps records to assembled panoramas. With ``resume_from`` (a
    checkpoint path) the optimizer state and sampling position are restored,
    making interrupted-plus-resumed runs identical to uninterrupted ones.
    """
    if not index:
        raise ConfigError("empty corpus index")
    n_locations = len(index)
    if n_locations < 2:
        raise ConfigError("need at least 2 locations to form training batches")

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from) if not isinstance(resume_from, Checkpoint) else resume_from
        if ckpt.config != config.encoder_config():
            raise ConfigError(
                f"checkpoint encoder config {ckpt.config} does not match "
                f"requested {config.encoder_config()}"
            )
        encoder = Encoder(ckpt.config,
                          {k: v.copy() for k, v in ckpt.params.items()},
                          {k: v.copy() for k, v in ckpt.state.items()})
        adam = Adam(encoder.params, config.learning_rate)
        adam.load_state_arrays(ckpt.extra_arrays, t=int(ckpt.meta.get("step", 0)))
        step, start_epoch, start_batch = _resume_position(ckpt, config, n_locations)
    else:
        encoder = Encoder.initialize(config.encoder_config())
        adam = Adam(encoder.params, config.learning_rate)
        step, start_epoch, start_batch = 0, 0, 0

    rows: list[LogRow] = []
    epoch, next_batch = start_epoch, start_batch
    stop = False
    for epoch in range(start_epoch, config.epochs):
        batch_iter = epoch_batches(
            index, config.batch_size, config.master_seed, epoch, loader,
            jitter=config.jitter, start_batch=start_batch if epoch == start_epoch else 0,
        )
        for b, batch in batch_iter:
            t0 = time.perf_counter()
            fwd_a = encoder.forward(batch.panos_a, mode="train")
            fwd_b = encoder.forward(batch.panos_b, mode="train")
            summary, d_a, d_b = loss_and_gradient(fwd_a.embeddings, fwd_b.embeddings, config.lam)
            if not np.isfinite(summary.loss):
                raise _diverged(summary, step, epoch, batch)
            grads_a = encoder.backward(fwd_a.cache, d_a.astype(encoder.dtype))
            grads_b = encoder.backward(fwd_b.cache, d_b.astype(encoder.dtype))
            grads = {k: grads_a[k] + grads_b[k] for k in grads_a}
            clip_global_norm(grads, config.grad_clip_norm)
            adam.step(encoder.params, grads)
            for name, p in encoder.params.items():
                if not np.isfinite(p).all():
                    raise TrainingDivergedError(
                        f"parameter {name} became non-finite at step {step}",
                        diagnostics={"step": step, "parameter": name},
                    )
            step += 1
            rows.append(
                LogRow(
                    step=step,
                    loss=summary.loss,
                    invariance=summary.invariance,
                    redundancy=summary.redundancy,
                    offdiag_mean_abs=summary.offdiag_mean_abs,
                    jitter_frac=batch.jitter_fraction,
                    seconds=time.perf_counter() - t0,
                )
            )
            next_batch = b + 1
            if progress:
                print(f"step {step} epoch {epoch} loss {summary.loss:.4f} "
                      f"inv {summary.invariance:.4f} red {summary.redundancy:.4f}", flush=True)
            if (checkpoint_path is not None and config.checkpoint_every
                    and step % config.checkpoint_every == 0):
                base = os.fspath(checkpoint_path)
                _save_train_checkpoint(f"{base}.step{step}", encoder, adam, config,
                                       step, epoch, next_batch)
            if config.max_steps is not None and step >= config.max_steps:
                stop = True
                break
        if stop:
            break
        # position after a completed epoch is (epoch, n_batches); resume
        # normalizes that to (epoch + 1, 0)

    if checkpoint_path is not None:
        _save_train_checkpoint(checkpoint_path, encoder, adam, config, step, epoch, next_batch)
    if log_path is not None:
        write_train_log(log_path, rows)
    return TrainOutcome(encoder=encoder, log=rows, checkpoint_path=(
        os.fspath(checkpoint_path) if checkpoint_path is not None else None), step=step)


def resume(checkpoint_path, index: CorpusIndex, loader, config: TrainConfig,
           new_checkpoint_path=None, log_path=None, progress: bool = False) -> TrainOutcome:
    """Continue a run from its checkpoint (see ``train``)."""
    return train(index, loader, config,
                 checkpoint_path=new_checkpoint_path or checkpoint_path,
                 log_path=log_path, resume_from=checkpoint_path, progress=progress)