"""Two-phase MLM training: AdamW, warmup-stable-decay schedule, checkpoints, metrics."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .encoder import EncoderConfig, EncoderModel, forward
from .mlm import MaskingPolicy, apply_masking, mlm_loss
from .tensor import Tensor, backward

logger = logging.getLogger(__name__)


# -- optimizer ------------------------------------------------------------

@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-5
    weight_decay: float = 0.1
    clip_norm: float | None = 1.0


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    hyper: AdamWConfig = field(default_factory=AdamWConfig)
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float | None) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    sq = 0.0
    for name, p in params.items():
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}")
        sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.dtype)
    return norm


def adamw_step(params: Mapping[str, Tensor], state: OptimizerState, lr: float) -> float:
    """Clip, then apply one decoupled-weight-decay Adam update with bias correction."""
    h = state.hyper
    norm = clip_grad_norm(params, h.clip_norm)
    state.step += 1
    t = state.step
    bc1 = 1.0 - h.beta1**t
    bc2 = 1.0 - h.beta2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= h.beta1
        m += (1.0 - h.beta1) * g
        v *= h.beta2
        v += (1.0 - h.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + h.eps)
        data = p.data * (1.0 - lr * h.weight_decay) - lr * update
        p.data = data.astype(p.dtype, copy=False)
    return norm


# -- plan and schedule ---------------------------------------------------

@dataclass(frozen=True)
class Phase:
    name: str
    steps: int
    masking_ratio: float
    rope_theta: float
    length_policy: str = "packed"  # or "cropped"
    seq_len: int = 2048
    min_len: int = 12
    schedule: str = "stable"  # or "cosine"
    mix: str | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"phase {self.name}: negative step count")
        if self.length_policy not in ("packed", "cropped"):
            raise ValueError(f"phase {self.name}: unknown length policy {self.length_policy!r}")
        if self.schedule not in ("stable", "cosine"):
            raise ValueError(f"phase {self.name}: unknown schedule segment {self.schedule!r}")


@dataclass(frozen=True)
class TrainPlan:
    phases: tuple[Phase, ...]
    base_lr: float = 1e-4
    warmup_steps: int = 2000
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)
    masking_strategy: str = "bert-80-10-10"
    seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        names = [p.name for p in self.phases]
        if len(set(names)) != len(names):
            raise ValueError("phase names must be unique")
        seen_cosine = False
        for p in self.phases:
            if seen_cosine and p.schedule == "stable":
                raise ValueError("a stable phase cannot follow a cosine phase")
            seen_cosine |= p.schedule == "cosine"

    @property
    def total_steps(self) -> int:
        return sum(p.steps for p in self.phases)

    def phase_start(self, name: str) -> int:
        start = 0
        for p in self.phases:
            if p.name == name:
                return start
            start += p.steps
        raise KeyError(name)

    def phase_at(self, step: int) -> Phase:
        start = 0
        for p in self.phases:
            if step < start + p.steps:
                return p
            start += p.steps
        raise ValueError(f"step {step} beyond plan budget of {self.total_steps}")


# Phase lengths from the token budgets at ~9.4M tokens per step:
# 4,843,357M / 9,437,184 and 200,000M / 9,437,184.
FULL_SCALE_PRETRAIN_STEPS = 513_221
FULL_SCALE_ANNEAL_STEPS = 21_193


def full_scale_plan(pretrain_steps: int = FULL_SCALE_PRETRAIN_STEPS, anneal_steps: int = FULL_SCALE_ANNEAL_STEPS,
               **overrides) -> TrainPlan:
    phases = (
        Phase("pretrain", pretrain_steps, masking_ratio=0.5, rope_theta=10_000.0, length_policy="packed",
              seq_len=2048, schedule="stable"),
        Phase("anneal", anneal_steps, masking_ratio=0.1, rope_theta=250_000.0, length_policy="cropped",
              seq_len=8192, min_len=12, schedule="cosine"),
    )
    return TrainPlan(phases=phases, **overrides)


def wsd_lr(step: float, plan: TrainPlan) -> float:
    """Warmup-stable-decay learning rate at ``step`` (0-based, may be fractional).

    Linear 0 -> base_lr over ``warmup_steps``, constant through stable phases,
    then ``base_lr * (1 + cos(pi * t)) / 2`` across the cosine phases, where t
    runs from 0 at the first decay step to 1 at the last one.
    """
    total = plan.total_steps
    if step < 0 or step >= total:
        raise ValueError(f"step {step} outside plan budget [0, {total})")
    decay_start = sum(p.steps for p in plan.phases if p.schedule == "stable")
    decay_len = total - decay_start
    if step >= decay_start and decay_len > 0:
        t = (step - decay_start) / (decay_len - 1) if decay_len > 1 else 1.0
        return plan.base_lr * (1.0 + math.cos(math.pi * t)) / 2.0
    if step < plan.warmup_steps:
        return plan.base_lr * step / plan.warmup_steps
    return plan.base_lr


# -- checkpoints ----------------------------------------------------------

MAGIC = b"DSKBCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: EncoderModel
    optimizer: OptimizerState
    meta: dict


def save_checkpoint(path: str | Path, model: EncoderModel, state: OptimizerState | None, meta: Mapping | None = None,
                    extra_tensors: Mapping[str, np.ndarray] | None = None) -> Path:
    """Write magic, version, JSON header, float32 payload and a SHA-256 trailer.

    The checksum covers the header and payload. Writes go to a temp file that is
    renamed into place.
    """
    path = Path(path)
    arrays: list[tuple[str, np.ndarray]] = [(f"model/{k}", v.data) for k, v in model.params.items()]
    if state is not None:
        for k in model.params:
            if k in state.m:
                arrays.append((f"adam_m/{k}", state.m[k]))
                arrays.append((f"adam_v/{k}", state.v[k]))
    for k, v in (extra_tensors or {}).items():
        arrays.append((f"extra/{k}", v))
    header = {
        "tensors": [{"name": n, "shape": list(a.shape), "dtype": "float32"} for n, a in arrays],
        "config": model.config.to_dict(),
        "optimizer": None if state is None else {"hyper": asdict(state.hyper), "step": state.step},
        "meta": dict(meta or {}),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays)
    body = header_bytes + payload
    blob = MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)) + body + hashlib.sha256(body).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_checkpoint_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 + 32 or not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<II", blob, len(MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    body, digest = blob[len(MAGIC) + 8:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupted)")
    header = json.loads(body[:header_len].decode("utf-8"))
    payload = memoryview(body)[header_len:]
    arrays, offset = {}, 0
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64)) * 4
        arrays[t["name"]] = np.frombuffer(payload[offset:offset + n], dtype="<f4").astype(np.float32).reshape(t["shape"])
        offset += n
    if offset != len(payload):
        raise CheckpointError(f"{path}: payload length does not match header")
    return header, arrays


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, arrays = read_checkpoint_arrays(path)
    config = EncoderConfig.from_dict(header["config"])
    model = EncoderModel.init(config, dtype=np.float32)
    model.load_state_dict({k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")})
    opt = header.get("optimizer")
    state = OptimizerState()
    if opt is not None:
        state = OptimizerState(hyper=AdamWConfig(**opt["hyper"]), step=int(opt["step"]))
        for k in model.params:
            if f"adam_m/{k}" in arrays:
                state.m[k] = arrays[f"adam_m/{k}"].copy()
                state.v[k] = arrays[f"adam_v/{k}"].copy()
    meta = dict(header["meta"])
    meta["extra_tensors"] = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return Checkpoint(model, state, meta)


# -- training loop --------------------------------------------------------

class BatchSource(Protocol):
    def next_batch(self) -> tuple[np.ndarray, np.ndarray]: ...


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainResult:
    model: EncoderModel
    optimizer: OptimizerState
    log: list[dict]
    checkpoints: list[Path]
    step: int


def _source_state(source) -> dict | None:
    return source.state_dict() if hasattr(source, "state_dict") else None


def train(
    plan: TrainPlan,
    model: EncoderModel,
    sources: Mapping[str, BatchSource],
    *,
    optimizer: OptimizerState | None = None,
    start_step: int = 0,
    stop_step: int | None = None,
    out_dir: str | Path | None = None,
    metrics_sink: Callable[[dict], None] | None = None,
    checkpoint_every: int | None = None,
    tokens_seen: int = 0,
    meta: Mapping | None = None,
) -> TrainResult:
    """Run plan steps ``[start_step, stop_step)``.

    Each step: batch -> mask -> forward -> loss -> backward -> clip -> AdamW.
    Checkpoints land in ``out_dir/checkpoints`` every ``checkpoint_every`` steps
    and at phase ends; a non-finite loss aborts without writing one. ``meta``
    is copied into every checkpoint header.
    """
    stop = plan.total_steps if stop_step is None else stop_step
    if not 0 <= start_step <= stop <= plan.total_steps:
        raise ValueError(f"invalid step range [{start_step}, {stop}) for a plan of {plan.total_steps} steps")
    optimizer = optimizer or OptimizerState(hyper=plan.optimizer)
    every = plan.checkpoint_every if checkpoint_every is None else checkpoint_every
    ckpt_dir = None if out_dir is None else Path(out_dir) / "checkpoints"
    log: list[dict] = []
    written: list[Path] = []
    phase_ends = {plan.phase_start(p.name) + p.steps: p.name for p in plan.phases}

    def checkpoint(step_done: int, phase: Phase) -> None:
        if ckpt_dir is None:
            return
        header = {
            **dict(meta or {}),
            "step": step_done,
            "phase": phase.name,
            "tokens_seen": tokens_seen,
            "sources": {name: _source_state(src) for name, src in sources.items()},
        }
        written.append(save_checkpoint(ckpt_dir / f"step_{step_done:08d}.ckpt", model, optimizer, header))

    for step in range(start_step, stop):
        phase = plan.phase_at(step)
        source = sources[phase.name]
        ids, pad = source.next_batch()
        policy = MaskingPolicy(phase.masking_ratio, plan.masking_strategy, plan.seed)
        batch = apply_masking(ids, policy, model.config.vocab_size, pad_mask=pad, step=step)
        lr = wsd_lr(step, plan)
        n_tokens = int((~batch.pad_mask).sum())
        tokens_seen += n_tokens
        record = {"step": step, "phase": phase.name, "lr": lr, "loss": None, "tokens_seen": tokens_seen,
                  "masked_fraction": batch.masked_fraction}
        if batch.n_selected:
            out = forward(model, batch.input_ids, batch.pad_mask, rope_theta=phase.rope_theta)
            loss = mlm_loss(out.logits, batch)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at step {step}; last checkpoint left untouched")
            model.zero_grad()
            backward(loss)
            adamw_step(model.params, optimizer, lr)
            model.zero_grad()
            record["loss"] = value
        else:
            logger.warning("step %d: no maskable positions selected, skipping update", step)
        log.append(record)
        if metrics_sink is not None:
            metrics_sink(record)
        done = step + 1
        if done in phase_ends or (every and done % every == 0):
            checkpoint(done, phase)
    return TrainResult(model, optimizer, log, written, stop)


class JsonlSink:
    """Appends one JSON record per line."""

    def __init__(self, path: str | Path, truncate_from_step: int | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if truncate_from_step is not None and self.path.exists():
            kept = [ln for ln in self.path.read_text().splitlines()
                    if ln.strip() and json.loads(ln).get("step", -1) < truncate_from_step]
            self.path.write_text("".join(ln + "\n" for ln in kept))

    def __call__(self, record: Mapping) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=False) + "\n")


def tokens_per_step(batch_size: int, seq_len: int, grad_accum: int = 1, n_devices: int = 1) -> int:
    return batch_size * seq_len * grad_accum * n_devices
