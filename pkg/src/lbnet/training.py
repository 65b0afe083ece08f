"""L1 objective, Adam, cosine schedule, the training loop and checkpoints."""
from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from lbnet.arch import LBNetModel, ModelConfig, build_model
from lbnet.data import DatasetIndex, sample_batch
from lbnet.engine import Tensor, backward
from lbnet.engine import functional as F
from lbnet.errors import CheckpointError, ConfigError, DatasetError, DimensionError, NumericalError, UsageError


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over every element."""
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss shapes differ: {pred.shape} vs {target.shape}")
    return F.mean(F.abs(F.sub(pred, target)))


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation recipe.  ``checkpoint_every = 0`` saves only at the end."""

    total_steps: int = 500
    lr_max: float = 2e-4
    lr_min: float = 6.25e-6
    batch_size: int = 16
    patch: int = 48
    seed: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    checkpoint_every: int = 0

    def validate(self) -> "TrainConfig":
        problems = []
        if not 0 < self.lr_min <= self.lr_max:
            problems.append(f"need 0 < lr_min <= lr_max (got {self.lr_min}, {self.lr_max})")
        if self.total_steps < 1:
            problems.append(f"total_steps must be >= 1 (got {self.total_steps})")
        if self.batch_size < 1 or self.patch < 1:
            problems.append("batch_size and patch must be positive")
        if not all(0 <= b < 1 for b in self.betas):
            problems.append(f"betas must lie in [0, 1) (got {self.betas})")
        if self.checkpoint_every < 0:
            problems.append("checkpoint_every must be >= 0")
        if problems:
            raise ConfigError("invalid training config: " + "; ".join(problems), problems)
        return self


def cosine_lr(t: int, cfg: TrainConfig) -> float:
    """Per-step cosine annealing from ``lr_max`` at 0 to ``lr_min`` at ``total_steps``.

    Both endpoints are returned exactly; steps past the end stay at ``lr_min``.
    """
    if t <= 0:
        return cfg.lr_max
    if t >= cfg.total_steps:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * t / cfg.total_steps))


@dataclass
class AdamState:
    """First/second moments keyed by parameter name, plus the update counter."""

    m: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    v: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    t: int = 0

    @classmethod
    def fresh(cls, model: LBNetModel) -> "AdamState":
        return cls(OrderedDict((k, np.zeros(p.shape)) for k, p in model.named_parameters()),
                   OrderedDict((k, np.zeros(p.shape)) for k, p in model.named_parameters()), 0)


def adam_step(model: LBNetModel, state: AdamState, grads: Optional[Dict[str, np.ndarray]], lr: float,
              betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place.

    Args:
        grads: gradient per parameter name; ``None`` reads each parameter's ``.grad``.
    """
    b1, b2 = betas
    updates = []
    for name, p in model.named_parameters():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            raise UsageError(f"no gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name], state.v[name] = np.zeros(p.shape), np.zeros(p.shape)
        updates.append((p, g, name))
    state.t += 1
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for p, g, name in updates:
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass(frozen=True)
class StepRecord:
    step: int
    lr: float
    loss: float

    def to_line(self) -> str:
        return f"{self.step}\t{self.lr:.9g}\t{self.loss!r}"


@dataclass
class TrainLog:
    records: List[StepRecord] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    def to_text(self) -> str:
        return "".join(r.to_line() + "\n" for r in self.records)


def _step_rng(seed: int, step: int) -> np.random.Generator:
    # One stream per step: resuming from a checkpoint replays the same batches.
    return np.random.default_rng([seed, step])


def train_loop(model: LBNetModel, dataset: DatasetIndex, cfg: TrainConfig,
               hooks: Iterable[Callable[[StepRecord], None]] = (), state: Optional[AdamState] = None,
               start_step: int = 0, checkpoint_path=None) -> TrainLog:
    """Run steps ``start_step .. total_steps - 1``.

    Each step samples a batch, evaluates the L1 loss, back-propagates and
    applies Adam at ``cosine_lr(step)``.  Everything is a function of
    ``cfg.seed`` and the step number, so runs are bitwise repeatable.

    Raises:
        DatasetError: the dataset is empty or has no large enough image.
        NumericalError: the loss became non-finite.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise DatasetError("training dataset is empty")
    state = AdamState.fresh(model) if state is None else state
    s = model.config.scale
    log = TrainLog()
    for step in range(start_step, cfg.total_steps):
        lr = cosine_lr(step, cfg)
        lr_batch, hr_batch = sample_batch(dataset, s, cfg.patch, cfg.batch_size, _step_rng(cfg.seed, step))
        model.zero_grad()
        loss = l1_loss(model(Tensor(lr_batch)), Tensor(hr_batch))
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(step, lr, value)
        backward(loss)
        adam_step(model, state, None, lr, cfg.betas, cfg.eps)
        record = StepRecord(step, lr, value)
        log.records.append(record)
        for hook in hooks:
            hook(record)
        done = step + 1
        if checkpoint_path is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, state, done)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, state, cfg.total_steps)
    return log


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"LBNC"
VERSION = 1


def _write_records(out: list, arrays: Iterable[Tuple[str, np.ndarray]]) -> None:
    items = list(arrays)
    out.append(struct.pack("<I", len(items)))
    for name, arr in items:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, model: LBNetModel, state: Optional[AdamState], step: int) -> None:
    """Serialise config, parameters (float32 LE), optional Adam state and step."""
    text = model.config.to_text().encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text, struct.pack("<Q", step)]
    _write_records(out, ((k, p.data) for k, p in model.named_parameters()))
    if state is None:
        out.append(b"\x00")
    else:
        out.append(b"\x01" + struct.pack("<Q", state.t))
        _write_records(out, [(f"m.{k}", a) for k, a in state.m.items()] +
                       [(f"v.{k}", a) for k, a in state.v.items()])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(out))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def records(self) -> "OrderedDict[str, np.ndarray]":
        (count,) = self.unpack("<I")
        out = OrderedDict()
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            try:
                name = self.take(nlen).decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointError(f"{self.path}: corrupt record name") from None
            (rank,) = self.unpack("<B")
            shape = self.unpack(f"<{rank}I")
            size = int(np.prod(shape)) if rank else 1
            out[name] = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(shape).astype(np.float64)
        return out


def load_checkpoint(path, expected: Optional[ModelConfig] = None
                    ) -> Tuple[LBNetModel, Optional[AdamState], int]:
    """Inverse of :func:`save_checkpoint`.

    Args:
        expected: when given, the stored parameters must match the shapes this
            config would build (e.g. refuse an LBNet-T file for LBNet).

    Raises:
        CheckpointError: bad magic/version, truncation, or shape disagreement.
    """
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read: {exc}") from None
    r = _Reader(buf, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an LBNet checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (tlen,) = r.unpack("<I")
    try:
        config = ModelConfig.from_text(r.take(tlen).decode("utf-8")).validate()
    except (UnicodeDecodeError, ConfigError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config header: {exc}") from None
    (step,) = r.unpack("<Q")
    stored = r.records()
    state = None
    (flag,) = r.unpack("<B")
    if flag:
        (t,) = r.unpack("<Q")
        moments = r.records()
        state = AdamState(OrderedDict((k[2:], a) for k, a in moments.items() if k.startswith("m.")),
                          OrderedDict((k[2:], a) for k, a in moments.items() if k.startswith("v.")), t)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")

    model = build_model(config)
    _check_shapes(path, model, stored, "declared config")
    if expected is not None:
        _check_shapes(path, build_model(expected), stored, "requested config")
    for name, p in model.named_parameters():
        p.data[...] = stored[name]
    if state is not None and (set(state.m) != set(stored) or set(state.v) != set(stored)):
        raise CheckpointError(f"{path}: optimizer state does not cover the parameter set")
    return model, state, step


def _check_shapes(path, model: LBNetModel, stored, what: str) -> None:
    want = model.state_shapes()
    got = OrderedDict((k, a.shape) for k, a in stored.items())
    if want != got:
        diff = sorted(set(want.items()) ^ set(got.items()))[:3]
        raise CheckpointError(f"{path}: parameters do not match the {what}; first differences {diff}")
