"""SGD with momentum, the epoch loop, and binary checkpoints.

Checkpoint layout (little-endian)::

    b"PCNN"  u32 version
    u32 length + UTF-8 config text (flat key = value)
    u32 array count
    per array: u32 length + UTF-8 name, u32 rank, rank x u64 extents, float32 data
"""
from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .config import format_kv, parse_bool, parse_ints, parse_kv
from .data import Dataset, make_batches
from .errors import CorruptCheckpoint, DivergenceDetected, InvalidConfig, InvalidShape, UnsupportedVersion
from .model import BackboneConfig, PcnnModel, Variant, build_model, pcnn_forward
from .regions import RegionSpec
from .tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"PCNN"
FORMAT_VERSION = 1
PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    alpha: float = 12.0
    beta: float = 8.0
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidConfig(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise InvalidConfig(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise InvalidConfig(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs and batch_size must be >= 1")
        if self.alpha <= 0 or self.beta <= 0:
            raise InvalidConfig("alpha and beta must be > 0")
        if self.precision not in PRECISIONS:
            raise InvalidConfig(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


def sgd_momentum_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float, momentum: float,
                      weight_decay: float) -> Tuple[np.ndarray, np.ndarray]:
    """One heavy-ball update: v <- mu * v + (g + wd * p); p <- p - lr * v."""
    if not (param.shape == grad.shape == velocity.shape):
        raise InvalidShape(f"param {param.shape}, grad {grad.shape}, velocity {velocity.shape} differ")
    t = param.dtype.type
    g = grad + t(weight_decay) * param if weight_decay else grad
    v = t(momentum) * velocity + g
    return param - t(lr) * v, v.astype(param.dtype)


def decays(name: str) -> bool:
    """Weight decay applies to convolution and fully connected weights only."""
    return not name.endswith((".bias", ".gamma", ".beta"))


class SGD:
    def __init__(self, model: PcnnModel, lr: float, momentum: float, weight_decay: float,
                 velocity: Optional[Dict[str, np.ndarray]] = None):
        self.params = dict(model.named_parameters())
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = velocity if velocity is not None else {
            k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            wd = self.weight_decay if decays(name) else 0.0
            p.data, self.velocity[name] = sgd_momentum_step(p.data, p.grad, self.velocity[name], self.lr,
                                                            self.momentum, wd)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainState:
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0  # epochs completed


@dataclass
class TrainHistory:
    loss: List[float] = field(default_factory=list)
    loss_global: List[float] = field(default_factory=list)
    loss_local: List[float] = field(default_factory=list)
    train_accuracy: List[float] = field(default_factory=list)
    eval_accuracy: List[Optional[float]] = field(default_factory=list)
    epochs: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.loss)

    def to_csv(self) -> str:
        rows = ["epoch,loss,loss_global,loss_local,train_accuracy,eval_accuracy\n"]
        for i in range(len(self)):
            ev = self.eval_accuracy[i]
            rows.append(f"{self.epochs[i]},{self.loss[i]!r},{self.loss_global[i]!r},{self.loss_local[i]!r},"
                        f"{self.train_accuracy[i]!r},{'' if ev is None else repr(ev)}\n")
        return "".join(rows)


def check_consistent(model: PcnnModel, config: TrainConfig) -> None:
    if model.variant.tag != "custom_alpha_beta" and (model.alpha, model.beta) != (config.alpha, config.beta):
        raise InvalidConfig(f"model alpha/beta {(model.alpha, model.beta)} differ from config "
                            f"{(config.alpha, config.beta)}")
    if model.dtype != np.dtype(config.dtype):
        raise InvalidConfig(f"model precision {model.dtype} differs from config {config.precision}")


def train(model: PcnnModel, train_set: Dataset, eval_set: Optional[Dataset] = None,
          config: TrainConfig = TrainConfig(), state: Optional[TrainState] = None,
          on_epoch_end: Optional[Callable[[int, TrainState], None]] = None) -> TrainHistory:
    """Run epochs ``state.epoch .. config.epochs - 1``; epoch e shuffles with seed ``config.seed + e``."""
    from .evaluation import evaluate

    check_consistent(model, config)
    state = state if state is not None else TrainState()
    opt = SGD(model, config.lr, config.momentum, config.weight_decay, state.velocity or None)
    state.velocity = opt.velocity
    history = TrainHistory()
    dtype = model.dtype
    for epoch in range(state.epoch, config.epochs):
        model.train()
        sums = np.zeros(3)
        correct, seen = 0, 0
        for b, batch in enumerate(make_batches(train_set, config.batch_size, config.seed + epoch)):
            x = Tensor(batch.images.astype(dtype, copy=False))
            out = pcnn_forward(model, x, batch.labels, training=True)
            value = out.loss.item()
            if not np.isfinite(value):
                raise DivergenceDetected(epoch, b, value)
            opt.zero_grad()
            out.loss.backward()
            opt.step()
            k = len(batch.labels)
            sums += k * np.array([value, out.ce_global.item(),
                                  out.ce_local.item() if out.ce_local is not None else 0.0])
            correct += int((out.predictions() == batch.labels).sum())
            seen += k
        opt.zero_grad()
        history.epochs.append(epoch)
        history.loss.append(float(sums[0] / seen))
        history.loss_global.append(float(sums[1] / seen))
        history.loss_local.append(float(sums[2] / seen))
        history.train_accuracy.append(correct / seen)
        ev = evaluate(model, eval_set)[0] if eval_set is not None and len(eval_set) else None
        history.eval_accuracy.append(ev)
        state.epoch = epoch + 1
        logger.info("epoch %d loss %.4f train_acc %.3f eval_acc %s", epoch, history.loss[-1],
                    history.train_accuracy[-1], "-" if ev is None else f"{ev:.3f}")
        if on_epoch_end is not None:
            on_epoch_end(epoch, state)
    model.eval()
    return history


# Checkpoints -----------------------------------------------------------------

def model_config(model: PcnnModel) -> Dict[str, object]:
    bc, rs = model.backbone_config, model.region_spec
    return {
        "stem_channels": bc.stem_channels,
        "stage_channels": " ".join(map(str, bc.stage_channels)),
        "stage_strides": " ".join(map(str, bc.stage_strides)),
        "b1": repr(rs.b1), "b2": repr(rs.b2), "wsplit": repr(rs.wsplit),
        "variant": str(model.variant),
        "classes": model.classes,
        "model_seed": model.seed,
        "share_lfsieb": model.share_lfsieb,
        "model_alpha": repr(model.alpha),
        "model_beta": repr(model.beta),
    }


def train_config_to_kv(config: TrainConfig) -> Dict[str, object]:
    return {k: repr(v) if isinstance(v, float) else v for k, v in asdict(config).items()}


def train_config_from_kv(kv: Dict[str, str]) -> TrainConfig:
    return TrainConfig(
        lr=float(kv["lr"]), momentum=float(kv["momentum"]), weight_decay=float(kv["weight_decay"]),
        batch_size=int(kv["batch_size"]), epochs=int(kv["epochs"]), alpha=float(kv["alpha"]),
        beta=float(kv["beta"]), seed=int(kv["seed"]), precision=kv["precision"])


def model_from_kv(kv: Dict[str, str], dtype=np.float32) -> PcnnModel:
    backbone = BackboneConfig(int(kv["stem_channels"]), parse_ints(kv["stage_channels"]),
                              parse_ints(kv["stage_strides"]))
    regions = RegionSpec(float(kv["b1"]), float(kv["b2"]), float(kv["wsplit"]))
    model = PcnnModel(backbone, regions, Variant.parse(kv["variant"]), int(kv["classes"]), int(kv["model_seed"]),
                      float(kv["model_alpha"]), float(kv["model_beta"]), parse_bool(kv["share_lfsieb"]), dtype)
    return model


def _named_arrays(model: PcnnModel, state: TrainState) -> List[Tuple[str, np.ndarray]]:
    arrays = [(f"param/{k}", p.data) for k, p in model.named_parameters()]
    arrays += [(f"velocity/{k}", v) for k, v in sorted(state.velocity.items())]
    for k, s in model.named_buffers():
        arrays += [(f"buffer/{k}.mean", s.mean), (f"buffer/{k}.var", s.var)]
    return arrays


def save_checkpoint(model: PcnnModel, state: TrainState, config: TrainConfig, path) -> None:
    kv = {"format": FORMAT_VERSION, "epoch": state.epoch, **train_config_to_kv(config), **model_config(model)}
    text = format_kv(kv).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(text)), text]
    arrays = _named_arrays(model, state)
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), np.ascontiguousarray(arr, dtype="<f4").tobytes()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CorruptCheckpoint(f"unexpected end of file at byte {self.pos} (need {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    """Low-level reader returning the config mapping and all named arrays."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CorruptCheckpoint("bad magic")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    (tlen,) = r.unpack("<I")
    try:
        kv = parse_kv(r.take(tlen).decode("utf-8"), "checkpoint")
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptCheckpoint(f"config text: {exc}") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptCheckpoint("array name is not UTF-8") from None
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.buf):
        raise CorruptCheckpoint(f"{len(r.buf) - r.pos} trailing bytes")
    return kv, arrays


def load_checkpoint(path) -> Tuple[PcnnModel, TrainState, TrainConfig]:
    kv, arrays = read_checkpoint(path)
    try:
        config = train_config_from_kv(kv)
        model = model_from_kv(kv, config.dtype)
        epoch = int(kv["epoch"])
    except (KeyError, ValueError) as exc:
        raise CorruptCheckpoint(f"incomplete config: {exc}") from None

    def fetch(name, like):
        if name not in arrays:
            raise CorruptCheckpoint(f"missing array {name}")
        a = arrays.pop(name)
        if a.shape != like.shape:
            raise CorruptCheckpoint(f"{name}: shape {a.shape}, expected {like.shape}")
        return a.astype(like.dtype)

    for k, p in model.named_parameters():
        p.data = fetch(f"param/{k}", p.data)
    for k, s in model.named_buffers():
        s.mean = fetch(f"buffer/{k}.mean", s.mean)
        s.var = fetch(f"buffer/{k}.var", s.var)
    velocity = {k[len("velocity/"):]: v for k, v in arrays.items() if k.startswith("velocity/")}
    for k in list(arrays):
        if not k.startswith("velocity/"):
            raise CorruptCheckpoint(f"unexpected array {k}")
    model.eval()
    return model, TrainState(velocity, epoch), config


def build_for_config(config: TrainConfig, variant: Variant = Variant(), backbone: BackboneConfig = BackboneConfig(),
                     regions: RegionSpec = RegionSpec(), seed: Optional[int] = None,
                     input_size: Tuple[int, int] = (32, 32), share_lfsieb: bool = False) -> PcnnModel:
    """Build a model whose alpha/beta/precision agree with ``config``."""
    return build_model(backbone, regions, variant, seed=config.seed if seed is None else seed,
                       alpha=config.alpha, beta=config.beta, share_lfsieb=share_lfsieb, dtype=config.dtype,
                       input_size=input_size)
