"""Training loop, optimiser, scheduler and checkpoints.

Checkpoint layout (``MPIT``), little-endian throughout::

    b"MPIT" | u32 version | u32 config_len | config (UTF-8 "key=<json>" lines)
    u32 n_params | n_params * param_record
    u8 has_optimizer
        [u64 step | u32 n_moments | n_moments * (name, rank, extents, f64 m, f64 v)]
    u32 rng_len | rng state (UTF-8 JSON)

    param_record = u32 name_len | name | u8 trainable | u32 rank | u32 extents[rank] | f64 data
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .errors import ContractError, FormatError, NumericalError
from .losses import LossWeights, Target, total_loss, xyxy_to_cxcywh
from .metrics import detections_from_output, evaluate, ground_truth_from_scenes
from .peft import TuningMethod

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MPIT"
CKPT_VERSION = 1


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr0 to lr_min; steps past the end stay at lr_min."""
    if total_steps <= 0 or step >= total_steps:
        return lr_min
    step = max(step, 0)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class TrainConfig:
    epochs: int = 12
    lr: float = 1e-4
    lr_min: float = 1e-6
    batch_size: int = 8
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")
        if self.batch_size < 1:
            raise ContractError("batch size must be >= 1")


class AdamW:
    """Adam with decoupled weight decay over the trainable entries of a store."""

    def __init__(self, store: ParamStore, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.store = store
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = OrderedDict((n, np.zeros(store[n].shape)) for n in store.trainable_names())
        self.v = OrderedDict((n, np.zeros(store[n].shape)) for n in store.trainable_names())

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name in self.m:
            p = self.store[name]
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in parameter {name!r}")
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * self.wd * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(store: ParamStore, state: AdamW, lr: float) -> None:
    state.step(lr)


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    names = [n for n in store.trainable_names() if store[n].grad is not None]
    total = math.sqrt(sum(float(np.sum(store[n].grad ** 2)) for n in names))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for n in names:
            store[n].grad = store[n].grad * scale
    return total


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

def scene_targets(scenes, image_size: int) -> list:
    return [Target(boxes=xyxy_to_cxcywh(sc.boxes) / image_size if len(sc.labels) else np.zeros((0, 4)),
                   labels=np.asarray(sc.labels, dtype=np.int64))
            for sc in scenes]


def batch_images(scenes) -> np.ndarray:
    return np.stack([sc.image for sc in scenes]).astype(np.float64)


def batch_loss(det, scenes, mhp=None, weights: LossWeights | None = None):
    out = det.forward(batch_images(scenes), mhp=mhp)
    return total_loss(out, scene_targets(scenes, det.cfg.image_size), weights, grid=det.cfg.grid)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)   # per epoch: {"epoch", "loss", "lr"}
    step_losses: list = field(default_factory=list)
    optimizer: AdamW | None = None
    rng: np.random.Generator | None = None


def train(det, method, scenes, cfg: TrainConfig, mhp=None, weights: LossWeights | None = None,
          start_epoch: int = 0, optimizer: AdamW | None = None, rng=None,
          stop_epoch: int | None = None) -> TrainResult:
    """Mini-batch training of the store's trainable entries.

    Zero-shot runs no steps.  ``start_epoch``/``optimizer``/``rng`` resume an
    interrupted run; ``stop_epoch`` ends early (the schedule still spans
    ``cfg.epochs``).
    """
    method = TuningMethod(method)
    store = det.store
    result = TrainResult(rng=rng)
    if method is TuningMethod.ZERO_SHOT:
        return result
    scenes = list(scenes)
    n = len(scenes)
    if n == 0:
        raise ContractError("training needs at least one scene")
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    opt = optimizer or AdamW(store, cfg.betas, cfg.eps, cfg.weight_decay)
    result.optimizer, result.rng = opt, rng
    step = start_epoch * steps_per_epoch
    end = cfg.epochs if stop_epoch is None else stop_epoch
    with store.lock():
        for epoch in range(start_epoch, end):
            order = rng.permutation(n)
            losses = []
            lr = cfg.lr
            for s in range(steps_per_epoch):
                batch = [scenes[i] for i in order[s * cfg.batch_size:(s + 1) * cfg.batch_size]]
                lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min)
                store.zero_grad()
                try:
                    loss, _ = batch_loss(det, batch, mhp, weights)
                except NumericalError as exc:
                    raise NumericalError(f"loss diverged at epoch {epoch}, step {step}: {exc}") from None
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"loss diverged at epoch {epoch}, step {step}")
                loss.backward()
                if cfg.clip_norm is not None:
                    clip_grad_norm(store, cfg.clip_norm)
                opt.step(lr)
                losses.append(value)
                step += 1
            store.zero_grad()
            result.step_losses.extend(losses)
            result.history.append({"epoch": epoch + 1, "loss": float(np.mean(losses)), "lr": lr})
            log.info("epoch %d loss %.5f lr %.3g", epoch + 1, np.mean(losses), lr)
    return result


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict(det, scenes, mhp=None, batch_size: int = 16):
    """(boxes, logits) arrays for every scene, computed without gradient tracking."""
    boxes, logits = [], []
    with ad.inference(det.store):
        emb = mhp() if mhp is not None else None
        for i in range(0, len(scenes), batch_size):
            out = det.forward(batch_images(scenes[i:i + batch_size]), mhp=emb)
            boxes.append(out.boxes.data)
            logits.append(out.logits.data)
    if not boxes:
        K, T = det.cfg.num_queries, len(det.cfg.categories)
        return np.zeros((0, K, 4)), np.zeros((0, K, T))
    return np.concatenate(boxes), np.concatenate(logits)


def evaluate_scenes(det, scenes, mhp=None, batch_size: int = 16):
    boxes, logits = predict(det, scenes, mhp, batch_size)
    dets = detections_from_output(boxes, logits, range(len(scenes)), det.cfg.image_size)
    return evaluate(dets, ground_truth_from_scenes(scenes))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    params: "OrderedDict[str, tuple]"          # name -> (array, trainable)
    optimizer: dict | None = None              # {"step": int, "m": {...}, "v": {...}}
    rng_state: dict | None = None


def checkpoint_from(store: ParamStore, config: dict, optimizer: AdamW | None = None,
                    rng: np.random.Generator | None = None) -> Checkpoint:
    params = OrderedDict((n, (t.data.copy(), store.is_trainable(n))) for n, t in store.items())
    opt = None
    if optimizer is not None:
        opt = {"step": optimizer.t,
               "m": OrderedDict((n, a.copy()) for n, a in optimizer.m.items()),
               "v": OrderedDict((n, a.copy()) for n, a in optimizer.v.items())}
    return Checkpoint(config=dict(config), params=params, optimizer=opt,
                      rng_state=None if rng is None else rng.bit_generator.state)


def _write_array(buf, name: str, arrays, flag=None):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    if flag is not None:
        buf.write(struct.pack("<B", 1 if flag else 0))
    shape = arrays[0].shape
    buf.write(struct.pack("<I", len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))
    for a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    cfg = "".join(f"{k}={json.dumps(ckpt.config[k], sort_keys=True)}\n"
                  for k in sorted(ckpt.config)).encode("utf-8")
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, (arr, flag) in ckpt.params.items():
        _write_array(buf, name, [arr], flag)
    if ckpt.optimizer is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<BQI", 1, ckpt.optimizer["step"], len(ckpt.optimizer["m"])))
        for name, m in ckpt.optimizer["m"].items():
            _write_array(buf, name, [m, ckpt.optimizer["v"][name]])
    rng = b"" if ckpt.rng_state is None else json.dumps(ckpt.rng_state, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(rng)))
    buf.write(rng)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", self.path, self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, what, count=1, flag=False):
        (n,) = self.unpack("<I", f"{what} name length")
        name = self.take(n, f"{what} name").decode("utf-8")
        fl = self.unpack("<B", f"{what} flag")[0] if flag else None
        (rank,) = self.unpack("<I", f"{what} rank")
        shape = self.unpack(f"<{rank}I", f"{what} extents") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        arrays = [np.frombuffer(self.take(8 * size, f"{what} data for {name!r}"), dtype="<f8")
                  .reshape(shape).astype(np.float64) for _ in range(count)]
        return name, fl, arrays


def parse_checkpoint(data: bytes, path=None) -> Checkpoint:
    r = _Reader(data, path)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)", path, 0)
    version, cfg_len = r.unpack("<II", "header")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path, 4)
    at = r.pos
    config = {}
    try:
        for line in r.take(cfg_len, "config").decode("utf-8").splitlines():
            k, v = line.split("=", 1)
            config[k] = json.loads(v)
    except (ValueError, UnicodeDecodeError):
        raise FormatError("malformed config block", path, at) from None
    (n,) = r.unpack("<I", "parameter count")
    params = OrderedDict()
    for _ in range(n):
        name, flag, (arr,) = r.array("parameter", flag=True)
        params[name] = (arr, bool(flag))
    (has_opt,) = r.unpack("<B", "optimizer flag")
    opt = None
    if has_opt:
        step, count = r.unpack("<QI", "optimizer header")
        opt = {"step": step, "m": OrderedDict(), "v": OrderedDict()}
        for _ in range(count):
            name, _, (m, v) = r.array("moment", count=2)
            opt["m"][name], opt["v"][name] = m, v
    (rng_len,) = r.unpack("<I", "rng length")
    rng_raw = r.take(rng_len, "rng state")
    rng_state = json.loads(rng_raw.decode("utf-8")) if rng_len else None
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint", path, r.pos)
    return Checkpoint(config=config, params=params, optimizer=opt, rng_state=rng_state)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), path)


def apply_checkpoint(store: ParamStore, ckpt: Checkpoint, flags: bool = True,
                     strict: bool = True) -> None:
    """Copy parameter values (and optionally trainable flags) into ``store``."""
    missing = [n for n in ckpt.params if n not in store]
    if strict and missing:
        raise FormatError(f"checkpoint has parameters unknown to the model: {missing[:5]}")
    for name, (arr, flag) in ckpt.params.items():
        if name not in store:
            continue
        t = store[name]
        if t.shape != arr.shape:
            raise FormatError(f"parameter {name!r} has shape {arr.shape}, model expects {t.shape}")
        t.data[...] = arr
        if flags:
            store.set_trainable(name, flag)


def restore_optimizer(store: ParamStore, ckpt: Checkpoint, cfg: TrainConfig) -> AdamW:
    opt = AdamW(store, cfg.betas, cfg.eps, cfg.weight_decay)
    if ckpt.optimizer is not None:
        opt.t = int(ckpt.optimizer["step"])
        for n in opt.m:
            opt.m[n][...] = ckpt.optimizer["m"][n]
            opt.v[n][...] = ckpt.optimizer["v"][n]
    return opt


def restore_rng(ckpt: Checkpoint, seed: int = 0) -> np.random.Generator:
    rng = np.random.default_rng(seed)
    if ckpt.rng_state is not None:
        rng.bit_generator.state = ckpt.rng_state
    return rng


def train_config_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["betas"] = list(cfg.betas)
    return out
