"""Training loop: adaptive-moment optimizer, warmup+cosine schedule,
checkpointing in a binary block container, and per-epoch metric logging.

Checkpoint container layout (documented for external tooling):

    magic "DELP" | version u8 | meta_len u32 | meta JSON (utf-8)
    | block_count u32 | blocks

    block: name_len u16 | name utf-8 | rows u32 | cols u32
           | rows*cols float64 little-endian

Blocks hold parameter values plus optimizer state (``opt.m.<name>``,
``opt.v.<name>``), so resuming reproduces an unbroken run at 64-bit.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .contrast import LossWeights
from .datasim import clip_annotations, pad_or_crop
from .evalkit import mean_ap
from .model import DecodeConfig, EventLocalizer, ModelConfig, batch_losses

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "AdamOptimizer",
    "learning_rate",
    "clip_global_norm",
    "Trainer",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = b"DELP"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    warmup_epochs: int = 5
    base_lr: float = 2e-3
    weight_decay: float = 1e-4
    batch_size: int = 16
    seed: int = 7
    modality: str = "AV"
    clip_norm: float = 1.0
    eval_every: int = 5
    eval_thresholds: tuple = (0.5, 0.6, 0.7, 0.8, 0.9)

    def validate(self) -> None:
        if not self.epochs >= self.warmup_epochs >= 0:
            raise ValueError("need epochs >= warmup_epochs >= 0")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.modality not in ("AV", "A", "V"):
            raise ValueError("modality must be AV, A or V")


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay toward 0."""
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    span = max(1, cfg.epochs - cfg.warmup_epochs)
    progress = (epoch - cfg.warmup_epochs) / span
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad *= scale
    return total


class AdamOptimizer:
    """Adaptive moment estimation with decoupled weight decay."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            if self.weight_decay > 0:
                update = update + self.weight_decay * p.value
            p.value -= lr * update

    def state_arrays(self) -> dict:
        out = {}
        for p in self.params:
            out[f"opt.m.{p.name}"] = self.m[p.name]
            out[f"opt.v.{p.name}"] = self.v[p.name]
        return out

    def load_state(self, arrays: dict) -> None:
        for p in self.params:
            for prefix, store in (("opt.m.", self.m), ("opt.v.", self.v)):
                key = f"{prefix}{p.name}"
                if key in arrays:
                    incoming = np.asarray(arrays[key])
                    if incoming.shape != store[p.name].shape:
                        raise ValueError(f"optimizer state shape mismatch for {key}")
                    store[p.name][...] = incoming


# -- checkpoint container ---------------------------------------------------------


def _write_block(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
    fh.write(arr.astype("<f8").tobytes())


def save_checkpoint(path, model: EventLocalizer, optimizer: AdamOptimizer | None = None,
                    epoch: int = 0, extra_meta: dict | None = None) -> None:
    from dataclasses import asdict
    blocks = {name: p.value for name, p in model.named_parameters().items()}
    if optimizer is not None:
        blocks.update(optimizer.state_arrays())
    meta = {
        "epoch": epoch,
        "step_count": optimizer.step_count if optimizer else 0,
        "model_config": asdict(model.cfg),
        "loss_weights": asdict(model.weights),
    }
    meta.update(extra_meta or {})
    meta_bytes = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(bytes([CKPT_VERSION]))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(blocks)))
        for name in sorted(blocks):
            _write_block(fh, name, blocks[name])


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (arrays keyed by block name, meta dict)."""
    buf = Path(path).read_bytes()
    if len(buf) < 9 or buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    if buf[4] != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {buf[4]}")
    off = 5
    (meta_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    meta = json.loads(buf[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + name_len].decode("utf-8")
        off += name_len
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        n = rows * cols
        if off + 8 * n > len(buf):
            raise ValueError(f"{path}: truncated block {name}")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(rows, cols).copy()
        off += 8 * n
    return arrays, meta


def restore_model(path) -> tuple[EventLocalizer, dict, dict]:
    """Rebuild a model (architecture + weights) from a checkpoint alone."""
    arrays, meta = load_checkpoint(path)
    cfg = ModelConfig(**meta["model_config"])
    weights = LossWeights(**meta["loss_weights"])
    model = EventLocalizer(cfg, weights, seed=0)
    model.load_state({k: v for k, v in arrays.items() if not k.startswith("opt.")})
    return model, arrays, meta


# -- training loop ------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    total: float
    inter: float
    intra: float
    score: float
    cls: float
    reg: float
    grad_norm: float
    map_at: dict = field(default_factory=dict)
    average_map: float | None = None

    def as_row(self) -> dict:
        row = {"epoch": self.epoch, "lr": self.lr, "total": self.total,
               "inter": self.inter, "intra": self.intra, "score": self.score,
               "cls": self.cls, "reg": self.reg, "grad_norm": self.grad_norm,
               "average_map": self.average_map}
        for t, v in self.map_at.items():
            row[f"map@{t}"] = v
        return row


class Trainer:
    """Deterministic epoch loop over an in-memory dataset.

    ``train_items``/``eval_items`` are lists of (FeatureSequence, events).
    Sequences are padded or cropped to the model's t_max on ingestion and
    event annotations are clipped accordingly.
    """

    def __init__(self, model: EventLocalizer, train_items, cfg: TrainConfig,
                 eval_items=None):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.train_data = self._prepare(train_items)
        self.eval_data = self._prepare(eval_items) if eval_items else None
        self.optimizer = AdamOptimizer(model.parameters(), weight_decay=cfg.weight_decay)
        self.history: list[EpochRecord] = []
        self.epoch = 0

    def _prepare(self, items):
        out = []
        t_fixed = self.model.cfg.t_max
        for seq, events in items:
            fitted = pad_or_crop(seq, t_fixed)
            out.append((fitted.video, fitted.audio, clip_annotations(events, t_fixed)))
        return out

    def _batches(self, epoch: int):
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 0xBA7C4, epoch]))
        order = rng.permutation(len(self.train_data))
        bs = self.cfg.batch_size
        for i in range(0, len(order), bs):
            yield [self.train_data[j] for j in order[i:i + bs]], rng

    def run_epoch(self) -> EpochRecord:
        cfg = self.cfg
        lr = learning_rate(self.epoch, cfg)
        sums = {k: 0.0 for k in ("total", "inter", "intra", "score", "cls", "reg")}
        grad_norms = []
        n_batches = 0
        for batch, rng in self._batches(self.epoch):
            self.model.zero_grad()
            comps = batch_losses(self.model, batch, self.model.weights, rng,
                                 modality=cfg.modality, train=True)
            total = comps["total"]
            if not np.isfinite(total.value).all():
                detail = {k: float(v.value[0, 0]) for k, v in comps.items()}
                raise TrainingDiverged(
                    f"non-finite loss at epoch {self.epoch}, batch {n_batches}: {detail}")
            total.backward()
            grad_norms.append(clip_global_norm(self.optimizer.params, cfg.clip_norm))
            self.optimizer.step(lr)
            self.model.clamp_temperature()
            for k in sums:
                sums[k] += comps[k].item()
            n_batches += 1
        record = EpochRecord(
            epoch=self.epoch, lr=lr, grad_norm=float(np.mean(grad_norms)),
            **{k: sums[k] / n_batches for k in sums})
        self.epoch += 1
        return record

    def evaluate(self, items=None, decode_cfg: DecodeConfig | None = None,
                 thresholds=None):
        data = items if items is not None else (self.eval_data or self.train_data)
        thresholds = list(thresholds or self.cfg.eval_thresholds)
        preds, gts = {}, {}
        for i, (video, audio, events) in enumerate(data):
            vid = f"item_{i:05d}"
            preds[vid] = self.model.predict(video, audio, modality=self.cfg.modality,
                                            decode_cfg=decode_cfg)
            gts[vid] = events
        return mean_ap(preds, gts, thresholds)

    def fit(self, until=None, decode_cfg: DecodeConfig | None = None):
        """Run up to cfg.epochs epochs; ``until(record)`` may stop early.

        Evaluation (on the eval split when present, else the train split)
        runs every cfg.eval_every epochs and on the final epoch.
        """
        while self.epoch < self.cfg.epochs:
            record = self.run_epoch()
            is_last = self.epoch == self.cfg.epochs
            if self.cfg.eval_every and (self.epoch % self.cfg.eval_every == 0 or is_last):
                report = self.evaluate(decode_cfg=decode_cfg)
                record.map_at = dict(report.map_at)
                record.average_map = report.average_map
            self.history.append(record)
            if until is not None and until(record):
                break
        return self.history

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"train_config": self.cfg.__dict__.copy()}
        meta["train_config"]["eval_thresholds"] = list(self.cfg.eval_thresholds)
        meta.update(extra_meta or {})
        save_checkpoint(path, self.model, self.optimizer, epoch=self.epoch, extra_meta=meta)

    def resume(self, path) -> None:
        arrays, meta = load_checkpoint(path)
        self.model.load_state({k: v for k, v in arrays.items() if not k.startswith("opt.")})
        self.optimizer.load_state(arrays)
        self.optimizer.step_count = meta.get("step_count", 0)
        self.epoch = meta.get("epoch", 0)
