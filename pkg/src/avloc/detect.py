"""Anchor-free detection: target assignment, heads, decoding, Soft-NMS.

A timestep at pyramid level l (stride s, center c = t*s) is a positive for
ground-truth g when c lies in [g.start, g.end] and g's duration falls in
the level's band [2s, 8s] (the bottom band extends down to 0, the top one
up to infinity).  When several ground truths match one timestep the
shortest-duration one wins.  Regression targets are stride-normalized
distances to the event boundaries.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numkern as nk
from .contrast import LossWeights
from .params import ParamSet

__all__ = [
    "TimestepTarget",
    "LocalizedEvent",
    "LevelAssignment",
    "duration_band",
    "assign_labels",
    "assignment_arrays",
    "DetectionHeads",
    "smooth_l1",
    "total_loss",
    "decode",
    "soft_nms",
    "save_predictions",
    "load_predictions",
]


@dataclass
class TimestepTarget:
    level: int
    index: int
    class_id: int                 # num_classes means background
    d_start: float | None = None  # stride-normalized, positives only
    d_end: float | None = None


@dataclass
class LocalizedEvent:
    start: float
    end: float
    label: int
    confidence: float

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"event start {self.start} must precede end {self.end}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class LevelAssignment:
    """Vectorized per-level targets used by the training loss."""

    stride: int
    class_target: np.ndarray   # (len,) ints, num_classes = background
    offsets: np.ndarray        # (len, 2) stride-normalized, zeros where background
    positive: np.ndarray       # (len,) bool


def duration_band(level: int, total_levels: int, stride: int) -> tuple[float, float]:
    lo = 0.0 if level == 1 else 2.0 * stride
    hi = math.inf if level == total_levels else 8.0 * stride
    return lo, hi


def assignment_arrays(level_shapes, gts, num_classes: int) -> list[LevelAssignment]:
    """level_shapes: [(stride, length), ...] ordered from level 1 upward."""
    total = len(level_shapes)
    out = []
    for li, (stride, length) in enumerate(level_shapes, start=1):
        lo, hi = duration_band(li, total, stride)
        cls = np.full(length, num_classes, dtype=int)
        offs = np.zeros((length, 2))
        pos = np.zeros(length, dtype=bool)
        in_band = [g for g in gts if lo <= g.duration <= hi]
        for t in range(length):
            c = t * stride
            matches = [g for g in in_band if g.start <= c <= g.end]
            if not matches:
                continue
            g = min(matches, key=lambda g: (g.duration, g.start, g.label))
            cls[t] = g.label
            offs[t, 0] = (c - g.start) / stride
            offs[t, 1] = (g.end - c) / stride
            pos[t] = True
        out.append(LevelAssignment(stride, cls, offs, pos))
    return out


def assign_labels(level_shapes, gts, num_classes: int) -> list[TimestepTarget]:
    """Flat per-timestep target list across all levels (background included)."""
    targets = []
    for li, assignment in enumerate(assignment_arrays(level_shapes, gts, num_classes), start=1):
        for t in range(len(assignment.class_target)):
            if assignment.positive[t]:
                targets.append(TimestepTarget(li, t, int(assignment.class_target[t]),
                                              float(assignment.offsets[t, 0]),
                                              float(assignment.offsets[t, 1])))
            else:
                targets.append(TimestepTarget(li, t, num_classes))
    return targets


class DetectionHeads:
    """Modality fusion plus classification/regression heads shared across levels."""

    def __init__(self, d: int, num_classes: int, hidden: int,
                 rng: np.random.Generator, prefix: str = "detect"):
        self.num_classes = num_classes
        ps = ParamSet(prefix)
        self.w_fuse, self.b_fuse = ps.add_linear(rng, "fuse", 2 * d, d)
        self.cw1, self.cb1 = ps.add_linear(rng, "cls1", d, hidden)
        self.cw2, self.cb2 = ps.add_linear(rng, "cls2", hidden, num_classes + 1)
        self.rw1, self.rb1 = ps.add_linear(rng, "reg1", d, hidden)
        self.rw2, self.rb2 = ps.add_linear(rng, "reg2", hidden, 2)
        self.params = ps

    def parameters(self):
        return self.params.tensors()

    def fuse(self, level) -> nk.Tensor:
        return nk.linear(nk.concat_cols([level.video_feats, level.audio_feats]),
                         self.w_fuse, self.b_fuse)

    def forward(self, levels):
        """Per level: (class logits incl. background, softplus offsets >= 0).

        Heads are shared across levels and act per timestep, so all levels
        run as one concatenated pass, split back at the end.
        """
        lengths = [level.video_feats.rows for level in levels]
        f = nk.concat_rows([self.fuse(level) for level in levels])
        logits = nk.linear(nk.relu(nk.linear(f, self.cw1, self.cb1)), self.cw2, self.cb2)
        offsets = nk.softplus(nk.linear(nk.relu(nk.linear(f, self.rw1, self.rb1)),
                                        self.rw2, self.rb2))
        outs = []
        off = 0
        for n in lengths:
            outs.append((nk.slice_rows(logits, off, off + n),
                         nk.slice_rows(offsets, off, off + n)))
            off += n
        return outs


def smooth_l1(pred, target, beta: float = 1.0) -> nk.Tensor:
    """0.5 x^2 / beta for |x| < beta else |x| - beta/2, x = pred - target."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    pred = nk.constant(pred)
    target_t = nk.constant(np.asarray(target, dtype=np.float64))
    x = pred - target_t
    absx = nk.maximum(x, -x)
    quad_zone = nk.Tensor((np.abs(x.value) < beta).astype(np.float64))
    quad = nk.mul(x, x) * (0.5 / beta)
    lin = absx - 0.5 * beta
    return nk.mul(quad_zone, quad) + nk.mul(1.0 - quad_zone, lin)


def total_loss(components: dict, weights: LossWeights) -> nk.Tensor:
    """lambda-weighted sum of inter/intra/score/cls/reg loss tensors."""
    order = (("inter", weights.l_inter), ("intra", weights.l_intra),
             ("score", weights.l_score), ("cls", weights.l_cls), ("reg", weights.l_reg))
    out = nk.Tensor(0.0)
    for key, lam in order:
        out = out + nk.constant(components[key]) * float(lam)
    return out


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def decode(level_outputs, strides, t_total: float, score_threshold: float = 0.1,
           max_per_video: int = 100) -> list[LocalizedEvent]:
    """Per timestep: event (c - ds*s, c + de*s, argmax class, q) when the best
    real-class probability q clears the threshold; background never emits.
    Boundaries are clamped to [0, T]; the top max_per_video survive."""
    if not 0 < score_threshold < 1:
        raise ValueError("score_threshold must be in (0, 1)")
    events = []
    for (logits, offsets), stride in zip(level_outputs, strides):
        probs = _softmax_rows(np.asarray(logits))
        offs = np.asarray(offsets)
        real = probs[:, :-1]  # background column excluded
        best = real.argmax(axis=1)
        conf = real[np.arange(len(real)), best]
        for t in range(len(real)):
            if conf[t] < score_threshold:
                continue
            c = t * stride
            start = max(0.0, min(c - offs[t, 0] * stride, float(t_total)))
            end = max(0.0, min(c + offs[t, 1] * stride, float(t_total)))
            if end <= start:
                continue
            events.append(LocalizedEvent(start, end, int(best[t]), float(conf[t])))
    events.sort(key=lambda e: (-e.confidence, e.start, e.label, e.end))
    return events[:max_per_video]


def _tiou(a: LocalizedEvent, b: LocalizedEvent) -> float:
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union if union > 0 else 0.0


def soft_nms(events, sigma: float = 0.5, min_conf: float = 0.001) -> list[LocalizedEvent]:
    """Gaussian-decay suppression within each class.

    Repeatedly keeps the highest-confidence survivor (ties: earlier start,
    lower class index) and decays every remaining same-class event by
    exp(-tIoU^2 / sigma); events falling below min_conf are dropped.
    Never increases a confidence and never touches boundaries or labels.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pool = [LocalizedEvent(e.start, e.end, e.label, e.confidence) for e in events]
    kept: list[LocalizedEvent] = []
    while pool:
        best = min(pool, key=lambda e: (-e.confidence, e.start, e.label, e.end))
        pool.remove(best)
        kept.append(best)
        nxt = []
        for e in pool:
            if e.label == best.label:
                overlap = _tiou(best, e)
                if overlap > 0:
                    e = LocalizedEvent(e.start, e.end, e.label,
                                       e.confidence * math.exp(-(overlap ** 2) / sigma))
            if e.confidence >= min_conf:
                nxt.append(e)
        pool = nxt
    return kept


def save_predictions(per_video: dict, path) -> None:
    doc = [{"id": vid,
            "events": [{"start": e.start, "end": e.end, "label": e.label, "score": e.confidence}
                       for e in events]}
           for vid, events in per_video.items()]
    Path(path).write_text(json.dumps(doc, indent=1))


def load_predictions(path) -> dict:
    doc = json.loads(Path(path).read_text())
    out = {}
    for rec in doc:
        out[rec["id"]] = [LocalizedEvent(ev["start"], ev["end"], int(ev["label"]), ev["score"])
                          for ev in rec["events"]]
    return out
