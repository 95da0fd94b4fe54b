"""Inter/intra-sample contrastive objectives with score-based pair selection.

Token-level score and category heads supervise every timestep early in the
network; their predictions drive the selection of positive and
hard-negative features for the intra-sample loss.  A hard negative is a
timestep the model scores as confidently event-like while assigning the
wrong category (any category at all, when the timestep is background).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkern as nk
from .params import ParamSet

__all__ = [
    "LossWeights",
    "TokenPrediction",
    "ContrastivePairSet",
    "TokenHeads",
    "contrastive_kernel",
    "inter_sample_loss",
    "intra_sample_loss",
    "select_pairs",
    "score_targets",
    "class_targets",
    "active_labels",
    "binary_cross_entropy",
    "cross_entropy",
    "token_loss",
    "gather_rows",
]


@dataclass
class LossWeights:
    l_inter: float = 0.3
    l_intra: float = 0.3
    l_score: float = 0.5
    l_cls: float = 1.0
    l_reg: float = 1.0
    temperature_init: float = 0.07
    tau_min: float = 0.01
    tau_max: float = 1.0
    score_threshold: float = 0.5
    pair_cap: int = 32

    def validate(self) -> None:
        for name in ("l_inter", "l_intra", "l_score", "l_cls", "l_reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.tau_min <= self.temperature_init <= self.tau_max:
            raise ValueError("temperature_init must lie within the clamp bounds")
        if not 0 < self.score_threshold < 1:
            raise ValueError("score_threshold must be in (0, 1)")
        if self.pair_cap < 1:
            raise ValueError("pair_cap must be >= 1")


@dataclass
class TokenPrediction:
    """Per-timestep score in [0, 1] plus category logits (incl. background)."""

    score: nk.Tensor        # L x 1, sigmoid output
    score_logit: nk.Tensor  # L x 1, pre-sigmoid (for the stable BCE)
    class_logits: nk.Tensor  # L x (num_classes + 1)


@dataclass
class ContrastivePairSet:
    pos_video: list = field(default_factory=list)
    hardneg_video: list = field(default_factory=list)
    pos_audio: list = field(default_factory=list)
    hardneg_audio: list = field(default_factory=list)


def _tau_tensor(tau) -> nk.Tensor:
    t = nk.constant(tau)
    if t.shape != (1, 1):
        raise ValueError("temperature must be a scalar")
    return t


def contrastive_kernel(z, z_pos, z_negs, tau) -> nk.Tensor:
    """-log( exp(z.z+/tau) / (exp(z.z+/tau) + sum_k exp(z.z-_k/tau)) ).

    All vectors are L2-normalized here before dotting, so the loss is
    invariant to positive rescaling of its inputs.
    """
    if not z_negs:
        raise ValueError("contrastive kernel needs at least one negative")
    tau = _tau_tensor(tau)
    zn = nk.l2_normalize_rows(nk.constant(z))
    pn = nk.l2_normalize_rows(nk.constant(z_pos))
    negs = nk.l2_normalize_rows(nk.concat_rows([nk.constant(n) for n in z_negs]))
    pos_sim = nk.div(zn @ pn.T, tau)                # 1 x 1
    neg_sims = nk.div(zn @ negs.T, tau)             # 1 x K
    denom = nk.exp(pos_sim) + nk.tsum(nk.exp(neg_sims), axis=1)
    return nk.log(denom) - pos_sim


def _stack(rows) -> nk.Tensor:
    if isinstance(rows, nk.Tensor):
        return rows
    return nk.concat_rows([nk.constant(r) for r in rows])


def inter_sample_loss(cls_v, cls_a, tau) -> nk.Tensor:
    """Batch contrastive alignment of the per-modality summary tokens.

    For anchor j in one modality, the positive is the matching index in
    the other modality and the negatives are the B-1 mismatched ones;
    both directions are averaged over all 2B anchor terms.
    """
    v = _stack(cls_v)
    a = _stack(cls_a)
    if v.rows != a.rows:
        raise ValueError("modalities must contribute the same batch size")
    b = v.rows
    if b < 2:
        raise ValueError("inter-sample loss needs a batch of at least 2")
    tau = _tau_tensor(tau)
    vn = nk.l2_normalize_rows(v)
    an = nk.l2_normalize_rows(a)
    sims = nk.div(vn @ an.T, tau)                   # B x B, row=video anchor
    e = nk.exp(sims)
    eye = np.eye(b)
    diag = nk.tsum(nk.mul(sims, nk.Tensor(eye)), axis=1)        # B x 1
    loss_v = nk.log(nk.tsum(e, axis=1)) - diag                   # anchors in V
    loss_a = nk.transpose(nk.log(nk.tsum(e, axis=0))) - diag     # anchors in A
    return (nk.tsum(loss_v) + nk.tsum(loss_a)) * (1.0 / (2 * b))


def gather_rows(t: nk.Tensor, indices) -> nk.Tensor:
    """Differentiable row gather via a constant one-hot selection matrix."""
    sel = np.zeros((len(indices), t.rows))
    sel[np.arange(len(indices)), indices] = 1.0
    return nk.Tensor(sel) @ t


def intra_sample_loss(pairs: ContrastivePairSet, feats_v, feats_a, tau) -> nk.Tensor:
    """Both directional terms of the within-video contrastive objective.

    Each direction averages the kernel over every (anchor, positive)
    combination against that direction's full hard-negative set.  If any
    of the four index lists is empty the loss is zero: early training
    steps legitimately produce no confident tokens.
    """
    if not (pairs.pos_video and pairs.pos_audio and pairs.hardneg_video and pairs.hardneg_audio):
        return nk.Tensor(0.0)
    tau = _tau_tensor(tau)
    feats_v = nk.constant(feats_v)
    feats_a = nk.constant(feats_a)

    def direction(anchors, positives, negatives):
        zn = nk.l2_normalize_rows(anchors)
        pn = nk.l2_normalize_rows(positives)
        hn = nk.l2_normalize_rows(negatives)
        pos = nk.div(zn @ pn.T, tau)                 # n_anchor x n_pos
        neg = nk.div(zn @ hn.T, tau)                 # n_anchor x n_neg
        denom = nk.tsum(nk.exp(neg), axis=1)         # n_anchor x 1
        losses = nk.log(nk.add(nk.exp(pos), denom)) - pos
        return nk.mean_all(losses)

    term_v = direction(gather_rows(feats_v, pairs.pos_video),
                       gather_rows(feats_a, pairs.pos_audio),
                       gather_rows(feats_a, pairs.hardneg_audio))
    term_a = direction(gather_rows(feats_a, pairs.pos_audio),
                       gather_rows(feats_v, pairs.pos_video),
                       gather_rows(feats_v, pairs.hardneg_video))
    return (term_v + term_a) * 0.5


# -- token-level supervision ----------------------------------------------------


class TokenHeads:
    """Per-modality 2-layer score and category heads, shared across timesteps."""

    def __init__(self, d: int, num_classes: int, hidden: int,
                 rng: np.random.Generator, prefix: str = "tokens"):
        self.num_classes = num_classes
        ps = ParamSet(prefix)
        self._heads = {}
        for modality in ("v", "a"):
            sw1, sb1 = ps.add_linear(rng, f"{modality}.score1", d, hidden)
            sw2, sb2 = ps.add_linear(rng, f"{modality}.score2", hidden, 1)
            cw1, cb1 = ps.add_linear(rng, f"{modality}.cls1", d, hidden)
            cw2, cb2 = ps.add_linear(rng, f"{modality}.cls2", hidden, num_classes + 1)
            self._heads[modality] = (sw1, sb1, sw2, sb2, cw1, cb1, cw2, cb2)
        self.params = ps

    def parameters(self):
        return self.params.tensors()

    def forward(self, feats, modality: str) -> TokenPrediction:
        sw1, sb1, sw2, sb2, cw1, cb1, cw2, cb2 = self._heads[modality]
        feats = nk.constant(feats)
        score_logit = nk.linear(nk.relu(nk.linear(feats, sw1, sb1)), sw2, sb2)
        class_logits = nk.linear(nk.relu(nk.linear(feats, cw1, cb1)), cw2, cb2)
        return TokenPrediction(score=nk.sigmoid(score_logit),
                               score_logit=score_logit,
                               class_logits=class_logits)


def active_labels(t_len: int, gts, num_classes: int) -> np.ndarray:
    """Per-timestep active class, background = num_classes.

    A timestep t is inside event g when t is in [g.start, g.end]; the
    shortest covering event wins when several overlap (ties: earlier
    start, then lower label).
    """
    labels = np.full(t_len, num_classes, dtype=int)
    best = np.full(t_len, np.inf)
    for g in sorted(gts, key=lambda g: (g.duration, g.start, g.label)):
        lo = int(np.ceil(g.start))
        hi = int(np.floor(g.end))
        for t in range(max(lo, 0), min(hi, t_len - 1) + 1):
            if g.duration < best[t]:
                best[t] = g.duration
                labels[t] = g.label
    return labels


def score_targets(t_len: int, gts) -> np.ndarray:
    tgt = np.zeros((t_len, 1))
    for g in gts:
        lo = max(int(np.ceil(g.start)), 0)
        hi = min(int(np.floor(g.end)), t_len - 1)
        if hi >= lo:
            tgt[lo:hi + 1] = 1.0
    return tgt


def class_targets(t_len: int, gts, num_classes: int) -> np.ndarray:
    return active_labels(t_len, gts, num_classes)


def binary_cross_entropy(logits: nk.Tensor, targets: np.ndarray) -> nk.Tensor:
    """Mean BCE from raw logits: softplus(z) - y*z (overflow-safe)."""
    y = nk.Tensor(np.asarray(targets, dtype=np.float64).reshape(logits.shape))
    return nk.mean_all(nk.softplus(logits) - nk.mul(y, logits))


def cross_entropy(logits: nk.Tensor, targets: np.ndarray) -> nk.Tensor:
    """Mean categorical cross-entropy with a detached-max stabilized LSE."""
    idx = np.asarray(targets, dtype=int)
    if idx.shape[0] != logits.rows:
        raise ValueError("one target per row required")
    mx = nk.Tensor(logits.value.max(axis=1, keepdims=True))  # constant shift
    lse = nk.log(nk.tsum(nk.exp(logits - mx), axis=1)) + mx
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(idx)), idx] = 1.0
    picked = nk.tsum(nk.mul(logits, nk.Tensor(onehot)), axis=1)
    return nk.mean_all(lse - picked)


def token_loss(pred: TokenPrediction, gts, num_classes: int) -> nk.Tensor:
    """BCE on the binary score plus CE on the category, one modality."""
    t_len = pred.score.rows
    bce = binary_cross_entropy(pred.score_logit, score_targets(t_len, gts))
    ce = cross_entropy(pred.class_logits, class_targets(t_len, gts, num_classes))
    return bce + ce


# -- score-based pair selection ---------------------------------------------------


def _classify_indices(pred: TokenPrediction, active: np.ndarray, threshold: float):
    scores = pred.score.value[:, 0]
    argmax = pred.class_logits.value.argmax(axis=1)
    num_classes = pred.class_logits.cols - 1
    pos, hard = [], []
    for t in range(len(scores)):
        if scores[t] < threshold:
            continue
        if active[t] != num_classes and argmax[t] == active[t]:
            pos.append(t)
        else:
            hard.append(t)
    return pos, hard


def _cap(indices: list, cap: int, rng: np.random.Generator) -> list:
    if len(indices) <= cap:
        return indices
    keep = sorted(rng.choice(len(indices), size=cap, replace=False).tolist())
    return [indices[i] for i in keep]


def select_pairs(pred_v: TokenPrediction, pred_a: TokenPrediction, gts,
                 threshold: float, num_classes: int,
                 rng: np.random.Generator | None = None, cap: int = 32) -> ContrastivePairSet:
    """Confident-and-correct timesteps become positives, confident-but-wrong
    ones hard negatives; everything else is unused.  Background timesteps
    with a confident score are hard negatives regardless of the predicted
    category.  Lists beyond ``cap`` entries are subsampled with ``rng``."""
    if pred_v.score.rows != pred_a.score.rows:
        raise ValueError("modalities must share the padded length")
    active = active_labels(pred_v.score.rows, gts, num_classes)
    pos_v, hard_v = _classify_indices(pred_v, active, threshold)
    pos_a, hard_a = _classify_indices(pred_a, active, threshold)
    rng = rng or np.random.default_rng(0)
    return ContrastivePairSet(
        pos_video=_cap(pos_v, cap, rng),
        hardneg_video=_cap(hard_v, cap, rng),
        pos_audio=_cap(pos_a, cap, rng),
        hardneg_audio=_cap(hard_a, cap, rng),
    )
