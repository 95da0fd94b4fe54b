"""End-to-end event localization network wiring all submodules together.

Forward path: project/align the two token streams under the adaptive
mask, read token-level score/category predictions off the aligned
features, aggregate across temporal scales with the modality-guided
pyramid, refine with pooled cross-attention, then run shared
classification/regression heads on the fused per-level features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkern as nk
from .attention import AlignmentModule, AttentionConfig, build_mask
from .contrast import (
    LossWeights,
    TokenHeads,
    inter_sample_loss,
    intra_sample_loss,
    select_pairs,
    token_loss,
)
from .detect import DetectionHeads, assignment_arrays, decode, smooth_l1, soft_nms, total_loss
from .params import ParamSet

__all__ = ["ModelConfig", "DecodeConfig", "ModelOutputs", "EventLocalizer", "batch_losses"]

MODALITIES = ("AV", "A", "V")


@dataclass
class ModelConfig:
    d_v: int = 32
    d_a: int = 32
    t_max: int = 64
    num_classes: int = 5
    d: int = 64
    heads: int = 4
    attn_blocks: int = 1
    levels: int = 6
    n_pool: int = 16
    head_hidden: int = 64
    dropout: float = 0.0
    adaptive_mask: bool = True  # all-ones mask when False (ablation switch)

    def validate(self) -> None:
        AttentionConfig(d=self.d, heads=self.heads, blocks=self.attn_blocks,
                        dropout=self.dropout)
        if self.levels < 1 or self.n_pool < 1:
            raise ValueError("levels and n_pool must be >= 1")
        if self.t_max < 2 ** (self.levels - 1):
            raise ValueError("t_max too short for the requested pyramid depth")
        if self.num_classes < 1:
            raise ValueError("need at least one event class")


@dataclass
class DecodeConfig:
    score_threshold: float = 0.1
    max_per_video: int = 100
    nms_sigma: float = 0.5
    nms_min_conf: float = 0.001


@dataclass
class ModelOutputs:
    cls_v: nk.Tensor
    cls_a: nk.Tensor
    v_aligned: nk.Tensor
    a_aligned: nk.Tensor
    pred_v: object
    pred_a: object
    levels: list
    head_outs: list
    level_shapes: list


class EventLocalizer:
    def __init__(self, cfg: ModelConfig, weights: LossWeights | None = None, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.weights = weights or LossWeights()
        self.weights.validate()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0DE1]))
        attn_cfg = AttentionConfig(d=cfg.d, heads=cfg.heads, blocks=cfg.attn_blocks,
                                   dropout=cfg.dropout)
        self.align = AlignmentModule(cfg.d_v, cfg.d_a, cfg.t_max, attn_cfg, rng)
        self.tokens = TokenHeads(cfg.d, cfg.num_classes, cfg.head_hidden, rng)
        from .pyramid import PathAggregationNetwork
        self.pan = PathAggregationNetwork(cfg.d, cfg.levels, cfg.n_pool, cfg.heads, rng)
        self.detect = DetectionHeads(cfg.d, cfg.num_classes, cfg.head_hidden, rng)
        extra = ParamSet("loss")
        self.tau = extra.add("tau", np.array([[self.weights.temperature_init]]))
        self._extra = extra

    def parameters(self) -> list[nk.Tensor]:
        return (self.align.parameters() + self.tokens.parameters()
                + self.pan.parameters() + self.detect.parameters()
                + self._extra.tensors())

    def named_parameters(self) -> dict[str, nk.Tensor]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def clamp_temperature(self) -> None:
        self.tau.value[...] = np.clip(self.tau.value, self.weights.tau_min, self.weights.tau_max)

    def load_state(self, arrays: dict) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:5]} ...")
        for name, p in params.items():
            incoming = np.asarray(arrays[name])
            if incoming.shape != p.value.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {incoming.shape}, model {p.shape}")
            p.value[...] = incoming

    def forward(self, video: np.ndarray, audio: np.ndarray, modality: str = "AV",
                train: bool = False, rng: np.random.Generator | None = None) -> ModelOutputs:
        if modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        video = np.asarray(video, dtype=np.float64)
        audio = np.asarray(audio, dtype=np.float64)
        if modality == "A":
            video = np.zeros_like(video)
        elif modality == "V":
            audio = np.zeros_like(audio)
        l_v, l_a = video.shape[0], audio.shape[0]
        mask = build_mask(l_v, l_a) if self.cfg.adaptive_mask else np.ones((l_v + l_a + 2,) * 2)
        aligned = self.align.align(video, audio, mask=mask, train=train, rng=rng)
        pred_v = self.tokens.forward(aligned.v_aligned, "v")
        pred_a = self.tokens.forward(aligned.a_aligned, "a")
        levels, _ = self.pan.forward(aligned.v_aligned, aligned.a_aligned)
        head_outs = self.detect.forward(levels)
        return ModelOutputs(
            cls_v=aligned.cls_v, cls_a=aligned.cls_a,
            v_aligned=aligned.v_aligned, a_aligned=aligned.a_aligned,
            pred_v=pred_v, pred_a=pred_a,
            levels=levels, head_outs=head_outs,
            level_shapes=[(lv.stride, lv.video_feats.rows) for lv in levels],
        )

    def predict(self, video: np.ndarray, audio: np.ndarray, modality: str = "AV",
                decode_cfg: DecodeConfig | None = None):
        """Forward, decode and suppress; returns LocalizedEvents."""
        dc = decode_cfg or DecodeConfig()
        with nk.no_grad():
            out = self.forward(video, audio, modality=modality)
        level_outputs = [(logits.value, offsets.value) for logits, offsets in out.head_outs]
        strides = [s for s, _ in out.level_shapes]
        events = decode(level_outputs, strides, video.shape[0],
                        score_threshold=dc.score_threshold, max_per_video=dc.max_per_video)
        return soft_nms(events, sigma=dc.nms_sigma, min_conf=dc.nms_min_conf)


def batch_losses(model: EventLocalizer, items, weights: LossWeights,
                 rng: np.random.Generator, modality: str = "AV", train: bool = True) -> dict:
    """All loss components over a batch of (video, audio, gts) triples.

    The classification term averages over every timestep of every level;
    the regression term averages over positive timesteps only (zero when
    there are none); the inter-sample term needs at least two videos and
    is zero otherwise.
    """
    from .contrast import cross_entropy

    cls_v_list, cls_a_list = [], []
    score_terms, intra_terms, ce_terms = [], [], []
    reg_parts, reg_count = [], 0
    for video, audio, gts in items:
        out = model.forward(video, audio, modality=modality, train=train, rng=rng)
        cls_v_list.append(out.cls_v)
        cls_a_list.append(out.cls_a)
        k = model.cfg.num_classes
        score_terms.append((token_loss(out.pred_v, gts, k) + token_loss(out.pred_a, gts, k)) * 0.5)
        pairs = select_pairs(out.pred_v, out.pred_a, gts, weights.score_threshold, k,
                             rng=rng, cap=weights.pair_cap)
        intra_terms.append(intra_sample_loss(pairs, out.v_aligned, out.a_aligned, model.tau))
        assignments = assignment_arrays(out.level_shapes, gts, k)
        all_logits = nk.concat_rows([logits for logits, _ in out.head_outs])
        all_targets = np.concatenate([a.class_target for a in assignments])
        ce_terms.append(cross_entropy(all_logits, all_targets))
        for (_, offsets), a in zip(out.head_outs, assignments):
            pos_idx = np.flatnonzero(a.positive)
            if len(pos_idx) == 0:
                continue
            from .contrast import gather_rows
            pred_off = gather_rows(offsets, pos_idx.tolist())
            sl1 = smooth_l1(pred_off, a.offsets[pos_idx])
            reg_parts.append(nk.tsum(sl1))
            reg_count += len(pos_idx)

    def mean_of(terms):
        out = terms[0]
        for t in terms[1:]:
            out = out + t
        return out * (1.0 / len(terms))

    inter = inter_sample_loss(cls_v_list, cls_a_list, model.tau) if len(items) >= 2 \
        else nk.Tensor(0.0)
    reg = nk.Tensor(0.0)
    if reg_parts:
        total_reg = reg_parts[0]
        for part in reg_parts[1:]:
            total_reg = total_reg + part
        reg = total_reg * (1.0 / reg_count)
    components = {
        "inter": inter,
        "intra": mean_of(intra_terms),
        "score": mean_of(score_terms),
        "cls": mean_of(ce_terms),
        "reg": reg,
    }
    components["total"] = total_loss(components, weights)
    return components
