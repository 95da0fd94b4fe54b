"""Adaptive masked self-attention over concatenated audio-visual tokens.

Token layout for a (video length L_v, audio length L_a) pair:

    index 0              : CLS_V summary token
    indices 1 .. L_v     : video segment tokens
    index L_v + 1        : CLS_A summary token
    indices L_v+2 .. end : audio segment tokens

The binary mask admits full attention within each modality; across
modalities only tokens mapping to the same temporal segment see each
other.  Each CLS token attends to its own modality plus the other CLS.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numkern as nk
from .params import ParamSet

__all__ = [
    "AttentionConfig",
    "AttentionParams",
    "AlignOutput",
    "build_mask",
    "token_layout",
    "cross_segment_map",
    "adaptive_attention",
    "AlignmentModule",
]


@dataclass
class AttentionConfig:
    d: int = 64
    heads: int = 4
    blocks: int = 1
    dropout: float = 0.0
    ffn_hidden: int | None = None  # defaults to 2*d

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"width {self.d} not divisible by {self.heads} heads")
        if not 1 <= self.blocks <= 4:
            raise ValueError("blocks must be in [1, 4]")


@dataclass
class AttentionParams:
    """Projections for one adaptive-attention call."""

    w_q: nk.Tensor
    w_k: nk.Tensor
    w_v: nk.Tensor
    heads: int


@dataclass
class AlignOutput:
    v_aligned: nk.Tensor
    a_aligned: nk.Tensor
    cls_v: nk.Tensor
    cls_a: nk.Tensor


def token_layout(l_v: int, l_a: int) -> dict:
    return {
        "cls_v": 0,
        "video": slice(1, 1 + l_v),
        "cls_a": 1 + l_v,
        "audio": slice(2 + l_v, 2 + l_v + l_a),
        "size": l_v + l_a + 2,
    }


def cross_segment_map(l_v: int, l_a: int) -> np.ndarray:
    """Audio index j -> video index under round-half-up of j * L_v / L_a."""
    j = np.arange(l_a)
    return np.minimum(np.floor(j * l_v / l_a + 0.5).astype(int), l_v - 1)


@lru_cache(maxsize=256)
def build_mask(l_v: int, l_a: int) -> np.ndarray:
    """Binary (L_v + L_a + 2)^2 attention mask.

    Intra-modal blocks are all ones; a cross-modal (video i, audio j) bit
    is set iff both map to the same temporal segment (nearest-index
    rounding when lengths differ).  CLS_V covers all video tokens plus
    itself, CLS_A all audio tokens plus itself, and the two CLS tokens
    see each other.
    """
    if l_v < 1 or l_a < 1:
        raise ValueError("both modalities need at least one token")
    lay = token_layout(l_v, l_a)
    n = lay["size"]
    m = np.zeros((n, n), dtype=np.int8)
    vid, aud = lay["video"], lay["audio"]
    cv, ca = lay["cls_v"], lay["cls_a"]
    m[vid, vid] = 1
    m[aud, aud] = 1
    seg = cross_segment_map(l_v, l_a)
    for j in range(l_a):
        i = seg[j]
        m[1 + i, lay["audio"].start + j] = 1
        m[lay["audio"].start + j, 1 + i] = 1
    m[cv, cv] = 1
    m[cv, vid] = 1
    m[vid, cv] = 1
    m[ca, ca] = 1
    m[ca, aud] = 1
    m[aud, ca] = 1
    m[cv, ca] = 1
    m[ca, cv] = 1
    m.setflags(write=False)
    return m


def adaptive_attention(x: nk.Tensor, mask: np.ndarray, params: AttentionParams) -> nk.Tensor:
    """Mask-gated multi-head self-attention; heads concatenated, no out-proj."""
    x = nk.constant(x)
    n = x.rows
    if mask.shape != (n, n):
        raise ValueError(f"mask shape {mask.shape} does not match {n} tokens")
    d = params.w_q.cols
    if d % params.heads != 0:
        raise ValueError("width not divisible by head count")
    d_head = d // params.heads
    q = x @ params.w_q
    k = x @ params.w_k
    v = x @ params.w_v
    outs = []
    for h in range(params.heads):
        lo, hi = h * d_head, (h + 1) * d_head
        qh = nk.slice_cols(q, lo, hi)
        kh = nk.slice_cols(k, lo, hi)
        vh = nk.slice_cols(v, lo, hi)
        scores = (qh @ kh.T) * (d_head ** -0.5)
        aat = nk.masked_softmax(scores, mask)
        outs.append(aat @ vh)
    return outs[0] if len(outs) == 1 else nk.concat_cols(outs)


class AlignmentModule:
    """Input projection, CLS tokens, and a stack of masked attention blocks.

    Learned absolute position embeddings (one table per modality, sized to
    the configured maximum length) are added after the input projection;
    without them the anchor-free boundary regression downstream has no
    way to express where a token sits relative to an event.
    """

    def __init__(self, d_v: int, d_a: int, t_max: int, cfg: AttentionConfig,
                 rng: np.random.Generator, prefix: str = "align"):
        self.cfg = cfg
        self.t_max = t_max
        ps = ParamSet(prefix)
        d = cfg.d
        self.w_in_v, self.b_in_v = ps.add_linear(rng, "in_v", d_v, d)
        self.w_in_a, self.b_in_a = ps.add_linear(rng, "in_a", d_a, d)
        self.cls_v = ps.add("cls_v", rng.standard_normal((1, d)) * 0.02)
        self.cls_a = ps.add("cls_a", rng.standard_normal((1, d)) * 0.02)
        self.pos_v = ps.add("pos_v", rng.standard_normal((t_max, d)) * 0.02)
        self.pos_a = ps.add("pos_a", rng.standard_normal((t_max, d)) * 0.02)
        hidden = cfg.ffn_hidden or 2 * d
        self.blocks = []
        for i in range(cfg.blocks):
            blk = {
                "w_q": ps.add(f"blk{i}.w_q", rng.standard_normal((d, d)) * d ** -0.5),
                "w_k": ps.add(f"blk{i}.w_k", rng.standard_normal((d, d)) * d ** -0.5),
                "w_v": ps.add(f"blk{i}.w_v", rng.standard_normal((d, d)) * d ** -0.5),
                "ln1_g": ps.add(f"blk{i}.ln1_g", np.ones((1, d))),
                "ln1_b": ps.add(f"blk{i}.ln1_b", np.zeros((1, d))),
                "ln2_g": ps.add(f"blk{i}.ln2_g", np.ones((1, d))),
                "ln2_b": ps.add(f"blk{i}.ln2_b", np.zeros((1, d))),
            }
            blk["w_o"], blk["b_o"] = ps.add_linear(rng, f"blk{i}.out", d, d)
            blk["w_f1"], blk["b_f1"] = ps.add_linear(rng, f"blk{i}.ffn1", d, hidden)
            blk["w_f2"], blk["b_f2"] = ps.add_linear(rng, f"blk{i}.ffn2", hidden, d)
            self.blocks.append(blk)
        self.params = ps

    def parameters(self):
        return self.params.tensors()

    def encode(self, x: nk.Tensor, mask: np.ndarray, train: bool = False,
               rng: np.random.Generator | None = None) -> nk.Tensor:
        """Run the block stack over an already-concatenated token matrix."""
        rate = self.cfg.dropout if train else 0.0
        for blk in self.blocks:
            h = nk.layer_norm(x, blk["ln1_g"], blk["ln1_b"])
            att = adaptive_attention(
                h, mask, AttentionParams(blk["w_q"], blk["w_k"], blk["w_v"], self.cfg.heads))
            att = nk.linear(att, blk["w_o"], blk["b_o"])
            if rate > 0:
                att = nk.dropout(att, rate, rng)
            x = x + att
            h2 = nk.layer_norm(x, blk["ln2_g"], blk["ln2_b"])
            ff = nk.linear(nk.relu(nk.linear(h2, blk["w_f1"], blk["b_f1"])), blk["w_f2"], blk["b_f2"])
            if rate > 0:
                ff = nk.dropout(ff, rate, rng)
            x = x + ff
        return x

    def align(self, video, audio, mask: np.ndarray | None = None,
              train: bool = False, rng: np.random.Generator | None = None) -> AlignOutput:
        video = nk.constant(video)
        audio = nk.constant(audio)
        l_v, l_a = video.rows, audio.rows
        if l_v > self.t_max or l_a > self.t_max:
            raise ValueError(f"sequence longer than position table ({self.t_max})")
        vp = nk.linear(video, self.w_in_v, self.b_in_v) + nk.slice_rows(self.pos_v, 0, l_v)
        ap = nk.linear(audio, self.w_in_a, self.b_in_a) + nk.slice_rows(self.pos_a, 0, l_a)
        x = nk.concat_rows([self.cls_v, vp, self.cls_a, ap])
        if mask is None:
            mask = build_mask(l_v, l_a)
        out = self.encode(x, mask, train=train, rng=rng)
        lay = token_layout(l_v, l_a)
        return AlignOutput(
            v_aligned=nk.slice_rows(out, lay["video"].start, lay["video"].stop),
            a_aligned=nk.slice_rows(out, lay["audio"].start, lay["audio"].stop),
            cls_v=nk.slice_rows(out, 0, 1),
            cls_a=nk.slice_rows(out, lay["cls_a"], lay["cls_a"] + 1),
        )
