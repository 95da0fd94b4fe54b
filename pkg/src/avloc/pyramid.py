"""Multi-scale path aggregation with modality-guided adapters and pooling.

The temporal pyramid halves (floor) the token count per level via strided
max-pooling plus a linear map, then runs one top-down and one bottom-up
pass.  Each pass fuses adjacent levels by resize-and-concatenate followed
by a linear projection; a max-sigmoid adapter then gates each modality by
the other's same-level features, and the gated features are concatenated
with their cross-stage (pre-adapter) counterpart and projected back to
width d.

Cross-stage projections start as [0; I] and the pooling module's output
projections start at zero, so a freshly initialized network is exactly a
pure per-modality pyramid; all cross-modal influence is learned.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numkern as nk
from .params import ParamSet

__all__ = [
    "PyramidLevel",
    "PooledTokens",
    "max_sigmoid_gate",
    "audio_guided_adapter",
    "visual_guided_adapter",
    "segment_average_matrix",
    "nearest_resize_matrix",
    "max_pool_halve",
    "PathAggregationNetwork",
]


@dataclass
class PyramidLevel:
    level: int                  # 1-based
    stride: int                 # 2**(level-1) timesteps per token
    video_feats: nk.Tensor
    audio_feats: nk.Tensor


@dataclass
class PooledTokens:
    video_tokens: nk.Tensor     # N_pool x d
    audio_tokens: nk.Tensor     # N_pool x d


def max_sigmoid_gate(x: nk.Tensor, guide: nk.Tensor) -> nk.Tensor:
    """Row-wise gate: x_i * sigmoid(max_j (x_i . guide_j)).

    The max runs over the guiding modality's rows (tokens); sigmoid keeps
    every scaling factor strictly inside (0, 1).
    """
    x = nk.constant(x)
    guide = nk.constant(guide)
    gate = nk.sigmoid(nk.row_max(x @ guide.T))
    return nk.mul(x, gate)


def audio_guided_adapter(v_l, a_guide) -> nk.Tensor:
    return max_sigmoid_gate(v_l, a_guide)


def visual_guided_adapter(a_l, v_guide) -> nk.Tensor:
    return max_sigmoid_gate(a_l, v_guide)


@lru_cache(maxsize=256)
def segment_average_matrix(total: int, n_pool: int) -> np.ndarray:
    """(n_pool x total) averaging matrix over contiguous near-equal segments."""
    if n_pool < 1 or n_pool > total:
        raise ValueError(f"cannot pool {total} rows into {n_pool} segments")
    mat = np.zeros((n_pool, total))
    for i, seg in enumerate(np.array_split(np.arange(total), n_pool)):
        mat[i, seg] = 1.0 / len(seg)
    mat.setflags(write=False)
    return mat


@lru_cache(maxsize=256)
def nearest_resize_matrix(src_len: int, dst_len: int) -> np.ndarray:
    """(dst_len x src_len) nearest-neighbor row-resampling matrix."""
    mat = np.zeros((dst_len, src_len))
    idx = np.minimum((np.arange(dst_len) * src_len) // dst_len, src_len - 1)
    mat[np.arange(dst_len), idx] = 1.0
    mat.setflags(write=False)
    return mat


def max_pool_halve(x: nk.Tensor) -> nk.Tensor:
    """Strided max-pool (kernel 2, stride 2); drops a trailing odd row."""
    x = nk.constant(x)
    pairs = x.rows // 2
    if pairs < 1:
        raise ValueError("need at least two rows to pool")
    a = nk.slice_rows(x, 0, 2 * pairs, 2)
    b = nk.slice_rows(x, 1, 2 * pairs, 2)
    return nk.maximum(a, b)


class PathAggregationNetwork:
    def __init__(self, d: int, levels: int, n_pool: int, heads: int,
                 rng: np.random.Generator, prefix: str = "pan"):
        if levels < 1:
            raise ValueError("need at least one pyramid level")
        if n_pool < 1:
            raise ValueError("n_pool must be >= 1")
        if d % heads != 0:
            raise ValueError("width must be divisible by head count")
        self.d = d
        self.levels = levels
        self.n_pool = n_pool
        self.heads = heads
        ps = ParamSet(prefix)
        cs_init = np.vstack([np.zeros((d, d)), np.eye(d)])
        self.down = []
        for l in range(levels - 1):
            self.down.append({m: ps.add_linear(rng, f"down{l}.{m}", d, d) for m in ("v", "a")})
        self.td = [self._fusion_params(ps, rng, f"td{l}", cs_init) for l in range(levels - 1)]
        self.bu = [self._fusion_params(ps, rng, f"bu{l}", cs_init) for l in range(levels - 1)]
        self.apm = {}
        for m in ("v", "a"):
            self.apm[m] = {
                "w_q": ps.add(f"apm.{m}.w_q", rng.standard_normal((d, d)) * d ** -0.5),
                "w_k": ps.add(f"apm.{m}.w_k", rng.standard_normal((d, d)) * d ** -0.5),
                "w_v": ps.add(f"apm.{m}.w_v", rng.standard_normal((d, d)) * d ** -0.5),
                "w_o": ps.add(f"apm.{m}.w_o", np.zeros((d, d))),
                "b_o": ps.add(f"apm.{m}.b_o", np.zeros((1, d))),
            }
        self.params = ps

    def _fusion_params(self, ps, rng, name, cs_init):
        out = {}
        for m in ("v", "a"):
            out[f"fuse_{m}"] = ps.add_linear(rng, f"{name}.fuse_{m}", 2 * self.d, self.d)
            out[f"cs_{m}_w"] = ps.add(f"{name}.cs_{m}.w", cs_init.copy())
            out[f"cs_{m}_b"] = ps.add(f"{name}.cs_{m}.b", np.zeros((1, self.d)))
        return out

    def parameters(self):
        return self.params.tensors()

    # -- pyramid construction --------------------------------------------

    def _fuse(self, lateral, neighbor, p, upsample: bool):
        lv, la = lateral
        nv, na = neighbor
        if upsample:
            r = nk.Tensor(nearest_resize_matrix(nv.rows, lv.rows))
            nv, na = r @ nv, r @ na
        else:
            nv, na = max_pool_halve(nv), max_pool_halve(na)
        fused_v = nk.linear(nk.concat_cols([lv, nv]), *p["fuse_v"])
        fused_a = nk.linear(nk.concat_cols([la, na]), *p["fuse_a"])
        gated_v = max_sigmoid_gate(fused_v, fused_a)
        gated_a = max_sigmoid_gate(fused_a, fused_v)
        out_v = nk.linear(nk.concat_cols([gated_v, fused_v]), p["cs_v_w"], p["cs_v_b"])
        out_a = nk.linear(nk.concat_cols([gated_a, fused_a]), p["cs_a_w"], p["cs_a_b"])
        return out_v, out_a

    def build_pyramid(self, v_aligned, a_aligned) -> list[PyramidLevel]:
        v = nk.constant(v_aligned)
        a = nk.constant(a_aligned)
        if v.rows != a.rows:
            raise ValueError("aligned streams must share the padded length")
        t = v.rows
        if t < 2 ** (self.levels - 1):
            raise ValueError(f"T={t} too short for {self.levels} pyramid levels")
        if self.levels == 1:
            return [PyramidLevel(1, 1, v, a)]
        base = [(v, a)]
        for l in range(self.levels - 1):
            pv, pa = base[-1]
            wv, bv = self.down[l]["v"]
            wa, ba = self.down[l]["a"]
            base.append((nk.linear(max_pool_halve(pv), wv, bv),
                         nk.linear(max_pool_halve(pa), wa, ba)))
        td = [None] * self.levels
        td[-1] = base[-1]
        for l in range(self.levels - 2, -1, -1):
            td[l] = self._fuse(base[l], td[l + 1], self.td[l], upsample=True)
        bu = [None] * self.levels
        bu[0] = td[0]
        for l in range(1, self.levels):
            bu[l] = self._fuse(td[l], bu[l - 1], self.bu[l - 1], upsample=False)
        return [PyramidLevel(l + 1, 2 ** l, bu[l][0], bu[l][1]) for l in range(self.levels)]

    # -- adaptive pooling module --------------------------------------------

    def _mha(self, p, queries: nk.Tensor, memory: nk.Tensor) -> nk.Tensor:
        d_head = self.d // self.heads
        q = queries @ p["w_q"]
        k = memory @ p["w_k"]
        v = memory @ p["w_v"]
        outs = []
        for h in range(self.heads):
            lo, hi = h * d_head, (h + 1) * d_head
            scores = (nk.slice_cols(q, lo, hi) @ nk.slice_cols(k, lo, hi).T) * (d_head ** -0.5)
            outs.append(nk.softmax_rows(scores) @ nk.slice_cols(v, lo, hi))
        cat = outs[0] if len(outs) == 1 else nk.concat_cols(outs)
        return nk.linear(cat, p["w_o"], p["b_o"])

    def pool_tokens(self, levels: list[PyramidLevel]) -> PooledTokens:
        all_v = nk.concat_rows([lv.video_feats for lv in levels])
        all_a = nk.concat_rows([lv.audio_feats for lv in levels])
        n_eff = min(self.n_pool, all_v.rows)
        pool = nk.Tensor(segment_average_matrix(all_v.rows, n_eff))
        return PooledTokens(video_tokens=pool @ all_v, audio_tokens=pool @ all_a)

    def refine(self, levels: list[PyramidLevel]):
        """Residual cross-attention of each level against pooled tokens of
        the other modality: V' = V + MHA(V, A~, A~) and symmetrically.

        Attention is per-query-row, so all levels are concatenated into a
        single call per modality and split back afterwards.
        """
        pooled = self.pool_tokens(levels)
        all_v = nk.concat_rows([lv.video_feats for lv in levels])
        all_a = nk.concat_rows([lv.audio_feats for lv in levels])
        ref_v = all_v + self._mha(self.apm["v"], all_v, pooled.audio_tokens)
        ref_a = all_a + self._mha(self.apm["a"], all_a, pooled.video_tokens)
        refined = []
        off = 0
        for lv in levels:
            n = lv.video_feats.rows
            refined.append(PyramidLevel(lv.level, lv.stride,
                                        nk.slice_rows(ref_v, off, off + n),
                                        nk.slice_rows(ref_a, off, off + n)))
            off += n
        return refined, pooled

    def forward(self, v_aligned, a_aligned):
        return self.refine(self.build_pyramid(v_aligned, a_aligned))
