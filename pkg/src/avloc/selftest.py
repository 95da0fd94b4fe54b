"""Self-contained gradient-check and oracle suite behind `avloc selftest`.

Each check recomputes its expected value through an independent path
(closed form or explicit loops) and compares against the library.
"""

from __future__ import annotations

import math

import numpy as np

from . import numkern as nk
from .attention import AlignmentModule, AttentionConfig, build_mask, token_layout
from .contrast import contrastive_kernel, inter_sample_loss
from .datasim import EventAnnotation, SynthConfig, generate_synthetic_dataset
from .detect import LocalizedEvent, decode, smooth_l1, soft_nms
from .evalkit import average_precision, tiou
from .model import EventLocalizer, ModelConfig, batch_losses
from .pyramid import max_sigmoid_gate

__all__ = ["run_selftest"]


def _check_masked_softmax():
    rng = np.random.default_rng(0)
    s = rng.standard_normal((4, 4)) * 3
    m = (rng.random((4, 4)) < 0.6).astype(float)
    m[m.sum(axis=1) == 0, 0] = 1.0
    out = nk.masked_softmax(nk.Tensor(s), m).value
    e = m * np.exp(s)
    err = np.abs(out - e / e.sum(axis=1, keepdims=True)).max()
    return err < 1e-12, f"masked softmax vs direct formula, max err {err:.2e}"


def _check_gradients_attention():
    mod = AlignmentModule(4, 4, 6, AttentionConfig(d=8, heads=2), np.random.default_rng(1))
    rng = np.random.default_rng(2)
    video, audio = rng.standard_normal((4, 4)), rng.standard_normal((5, 4))
    readout = nk.Tensor(rng.standard_normal((8, 1)))
    rep = nk.check_gradients(lambda: mod.align(video, audio).cls_v @ readout,
                             mod.parameters(), tol=1e-6, max_entries_per_param=4)
    return rep.ok, str(rep)


def _check_gradients_full_loss():
    cfg = SynthConfig(num_videos=2, T=8, d_v=4, d_a=4, num_classes=2,
                      duration_min=2, duration_max=5, seed=3)
    seqs, anns = generate_synthetic_dataset(cfg)
    model = EventLocalizer(ModelConfig(d_v=4, d_a=4, t_max=8, num_classes=2, d=4,
                                       heads=2, levels=2, n_pool=2, head_hidden=4), seed=4)
    items = [(s.video, s.audio, a) for s, a in zip(seqs, anns)]

    def f():
        return batch_losses(model, items, model.weights, np.random.default_rng(5))["total"]

    rep = nk.check_gradients(f, model.parameters(), tol=1e-6, max_entries_per_param=2)
    return rep.ok, str(rep)


def _check_contrastive_kernel():
    out = contrastive_kernel(np.array([1.0, 0, 0]), np.array([0, 1.0, 0]),
                             [np.array([0, 0, 1.0])], 1.0).item()
    err = abs(out - math.log(2))
    rng = np.random.default_rng(6)
    z, pos = rng.standard_normal(5), rng.standard_normal(5)
    negs = [rng.standard_normal(5) for _ in range(4)]
    got = contrastive_kernel(z, pos, negs, 0.3).item()
    zn = z / np.linalg.norm(z)
    den = math.exp(float(zn @ (pos / np.linalg.norm(pos))) / 0.3)
    num = den
    for n in negs:
        den += math.exp(float(zn @ (n / np.linalg.norm(n))) / 0.3)
    err2 = abs(got + math.log(num / den))
    return err < 1e-9 and err2 < 1e-12, f"ln2 err {err:.2e}, brute-force err {err2:.2e}"


def _check_inter_loss():
    rng = np.random.default_rng(7)
    v = [rng.standard_normal(4) for _ in range(3)]
    a = [rng.standard_normal(4) for _ in range(3)]
    got = inter_sample_loss(v, a, 0.5).item()
    terms = []
    for j in range(3):
        for anchor, pool in ((v[j], a), (a[j], v)):
            zn = anchor / np.linalg.norm(anchor)
            sims = [float(zn @ (p / np.linalg.norm(p))) / 0.5 for p in pool]
            terms.append(math.log(sum(math.exp(s) for s in sims)) - sims[j])
    err = abs(got - np.mean(terms))
    return err < 1e-12, f"inter-sample loss vs expansion, err {err:.2e}"


def _check_mask_invariants():
    for l_v in range(1, 7):
        for l_a in range(1, 7):
            m = build_mask(l_v, l_a)
            lay = token_layout(l_v, l_a)
            if not (m == m.T).all():
                return False, f"mask not symmetric at ({l_v},{l_a})"
            if not (m.sum(axis=1) >= 1).all():
                return False, f"empty mask row at ({l_v},{l_a})"
            if not (m[lay["video"], lay["video"]] == 1).all():
                return False, f"intra-video block not ones at ({l_v},{l_a})"
    return True, "all (L_v, L_a) <= 6 mask invariants hold"


def _check_adapter():
    rng = np.random.default_rng(8)
    v, a = rng.standard_normal((5, 6)), rng.standard_normal((3, 6))
    got = max_sigmoid_gate(nk.Tensor(v), nk.Tensor(a)).value
    expected = np.array([v[i] / (1 + np.exp(-max(float(v[i] @ a[j]) for j in range(3))))
                         for i in range(5)])
    err = np.abs(got - expected).max()
    return err < 1e-12, f"max-sigmoid adapter vs loops, err {err:.2e}"


def _check_decode_and_nms():
    logits = np.zeros((16, 5))
    logits[10] = np.log(np.array([0.05, 0.05, 0.8, 0.05, 0.05]))
    offsets = np.full((16, 2), 0.1)
    offsets[10] = (3.0, 5.0)
    events = decode([(logits, offsets)], [1], 16, score_threshold=0.5)
    ok1 = len(events) == 1 and (events[0].start, events[0].end, events[0].label) == (7.0, 15.0, 2)
    pair = [LocalizedEvent(2.0, 6.0, 1, 0.9), LocalizedEvent(2.0, 6.0, 1, 0.8)]
    out = soft_nms(pair, sigma=0.5)
    ok2 = abs(out[1].confidence - 0.8 * math.exp(-2.0)) < 1e-12
    sl = smooth_l1(nk.Tensor([[2.0]]), 0.0).item()
    return ok1 and ok2 and sl == 1.5, f"decode {ok1}, soft-nms {ok2}, smooth-l1 {sl}"


def _check_evaluation():
    if abs(tiou((0, 2), (1, 3)) - 1 / 3) > 1e-15:
        return False, "tIoU mismatch"
    gts = {"v": [EventAnnotation(1.0, 4.0, 0)]}
    preds = {"v": [LocalizedEvent(1.0, 3.5, 0, 0.9)]}
    ap_hit = average_precision(preds, gts, 0, 0.5)[0]
    preds_miss = {"v": [LocalizedEvent(0.0, 1.5, 0, 0.9)]}
    ap_miss = average_precision(preds_miss, gts, 0, 0.5)[0]
    return ap_hit == 1.0 and ap_miss == 0.0, f"AP hit {ap_hit}, miss {ap_miss}"


CHECKS = [
    ("masked-softmax-oracle", _check_masked_softmax),
    ("attention-gradients", _check_gradients_attention),
    ("full-loss-gradients", _check_gradients_full_loss),
    ("contrastive-kernel-oracle", _check_contrastive_kernel),
    ("inter-sample-loss-oracle", _check_inter_loss),
    ("mask-invariants", _check_mask_invariants),
    ("max-sigmoid-adapter-oracle", _check_adapter),
    ("decode-nms-smoothl1", _check_decode_and_nms),
    ("evaluation-oracle", _check_evaluation),
]


def run_selftest(emit=print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {exc!r}"
        all_ok &= ok
        emit(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return all_ok
