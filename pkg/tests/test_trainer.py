import math

import numpy as np
import numpy.testing as npt
import pytest

from avloc import numkern as nk
from avloc.contrast import LossWeights
from avloc.datasim import SynthConfig, generate_synthetic_dataset
from avloc.model import EventLocalizer, ModelConfig, batch_losses
from avloc.trainer import (
    AdamOptimizer,
    Trainer,
    TrainConfig,
    TrainingDiverged,
    clip_global_norm,
    learning_rate,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)


def tiny_dataset(n=8, seed=3):
    cfg = SynthConfig(num_videos=n, T=16, d_v=6, d_a=6, num_classes=3,
                      events_mean=1.5, events_max=2, duration_min=3, duration_max=8,
                      seed=seed)
    seqs, anns = generate_synthetic_dataset(cfg)
    return list(zip(seqs, anns))


def tiny_model(seed=0, **over):
    base = dict(d_v=6, d_a=6, t_max=16, num_classes=3, d=8, heads=2,
                attn_blocks=1, levels=3, n_pool=4, head_hidden=8)
    base.update(over)
    return EventLocalizer(ModelConfig(**base), seed=seed)


def tiny_train_cfg(**over):
    base = dict(epochs=3, warmup_epochs=1, base_lr=1e-3, batch_size=4, seed=11,
                eval_every=0, eval_thresholds=(0.5,))
    base.update(over)
    return TrainConfig(**base)


class TestSchedule:
    def test_warmup_end_hits_base_lr(self):
        cfg = TrainConfig(epochs=20, warmup_epochs=5, base_lr=1e-2)
        assert learning_rate(4, cfg) == 1e-2      # last warmup epoch
        assert learning_rate(5, cfg) == 1e-2      # cosine start
        assert learning_rate(0, cfg) == 1e-2 / 5

    def test_final_epoch_near_zero(self):
        cfg = TrainConfig(epochs=40, warmup_epochs=5, base_lr=1e-2)
        assert learning_rate(39, cfg) < 1e-4
        for e in range(5, 39):
            assert learning_rate(e, cfg) >= learning_rate(e + 1, cfg)

    def test_no_warmup(self):
        cfg = TrainConfig(epochs=10, warmup_epochs=0, base_lr=1e-3)
        assert learning_rate(0, cfg) == 1e-3

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=2, warmup_epochs=5).validate()
        with pytest.raises(ValueError):
            TrainConfig(base_lr=0).validate()
        with pytest.raises(ValueError):
            TrainConfig(modality="X").validate()


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged_without_decay(self):
        p = nk.parameter(np.ones((2, 2)) * 3, "p")
        opt = AdamOptimizer([p], weight_decay=0.0)
        opt.step(1e-2)
        npt.assert_array_equal(p.value, np.ones((2, 2)) * 3)

    def test_zero_gradient_with_decay_shrinks(self):
        p = nk.parameter(np.ones((2, 2)) * 3, "p")
        opt = AdamOptimizer([p], weight_decay=0.1)
        opt.step(1e-2)
        npt.assert_allclose(p.value, np.ones((2, 2)) * 3 * (1 - 1e-3))

    def test_descends_quadratic(self):
        p = nk.parameter([[4.0]], "p")
        opt = AdamOptimizer([p])
        for _ in range(400):
            p.zero_grad()
            nk.mul(p, p).backward()
            opt.step(0.05)
        assert abs(p.value[0, 0]) < 0.05

    def test_clip_global_norm(self):
        a = nk.parameter(np.zeros((1, 3)), "a")
        b = nk.parameter(np.zeros((1, 4)), "b")
        a.grad[...] = 3.0
        b.grad[...] = 4.0
        norm = clip_global_norm([a, b], 1.0)
        expected = math.sqrt(9 * 3 + 16 * 4)
        npt.assert_allclose(norm, expected)
        total_after = math.sqrt(float((a.grad ** 2).sum() + (b.grad ** 2).sum()))
        npt.assert_allclose(total_after, 1.0)


class TestTrainerLoop:
    def test_two_runs_identical_loss_curves(self):
        data = tiny_dataset()
        histories = []
        for _ in range(2):
            tr = Trainer(tiny_model(seed=5), data, tiny_train_cfg())
            tr.fit()
            histories.append([(r.total, r.inter, r.score, r.cls, r.reg) for r in tr.history])
        assert histories[0] == histories[1]

    def test_all_zero_weights_only_decay_moves_params(self):
        data = tiny_dataset()
        weights = LossWeights(l_inter=0, l_intra=0, l_score=0, l_cls=0, l_reg=0)
        model = tiny_model(seed=6)
        model.weights = weights
        before = {p.name: p.value.copy() for p in model.parameters()}
        cfg = tiny_train_cfg(epochs=1, warmup_epochs=0, base_lr=1e-2)
        tr = Trainer(model, data, cfg)
        tr.run_epoch()
        wd, lr = cfg.weight_decay, 1e-2
        steps = math.ceil(len(data) / cfg.batch_size)
        for p in model.parameters():
            if p.name == "loss.tau":
                continue  # clamped after the step
            expected = before[p.name] * (1 - lr * wd) ** steps
            npt.assert_allclose(p.value, expected, atol=1e-12,
                                err_msg=f"{p.name} moved beyond weight decay")

    def test_loss_term_ablation_zeroes_its_gradients(self):
        """grad(total) decomposes linearly over the lambda-weighted terms."""
        data = tiny_dataset(n=4)
        model = tiny_model(seed=7)
        items = [(s, a) for s, a in data]
        prepared = Trainer(model, data, tiny_train_cfg()).train_data
        rng_seed = 123

        def grads_for(weights):
            model.zero_grad()
            comps = batch_losses(model, prepared, weights, np.random.default_rng(rng_seed))
            comps["total"].backward()
            return {p.name: p.grad.copy() for p in model.parameters()}

        full = grads_for(LossWeights())
        no_intra = grads_for(LossWeights(l_intra=0.0))
        only_intra = grads_for(LossWeights(l_inter=0, l_score=0, l_cls=0, l_reg=0, l_intra=0.3))
        for name in full:
            npt.assert_allclose(no_intra[name] + only_intra[name], full[name], atol=1e-9,
                                err_msg=name)

    def test_divergence_aborts_with_diagnostic(self):
        data = tiny_dataset(n=4)
        model = tiny_model(seed=8)
        model.parameters()[0].value[0, 0] = np.nan
        tr = Trainer(model, data, tiny_train_cfg())
        with pytest.raises(TrainingDiverged, match="epoch 0"):
            tr.run_epoch()

    def test_evaluate_produces_report(self):
        data = tiny_dataset(n=4)
        tr = Trainer(tiny_model(seed=9), data, tiny_train_cfg())
        report = tr.evaluate()
        assert set(report.map_at) == {0.5}
        assert 0.0 <= report.average_map <= 1.0

    def test_modality_switch_zeroes_stream(self):
        data = tiny_dataset(n=2)
        model = tiny_model(seed=10)
        video, audio, _ = Trainer(model, data, tiny_train_cfg()).train_data[0]
        out_a = model.forward(video, audio, modality="A")
        out_a2 = model.forward(np.zeros_like(video) + 99.0, audio, modality="A")
        npt.assert_array_equal(out_a.cls_a.value, out_a2.cls_a.value)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = tiny_model(seed=12)
        opt = AdamOptimizer(model.parameters())
        path = tmp_path / "ck.delp"
        save_checkpoint(path, model, opt, epoch=4)
        arrays, meta = load_checkpoint(path)
        assert meta["epoch"] == 4
        for name, p in model.named_parameters().items():
            npt.assert_array_equal(arrays[name], p.value)

    def test_restore_model_standalone(self, tmp_path):
        model = tiny_model(seed=13)
        path = tmp_path / "ck.delp"
        save_checkpoint(path, model, None, epoch=0)
        back, _, meta = restore_model(path)
        assert back.cfg == model.cfg
        for name, p in model.named_parameters().items():
            npt.assert_array_equal(back.named_parameters()[name].value, p.value)

    def test_shape_mismatch_rejected(self, tmp_path):
        model = tiny_model(seed=14)
        path = tmp_path / "ck.delp"
        save_checkpoint(path, model, None)
        other = tiny_model(seed=14, d=16, head_hidden=16)
        arrays, _ = load_checkpoint(path)
        with pytest.raises(ValueError, match="shape mismatch"):
            other.load_state({k: v for k, v in arrays.items() if not k.startswith("opt.")})

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.delp"
        p.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(p)

    def test_resume_matches_unbroken_run(self, tmp_path):
        data = tiny_dataset(n=8)
        cfg = tiny_train_cfg(epochs=4, warmup_epochs=1)

        straight = Trainer(tiny_model(seed=15), data, cfg)
        straight.fit()
        curve_full = [r.total for r in straight.history]

        part = Trainer(tiny_model(seed=15), data, cfg)
        part.cfg.epochs = 2
        part.fit()
        ck = tmp_path / "mid.delp"
        part.save(ck)

        resumed = Trainer(tiny_model(seed=15), data, tiny_train_cfg(epochs=4, warmup_epochs=1))
        resumed.resume(ck)
        assert resumed.epoch == 2
        resumed.fit()
        curve_tail = [r.total for r in resumed.history]
        npt.assert_allclose(curve_tail, curve_full[2:], rtol=1e-12)
