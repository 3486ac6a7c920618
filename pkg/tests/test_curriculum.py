import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from smolrgpt.curriculum import (
    STAGE_TRAINABLE,
    StagePlan,
    default_stage_plan,
    load_checkpoint,
    lr_at,
    read_manifest,
    run_curriculum,
    save_checkpoint,
    train_stage,
    warmup_steps,
)
from smolrgpt.data_ingest import ConversationSample, Turn, generate_toy_dataset
from smolrgpt.errors import CorruptArchive, EmptyDataset, NonFiniteLoss, UnknownStage
from smolrgpt.evaluator import QuestionType
from smolrgpt.lm_core import LmConfig
from smolrgpt.model import GROUPS, ModelConfig, SmolRGPT


def tiny_model(dtype="float32", seed=0):
    return SmolRGPT(ModelConfig(lm=LmConfig(lm_dim=16, n_heads=2, max_seq=192, seed=seed), dtype=dtype, seed=seed))


@pytest.fixture(scope="module")
def toy():
    return generate_toy_dataset(0, 8, list(QuestionType))


class TestDefaultPlans:
    def test_stage1(self):
        p = default_stage_plan(1)
        assert p.trainable == {"rgb_connector"} and p.base_lr == 1e-4

    def test_stage2(self):
        p = default_stage_plan(2)
        assert p.trainable == {"depth_connector", "rgb_refiner", "depth_refiner"} and p.base_lr == 1e-4
        assert "rgb_connector" not in p.trainable

    def test_stage3(self):
        p = default_stage_plan(3)
        assert "vision_encoder" not in p.trainable and p.base_lr == 5e-5
        assert p.trainable == set(GROUPS) - {"vision_encoder"}

    def test_shared_settings(self):
        for k in (1, 2, 3):
            p = default_stage_plan(k)
            assert (p.weight_decay, p.warmup_frac) == (0.01, 0.03)

    @pytest.mark.parametrize("bad", [0, 4, "1"])
    def test_unknown(self, bad):
        with pytest.raises(UnknownStage):
            default_stage_plan(bad)

    def test_encoder_never_trainable(self):
        with pytest.raises(ValueError):
            StagePlan(3, {"vision_encoder", "lm"}, 1e-4, 10)


class TestSchedule:
    def test_closed_form_points(self):
        total, base = 200, 3e-4
        warm = warmup_steps(total, 0.03)
        assert warm == 6
        assert lr_at(0, total, base, 0.03) == 0.0
        assert lr_at(warm, total, base, 0.03) == base
        assert lr_at(warm + (total - warm) // 2, total, base, 0.03) == pytest.approx(base / 2, abs=1e-18)
        assert lr_at(total, total, base, 0.03) == 0.0

    def test_midpoint_exact_when_even(self):
        # (total - warm) even -> the midpoint is an integer step and cos(pi/2) contributes ~6e-17
        base = 1.0
        assert abs(lr_at(103, 200, base, 0.03) - 0.5) < 1e-15

    def test_warmup_linear(self):
        for s in range(6):
            assert lr_at(s, 200, 1.0, 0.03) == s / 6

    def test_no_warmup(self):
        assert lr_at(0, 10, 2.0, 0.0) == 2.0

    def test_monotone_after_warmup(self):
        lrs = [lr_at(s, 100, 1.0, 0.03) for s in range(101)]
        assert all(a <= b for a, b in zip(lrs[:3], lrs[1:4]))
        assert all(a >= b for a, b in zip(lrs[3:], lrs[4:]))

    @pytest.mark.parametrize("step,total", [(-1, 10), (11, 10), (0, 0)])
    def test_domain(self, step, total):
        with pytest.raises(ValueError):
            lr_at(step, total, 1.0, 0.03)

    def test_emitted_series_matches(self, toy):
        plan = StagePlan(1, STAGE_TRAINABLE[1], 1e-3, 12)
        report = train_stage(plan, tiny_model(), toy)
        assert report.lrs == [lr_at(s, 12, 1e-3, plan.warmup_frac) for s in range(12)]


class TestFreeze:
    @pytest.mark.parametrize("stage", [1, 2, 3])
    def test_ten_steps(self, toy, stage):
        model = tiny_model()
        plan = replace(default_stage_plan(stage, steps=10), base_lr=1e-3)
        report = train_stage(plan, model, toy)
        assert report.changed_groups() == set(STAGE_TRAINABLE[stage])

    def test_stage2_checkpoint_differs_only_in_stage2_groups(self, toy, tmp_path):
        model = tiny_model()
        plans = [replace(default_stage_plan(k, steps=3), base_lr=1e-3) for k in (1, 2)]
        run_curriculum(plans, [toy, toy], model, checkpoint_dir=tmp_path)
        f1 = read_manifest(tmp_path / "stage1.ckpt")["fingerprints"]
        f2 = read_manifest(tmp_path / "stage2.ckpt")["fingerprints"]
        assert {g for g in GROUPS if f1[g] != f2[g]} == set(STAGE_TRAINABLE[2])

    def test_curriculum_smoke(self, toy):
        model = tiny_model()
        enc = model.fingerprints()["vision_encoder"]
        reports = run_curriculum([default_stage_plan(k, steps=1) for k in (1, 2, 3)], [toy] * 3, model)
        assert [r.stage_id for r in reports] == [1, 2, 3]
        assert model.fingerprints()["vision_encoder"] == enc


class TestOptimizer:
    def test_grad_accum_equivalence(self, toy):
        a, b = tiny_model("float64"), tiny_model("float64")
        base = dict(stage_id=3, trainable=STAGE_TRAINABLE[3], base_lr=1e-3, steps=3, warmup_frac=0.0)
        train_stage(StagePlan(**base, batch_size=8, grad_accum=1), a, toy)
        train_stage(StagePlan(**base, batch_size=2, grad_accum=4), b, toy)
        for (n, pa), pb in zip(a.named_parameters(), b.parameters()):
            assert torch.allclose(pa, pb, rtol=0, atol=1e-10), n

    def test_decoupled_weight_decay_on_zero_gradient(self):
        # no masks -> the depth pathway receives an exactly zero gradient in stage 3
        turns = [Turn("user", "<image>\nDescribe it."), Turn("assistant", "Boxes.")]
        data = [ConversationSample("z", np.full((32, 32, 3), 0.5), None, [], turns)]
        model = tiny_model("float64")
        before = model.depth_connector.weight.detach().clone()
        plan = StagePlan(3, STAGE_TRAINABLE[3], 1e-2, 1, batch_size=1, warmup_frac=0.0, weight_decay=0.1)
        train_stage(plan, model, data)
        expected = before * (1 - 1e-2 * 0.1)
        assert torch.allclose(model.depth_connector.weight, expected, rtol=1e-15, atol=0)
        assert not torch.equal(model.depth_connector.weight, before)

    def test_reproducible_losses(self, toy):
        plan = replace(default_stage_plan(3, steps=5), base_lr=1e-3)
        r1 = train_stage(plan, tiny_model(), toy)
        r2 = train_stage(plan, tiny_model(), toy)
        assert r1.losses == r2.losses and r1.fingerprints_after == r2.fingerprints_after

    def test_empty_dataset(self):
        with pytest.raises(EmptyDataset):
            train_stage(default_stage_plan(1, steps=1), tiny_model(), [])

    def test_non_finite_loss(self, toy):
        model = tiny_model()
        with torch.no_grad():
            model.rgb_connector.weight.fill_(math.inf)
        with pytest.raises(NonFiniteLoss) as info:
            train_stage(default_stage_plan(1, steps=3), model, toy)
        assert info.value.step == 0


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = tiny_model()
        path = save_checkpoint(model, tmp_path / "m.ckpt", stage=2)
        loaded = load_checkpoint(path)
        for g in GROUPS:
            for (n, t), u in zip(model.group_tensors(g).items(), loaded.group_tensors(g).values()):
                assert torch.equal(t, u), n
        manifest = read_manifest(path)
        assert manifest["stage"] == 2 and manifest["fingerprints"] == model.fingerprints()

    def test_identical_logits_after_load(self, tmp_path, toy):
        model = tiny_model()
        loaded = load_checkpoint(save_checkpoint(model, tmp_path / "m.ckpt"))
        seq_a = model.sequences([model.prepare(toy[0])])[0]
        seq_b = loaded.sequences([loaded.prepare(toy[0])])[0]
        with torch.no_grad():
            assert torch.equal(model.lm(seq_a.embeddings), loaded.lm(seq_b.embeddings))

    def test_deterministic_bytes(self, tmp_path):
        a = save_checkpoint(tiny_model(), tmp_path / "a.ckpt").read_bytes()
        b = save_checkpoint(tiny_model(), tmp_path / "b.ckpt").read_bytes()
        assert a == b

    def test_truncated(self, tmp_path):
        path = save_checkpoint(tiny_model(), tmp_path / "m.ckpt")
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CorruptArchive):
            load_checkpoint(path)

    def test_flipped_payload_byte(self, tmp_path):
        import zipfile

        path = save_checkpoint(tiny_model(), tmp_path / "m.ckpt")
        with zipfile.ZipFile(path) as zf:
            manifest, payload = zf.read("manifest.json"), bytearray(zf.read("params.bin"))
        payload[100] ^= 1
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("manifest.json", manifest)
            zf.writestr("params.bin", bytes(payload))
        with pytest.raises(CorruptArchive):
            load_checkpoint(path)
