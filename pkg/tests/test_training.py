import json
import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semantic_cd.config import StageSpec
from semantic_cd.errors import (
    AllPixelsIgnored,
    CorruptFile,
    DivergedLoss,
    FrozenParameterDrift,
    NonBinaryTarget,
    VersionMismatch,
)
from semantic_cd.model import build_model
from semantic_cd.training import (
    bcd_loss,
    load_checkpoint,
    param_hashes,
    run_stage,
    save_checkpoint,
    scd_loss,
)

import oracles


class TestBCDLoss:
    def test_zero_logits_ln2(self):
        for target in (torch.zeros(4, 4), torch.ones(4, 4), (torch.rand(4, 4) > 0.5).float()):
            assert bcd_loss(torch.zeros(4, 4, dtype=torch.float64), target).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_saturated(self):
        target = (torch.rand(1, 4, 4) > 0.5).double()
        logits = (target * 2 - 1) * 60.0
        assert bcd_loss(logits, target).item() < 1e-20

    def test_non_binary(self):
        with pytest.raises(NonBinaryTarget):
            bcd_loss(torch.zeros(2, 2), torch.full((2, 2), 0.5))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_loop_oracle(self, seed):
        g = torch.Generator().manual_seed(seed)
        logits = torch.randn(4, 4, generator=g, dtype=torch.float64) * 3
        target = (torch.rand(4, 4, generator=g) > 0.5).double()
        got = bcd_loss(logits, target).item()
        assert got >= 0
        assert abs(got - oracles.bce_loop(logits.numpy(), target.numpy())) < 1e-10


class TestSCDLoss:
    def test_uniform_logits_one_pixel(self):
        for C in (3, 7):
            m = torch.zeros(1, C, 4, 4, dtype=torch.float64)
            gt = torch.zeros(1, 4, 4, dtype=torch.long)
            gt[0, 2, 1] = C - 1
            per_temporal = scd_loss(m, m, gt, torch.zeros_like(gt)).item()
            assert per_temporal == pytest.approx(math.log(C), abs=1e-12)
            assert scd_loss(m, m, gt, gt).item() == pytest.approx(2 * math.log(C), abs=1e-12)

    def test_all_ignored(self):
        m = torch.randn(1, 7, 4, 4, requires_grad=True)
        gt = torch.zeros(1, 4, 4, dtype=torch.long)
        with pytest.warns(AllPixelsIgnored):
            loss = scd_loss(m, m, gt, gt)
        assert loss.item() == 0.0
        loss.backward()  # still differentiable

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_loop_oracle(self, seed):
        g = torch.Generator().manual_seed(seed)
        m1 = torch.randn(1, 7, 4, 4, generator=g, dtype=torch.float64) * 2
        m2 = torch.randn(1, 7, 4, 4, generator=g, dtype=torch.float64) * 2
        gt1 = torch.randint(0, 7, (1, 4, 4), generator=g)
        gt2 = torch.randint(0, 7, (1, 4, 4), generator=g)
        gt1[0, 0, 0] = 3  # at least one counted pixel
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", AllPixelsIgnored)
            got = scd_loss(m1, m2, gt1, gt2).item()
        ref = oracles.ce_loop(m1[0].numpy(), gt1[0].numpy()) + oracles.ce_loop(m2[0].numpy(), gt2[0].numpy())
        assert got >= 0 and abs(got - ref) < 1e-10


def _groups_changed(model, before):
    after = param_hashes(model)
    changed = {n for n in before if before[n] != after[n]}
    return changed, {model_group(n) for n in changed}


def model_group(name):
    from semantic_cd.model import group_of

    return group_of(name)


class TestRunStage:
    def test_bcd_step_freezing(self, small_model, toy_manifest):
        before = param_hashes(small_model)
        run_stage(StageSpec("bcd", max_steps=1), small_model, toy_manifest)
        changed, groups = _groups_changed(small_model, before)
        assert groups <= {"adapters", "bcd_decoder"} and "bcd_decoder" in groups

    def test_scd_step_freezing(self, small_model, toy_manifest):
        run_stage(StageSpec("bcd", max_steps=1), small_model, toy_manifest)
        before = param_hashes(small_model)
        run_stage(StageSpec("scd", max_steps=1), small_model, toy_manifest)
        changed, groups = _groups_changed(small_model, before)
        assert groups == {"prompter", "scd_decoder"}
        assert not any(n.startswith("prompter.text_encoder.") for n in changed)

    def test_scd_requires_bcd(self, small_model, toy_manifest):
        with pytest.raises(ValueError):
            run_stage(StageSpec("scd", max_steps=1), small_model, toy_manifest)

    def test_drift_detected(self, small_model, toy_manifest, monkeypatch):
        cls = type(small_model)
        original = cls.set_stage

        def leaky(self, stage):
            original(self, stage)
            self.requires_grad_(True)
            self.prompter.text_encoder.requires_grad_(False)
            return [p for p in self.parameters() if p.requires_grad]

        monkeypatch.setattr(cls, "set_stage", leaky)
        with pytest.raises(FrozenParameterDrift):
            run_stage(StageSpec("bcd", max_steps=1), small_model, toy_manifest)

    def test_diverged(self, small_model, toy_manifest):
        with torch.no_grad():
            small_model.bcd_decoder.head.proj.bias.fill_(float("nan"))
        with pytest.raises(DivergedLoss):
            run_stage(StageSpec("bcd", max_steps=1), small_model, toy_manifest)

    def test_log_records(self, small_model, toy_manifest, tmp_path):
        run_stage(StageSpec("bcd", max_steps=3, batch_size=4), small_model, toy_manifest, log_path=tmp_path / "log.jsonl")
        recs = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert len(recs) == 3
        assert set(recs[0]) == {"stage", "epoch", "step", "loss", "lr", "timestamp"}
        assert [r["step"] for r in recs] == [0, 1, 2] and recs[2]["epoch"] == 1

    def test_seed_determinism(self, small_cfg, toy_manifest):
        runs = []
        for _ in range(2):
            model = build_model(small_cfg)
            ck = run_stage(StageSpec("bcd", max_steps=4, seed=3), model, toy_manifest)
            ck = run_stage(StageSpec("scd", max_steps=3, seed=3), model, toy_manifest)
            runs.append([h["losses"] for h in ck.stage_history])
        assert runs[0] == runs[1]

    def test_baseline_flag_zero_cost(self, small_cfg, images):
        small_cfg.use_prompter = False
        model = build_model(small_cfg)
        pred = model(*images)
        assert torch.equal(pred.cost1, torch.zeros_like(pred.cost1))


class TestCheckpoint:
    def test_round_trip_bit_identical(self, small_model, toy_manifest, tmp_path, images):
        ck = run_stage(StageSpec("bcd", max_steps=2), small_model, toy_manifest)
        before = small_model(*images)
        save_checkpoint(tmp_path / "m.ckpt", ck)
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        model = loaded.build()
        after = model(*images)
        assert torch.equal(before.bcd_logits, after.bcd_logits) and torch.equal(before.scd1, after.scd1)
        assert torch.equal(loaded.rng_state, ck.rng_state)
        assert loaded.stage_history == ck.stage_history
        for k, v in ck.params.items():
            assert torch.equal(v, loaded.params[k])

    def test_wrong_fingerprint(self, small_model, small_cfg, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", small_model)
        small_cfg.decoder.pyramid_width = 32
        with pytest.raises(VersionMismatch):
            load_checkpoint(tmp_path / "m.ckpt", small_cfg)

    def test_truncated(self, small_model, tmp_path):
        path = save_checkpoint(tmp_path / "m.ckpt", small_model)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 100])
        with pytest.raises(CorruptFile):
            load_checkpoint(path)

    def test_flipped_byte(self, small_model, tmp_path):
        path = save_checkpoint(tmp_path / "m.ckpt", small_model)
        data = bytearray(path.read_bytes())
        data[-5] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CorruptFile):
            load_checkpoint(path)

    def test_restore_rng(self, small_model, tmp_path):
        torch.manual_seed(123)
        save_checkpoint(tmp_path / "m.ckpt", small_model)
        expected = torch.rand(3)
        torch.manual_seed(0)
        load_checkpoint(tmp_path / "m.ckpt").restore_rng()
        assert torch.equal(torch.rand(3), expected)


def test_build_does_not_share_config(small_model):
    from semantic_cd.training import make_checkpoint

    ck = make_checkpoint(small_model)
    model = ck.build()
    ck.config.use_prompter = False
    assert model.cfg.use_prompter is True
