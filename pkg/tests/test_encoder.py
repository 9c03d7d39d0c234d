import pytest
import torch

from semantic_cd.checkpoint import write_checkpoint
from semantic_cd.config import EncoderConfig
from semantic_cd.encoder import (
    BCSFAdapter,
    BiTemporalEncoder,
    apply_bcsf,
    backbone_parameter_partition,
    encode_bitemporal,
)
from semantic_cd.errors import CheckpointMismatch, ShapeError, ShapeMismatch
from semantic_cd.training import bcd_loss

from conftest import finite_difference_check


@pytest.fixture
def encoder():
    torch.manual_seed(0)
    return BiTemporalEncoder(EncoderConfig())


def _randomize(module, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.3)


class TestConfig:
    def test_full_scale_needs_four_sites(self):
        with pytest.raises(ValueError):
            EncoderConfig(scale="full", depth=24, adapter_sites=[1, 2])

    def test_sites_in_range(self):
        with pytest.raises(ValueError):
            EncoderConfig(depth=4, adapter_sites=[4])


class TestEncode:
    def test_shapes(self, encoder, images):
        f1, f2 = encode_bitemporal(*images, encoder)
        assert f1.tokens.shape == (2, 64, 64) and f1.grid == (8, 8) and f1.N == 64
        assert f2.grid == f1.grid

    def test_indivisible(self, encoder):
        x = torch.rand(1, 3, 60, 64)
        with pytest.raises(ShapeError):
            encoder(x, x)

    def test_image_shapes_must_match(self, encoder):
        with pytest.raises(ShapeMismatch):
            encoder(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 32, 32))

    def test_identical_inputs_identical_features(self, encoder, images):
        f1, f2 = encoder(images[0], images[0])
        assert torch.equal(f1.tokens, f2.tokens)

    def test_adapters_identity_at_init(self, encoder, images):
        a1, a2 = encoder(*images)
        b1, b2 = encoder(*images, use_adapters=False)
        assert torch.equal(a1.tokens, b1.tokens) and torch.equal(a2.tokens, b2.tokens)

    def test_swap_symmetry_with_trained_adapters(self, encoder, images):
        _randomize(encoder.adapters)
        f1, f2 = encoder(*images)
        g1, g2 = encoder(images[1], images[0])
        assert torch.equal(f1.tokens, g2.tokens) and torch.equal(f2.tokens, g1.tokens)

    def test_adapters_change_output_once_trained(self, encoder, images):
        _randomize(encoder.adapters)
        a1, _ = encoder(*images)
        b1, _ = encoder(*images, use_adapters=False)
        assert not torch.allclose(a1.tokens, b1.tokens)

    def test_finite(self, encoder):
        x = torch.zeros(1, 3, 64, 64)
        y = torch.ones(1, 3, 64, 64)
        f1, f2 = encoder(x, y)
        assert torch.isfinite(f1.tokens).all() and torch.isfinite(f2.tokens).all()

    def test_gradient_reaches_adapters(self, encoder, images):
        encoder.requires_grad_(False)
        encoder.adapters.requires_grad_(True)
        f1, _ = encoder(*images)
        f1.tokens.pow(2).sum().backward()
        grads = [p.grad for p in encoder.adapters.parameters() if p.grad is not None]
        assert any(g.abs().sum() > 0 for g in grads)
        assert all(p.grad is None for p in encoder.backbone.parameters())

    def test_nonstandard_size_interpolates_positions(self, encoder):
        x = torch.rand(1, 3, 96, 64)
        f1, _ = encoder(x, x)
        assert f1.grid == (12, 8)


class TestBCSF:
    def test_zero_projection_is_identity(self):
        a = BCSFAdapter(16)
        t1, t2 = torch.randn(2, 5, 16), torch.randn(2, 5, 16)
        o1, o2 = apply_bcsf(t1, t2, a)
        assert torch.equal(o1, t1) and torch.equal(o2, t2)

    def test_equal_streams_equal_responses(self):
        a = BCSFAdapter(16)
        _randomize(a)
        t = torch.randn(1, 5, 16)
        o1, o2 = a(t, t.clone())
        assert torch.equal(o1, o2)

    def test_response_depends_on_other_stream(self):
        a = BCSFAdapter(16)
        _randomize(a)
        t1 = torch.randn(1, 5, 16)
        o_a, _ = a(t1, torch.randn(1, 5, 16))
        o_b, _ = a(t1, torch.randn(1, 5, 16))
        assert not torch.allclose(o_a, o_b)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            BCSFAdapter(8)(torch.zeros(1, 3, 8), torch.zeros(1, 4, 8))

    def test_finite_differences(self):
        a = BCSFAdapter(8).double()
        _randomize(a, seed=3)
        g = torch.Generator().manual_seed(1)
        t1 = torch.randn(2, 6, 8, generator=g, dtype=torch.float64)
        t2 = torch.randn(2, 6, 8, generator=g, dtype=torch.float64)
        w = torch.randn(2, 6, 8, generator=g, dtype=torch.float64)

        def loss():
            o1, o2 = a(t1, t2)
            return (o1 * w).sum() + (o2 * w).pow(2).mean()

        err, an, _ = finite_difference_check(loss, list(a.parameters()))
        assert err < 1e-3 and abs(an).max() > 0


class TestPartition:
    def test_trainable_only_adapters(self):
        enc = BiTemporalEncoder(EncoderConfig(adapter_sites=[1, 3]))
        part = backbone_parameter_partition(enc)
        assert part["trainable"] and all(n.startswith("adapters.") for n in part["trainable"])
        assert {n.split(".")[1] for n in part["trainable"]} == {"1", "3"}

    def test_exhaustive_disjoint(self, encoder):
        part = backbone_parameter_partition(encoder)
        names = {n for n, _ in encoder.named_parameters()}
        assert part["frozen"] | part["trainable"] == names
        assert not part["frozen"] & part["trainable"]

    def test_frozen_unchanged_after_step(self, encoder, images):
        part = backbone_parameter_partition(encoder)
        params = dict(encoder.named_parameters())
        encoder.requires_grad_(False)
        for n in part["trainable"]:
            params[n].requires_grad_(True)
        before = {n: params[n].detach().clone() for n in part["frozen"]}
        opt = torch.optim.Adam([params[n] for n in part["trainable"]], lr=1e-2)
        f1, f2 = encoder(*images)
        logits = (f1.tokens - f2.tokens).mean(-1).reshape(2, 8, 8)
        bcd_loss(logits, (logits.detach() > 0).float()).backward()
        opt.step()
        for n, v in before.items():
            assert torch.equal(params[n], v), n


class TestPretrained:
    def test_load_and_interpolate(self, tmp_path, images):
        src = BiTemporalEncoder(EncoderConfig(image_size=32))
        write_checkpoint(tmp_path / "bb.ckpt", {f"backbone.{k}": v for k, v in src.backbone.state_dict().items()})
        dst = BiTemporalEncoder(EncoderConfig(image_size=64))
        dst.load_pretrained(tmp_path / "bb.ckpt")
        assert torch.equal(dst.backbone.patch_embed.weight, src.backbone.patch_embed.weight)
        assert dst.backbone.pos_embed.shape == (1, 64, 64)

    def test_mismatch(self, tmp_path):
        src = BiTemporalEncoder(EncoderConfig(dim=32, heads=4))
        write_checkpoint(tmp_path / "bb.ckpt", {f"backbone.{k}": v for k, v in src.backbone.state_dict().items()})
        with pytest.raises(CheckpointMismatch):
            BiTemporalEncoder(EncoderConfig()).load_pretrained(tmp_path / "bb.ckpt")
