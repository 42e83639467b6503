import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sketchguide.backbone import (NULL_LABEL, BackboneConfig, IdentityCodec, StableDiffusionAdapterSpec, TapSet,
                                  ToyDenoiser, capture_taps, cfg_mix, denoise_with_taps, load_backbone,
                                  save_backbone, train_toy_backbone, weights_digest)
from sketchguide.data import generate_triplets
from sketchguide.errors import ConfigError, IncompatibleError, InputError
from sketchguide.schedule import make_schedule


def test_tapset_validation():
    with pytest.raises(ConfigError):
        TapSet(())
    with pytest.raises(ConfigError):
        TapSet(("a", "a"))
    assert list(TapSet(["x", "y"])) == ["x", "y"]


def test_single_bottleneck_tap_dims(toy_backbone):
    z = torch.randn(1, 32, 32)
    _, acts = denoise_with_taps(toy_backbone, z, 10, "circle", TapSet(("mid0",)))
    assert len(acts) == 1
    levels = len(toy_backbone.config.widths)
    assert acts[0].shape[-2:] == (32 // 2 ** (levels - 1),) * 2


def test_default_taps_follow_layer_table(toy_backbone):
    z = torch.randn(1, 32, 32)
    taps = toy_backbone.default_taps()
    _, acts = denoise_with_taps(toy_backbone, z, 10, "circle", taps)
    assert len(acts) == 9
    table = toy_backbone.tap_table()
    for site, a in zip(taps, acts):
        assert tuple(a.shape) == table[site]
    sizes = [a.shape[-1] for a in acts]
    assert sizes == [32, 16, 8, 8, 8, 8, 8, 16, 32]
    assert [a.shape[0] for a in acts] == [8, 16, 32, 32, 32, 32, 32, 16, 8]


def test_forward_is_deterministic(toy_backbone):
    z = torch.randn(1, 32, 32)
    e1, a1 = denoise_with_taps(toy_backbone, z, 7, "triangle", toy_backbone.default_taps())
    e2, a2 = denoise_with_taps(toy_backbone, z, 7, "triangle", toy_backbone.default_taps())
    assert torch.equal(e1, e2)
    assert all(torch.equal(x, y) for x, y in zip(a1, a2))


def test_held_activations_survive_later_passes(toy_backbone):
    z = torch.randn(1, 32, 32)
    _, acts = denoise_with_taps(toy_backbone, z, 7, "circle", toy_backbone.default_taps())
    snapshot = [a.clone() for a in acts]
    denoise_with_taps(toy_backbone, torch.randn(1, 32, 32), 40, "rectangle", toy_backbone.default_taps())
    assert all(torch.equal(a, s) for a, s in zip(acts, snapshot))


def test_unknown_tap_and_label(toy_backbone):
    with pytest.raises(ConfigError):
        with capture_taps(toy_backbone, TapSet(("nope",))):
            pass
    with pytest.raises(InputError):
        toy_backbone.label_index("hexagon")
    assert toy_backbone.label_index(NULL_LABEL).item() == 3


def test_shape_mismatch_is_rejected(toy_backbone):
    with pytest.raises(InputError):
        toy_backbone(torch.randn(1, 1, 16, 16), torch.tensor([1]), torch.tensor([0]))


@settings(max_examples=10, deadline=None)
@given(levels=st.integers(1, 3), mult=st.integers(1, 3), batch=st.integers(1, 3), t=st.integers(1, 50))
def test_eps_shape_matches_input(levels, mult, batch, t):
    size = 2 ** (levels - 1) * 2 * mult
    torch.manual_seed(0)
    m = ToyDenoiser(BackboneConfig(image_size=size, widths=(4, 8, 8)[:levels], mid_blocks=1, emb_dim=8, groups=2))
    z = torch.randn(batch, 1, size, size)
    assert m(z, torch.tensor([t]), m.label_index(["circle"] * batch)).shape == z.shape


def test_cfg_mix_endpoints_and_scale():
    a, b = torch.randn(1, 4, 4), torch.randn(1, 4, 4)
    assert cfg_mix(a, b, 1) is a
    assert cfg_mix(a, b, 0) is b
    assert torch.equal(cfg_mix(torch.ones(1, 3, 3), torch.zeros(1, 3, 3), 8), torch.full((1, 3, 3), 8.0))


@settings(max_examples=50, deadline=None)
@given(w=st.floats(0, 20), seed=st.integers(0, 10_000))
def test_cfg_mix_is_affine(w, seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(2, 5, 5, generator=g, dtype=torch.float64), torch.randn(2, 5, 5, generator=g,
                                                                               dtype=torch.float64)
    torch.testing.assert_close(cfg_mix(a, b, w) + cfg_mix(b, a, w), a + b, atol=1e-6 * max(1, w), rtol=0)


def test_adapter_records_reference_layout():
    spec = StableDiffusionAdapterSpec()
    assert list(spec.taps) == ["input_blocks.2", "input_blocks.4", "input_blocks.8", "middle_block.0",
                               "middle_block.1", "middle_block.2", "output_blocks.2", "output_blocks.4",
                               "output_blocks.8"]
    assert spec.latent_channels == 4


def _tiny_images(n=24, size=8):
    g = torch.Generator().manual_seed(0)
    return torch.rand(n, 1, size, size, generator=g), ["circle", "rectangle", "triangle"] * (n // 3)


def test_zero_epochs_returns_initialization():
    images, labels = _tiny_images()
    cfg = BackboneConfig(image_size=8, widths=(4, 8), mid_blocks=1, emb_dim=16, groups=2)
    m, info = train_toy_backbone(images, labels, make_schedule(10), 0, config=cfg, seed=3)
    torch.manual_seed(3)
    fresh = ToyDenoiser(cfg)
    assert weights_digest(m) == weights_digest(fresh)
    assert info["loss_history"] == []


def test_no_label_drop_is_flagged():
    images, labels = _tiny_images()
    cfg = BackboneConfig(image_size=8, widths=(4, 8), mid_blocks=1, emb_dim=16, groups=2)
    _, info = train_toy_backbone(images, labels, make_schedule(10), 1, condition_drop_rate=0.0, config=cfg)
    assert info["cfg_reliable"] is False
    _, info = train_toy_backbone(images, labels, make_schedule(10), 1, condition_drop_rate=0.1, config=cfg)
    assert info["cfg_reliable"] is True


def test_backbone_training_reduces_loss():
    trip = generate_triplets(200, (16, 16), seed=0)
    images = torch.from_numpy(np.stack([t.x for t in trip])).float().unsqueeze(1)
    cfg = BackboneConfig(image_size=16, widths=(8, 16), mid_blocks=1, emb_dim=32)
    _, info = train_toy_backbone(images, [t.y for t in trip], make_schedule(50), 30, config=cfg, seed=0)
    hist = info["loss_history"]
    assert hist[-1] < 0.5 * hist[0]


def test_save_load_preserves_taps_and_weights(tmp_path, tiny_backbone):
    sched = make_schedule(10)
    path = save_backbone(tiny_backbone, tmp_path / "b.ckpt", IdentityCodec(1), sched)
    m, codec, meta = load_backbone(path)
    assert list(m.default_taps()) == list(tiny_backbone.default_taps())
    assert m.tap_table() == tiny_backbone.tap_table()
    assert weights_digest(m) == weights_digest(tiny_backbone)
    assert meta["schedule"] == sched.to_dict()
    assert codec.channels == 1


def test_wrong_checkpoint_kind(tmp_path, tiny_backbone):
    from sketchguide.checkpoint import save_checkpoint, state_to_blocks

    p = save_checkpoint(tmp_path / "x.ckpt", state_to_blocks(tiny_backbone), {}, kind="lep")
    with pytest.raises(IncompatibleError):
        load_backbone(p)
