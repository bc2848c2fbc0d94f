import numpy as np
import pytest
import torch

from oceanfm.data_model import read_checkpoint, write_checkpoint
from oceanfm.errors import (ConfigurationError, EmptyLossError, GeometryError, ValidationError)
from oceanfm.gradcheck import finite_diff_check
from oceanfm.mae import (PROFILES, MaskedAutoencoder, MaskPlan, build_mae, count_parameters,
                         get_profile, mae_from_checkpoint, masked_rmse_loss, no_mask, patchify,
                         pos_embed_2d, pretrain, random_mask, unpatchify)
from oceanfm.nn_core import param_set
from oceanfm.synth import SynthConfig, gen_tile


def test_geometry_441_tokens():
    x = np.zeros((1, 42, 42), np.float32)
    assert patchify(x).shape == (441, 4)
    assert get_profile("desk").n_tokens == 441


def test_single_patch_layout():
    x = np.array([[[1, 2], [3, 4]]], np.float32)
    assert patchify(x).tolist() == [[1, 2, 3, 4]]


@pytest.mark.parametrize("c", [1, 16, 17])
def test_roundtrip_bit_exact(c):
    x = np.random.default_rng(c).normal(size=(c, 42, 42)).astype(np.float32)
    assert unpatchify(patchify(x), c, 42, 42).tobytes() == x.tobytes()
    xt = torch.from_numpy(x)[None]
    assert torch.equal(unpatchify(patchify(xt), c, 42, 42), xt)


def test_patchify_matches_loop_oracle():
    x = np.random.default_rng(0).normal(size=(3, 6, 4))
    tok = patchify(x)
    for t in range(6):
        r, col = divmod(t, 2)
        ref = x[:, 2 * r:2 * r + 2, 2 * col:2 * col + 2].reshape(-1)
        assert np.array_equal(tok[t], ref)


def test_geometry_errors():
    with pytest.raises(GeometryError):
        patchify(np.zeros((1, 5, 4)))
    with pytest.raises(GeometryError):
        unpatchify(np.zeros((440, 4)), 1, 42, 42)


def test_pos_embed_origin_and_separability():
    pe = pos_embed_2d(21, 21, 64)
    assert np.all(pe[0, 0::2] == 0) and np.all(pe[0, 1::2] == 1)
    diff = pe[0] != pe[1]  # (0,0) vs (0,1)
    assert not diff[:32].any() and diff[32:].any()
    assert len({row.tobytes() for row in pe}) == 441
    with pytest.raises(ConfigurationError):
        pos_embed_2d(2, 2, 30)


def test_pos_embed_frequencies():
    pe = pos_embed_2d(3, 5, 16)
    row, col = 2, 3
    omega = 1.0 / 10000 ** (np.arange(4) / 4)
    ref = np.empty(16)
    ref[0:8:2], ref[1:8:2] = np.sin(row * omega), np.cos(row * omega)
    ref[8::2], ref[9::2] = np.sin(col * omega), np.cos(col * omega)
    np.testing.assert_allclose(pe[row * 5 + col], ref, atol=1e-7)


def test_mask_counts_and_seeds():
    plans = [random_mask(441, 0.75, s) for s in range(100)]
    for p in plans:
        assert len(p.masked) == 330 and len(np.unique(p.masked)) == 330
        assert len(p.masked) + len(p.visible) == 441
    assert len({p.masked.tobytes() for p in plans}) == 100
    assert np.array_equal(random_mask(441, 0.75, 3).masked, plans[3].masked)
    assert len(random_mask(441, 0.001, 0).masked) == 0
    for r in (0.0, 1.0, -0.2):
        with pytest.raises(ConfigurationError):
            random_mask(441, r, 0)


def test_forward_shapes_and_determinism():
    model = build_mae(get_profile("small"), 16, seed=0)
    x = torch.randn(2, 16, 42, 42)
    out = model(x, no_mask(441))
    assert out.shape == x.shape
    plan = random_mask(441, 0.75, 1)
    assert torch.equal(model(x, [plan, plan]), model(x, [plan, plan]))
    assert torch.equal(build_mae(get_profile("small"), 16, 0).mask_token, model.mask_token)
    with pytest.raises(GeometryError):
        model(x, [random_mask(100, 0.5, 0)] * 2)


def test_encoder_sees_only_visible_tokens():
    model = build_mae(get_profile("tiny"), 2, seed=0)
    plan = random_mask(16, 0.75, 0)
    seen = {}

    def hook(module, args, out):
        seen["t"] = out.shape

    model.encoder.blocks[0].register_forward_hook(hook)
    model(torch.randn(2, 8, 8), plan)
    assert seen["t"][1] == 4


def test_loss_examples():
    plan = MaskPlan(1, np.array([0], np.int64), 1.0)
    target = torch.zeros(1, 1, 2, 2)
    assert masked_rmse_loss(target + 1, target, [plan]).item() == 1.0
    x = torch.randn(1, 3, 8, 8)
    assert masked_rmse_loss(x, x, [random_mask(16, 0.75, 0)]).item() == 0.0
    with pytest.raises(EmptyLossError):
        masked_rmse_loss(x, x, [random_mask(16, 0.75, 0)], torch.zeros_like(x, dtype=torch.bool))


def test_loss_matches_brute_force_with_invalid_pixels():
    rng = np.random.default_rng(0)
    recon, target = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(2, 3, 8, 8))
    valid = rng.random((2, 3, 8, 8)) < 0.5
    plans = [random_mask(16, 0.75, s) for s in (1, 2)]
    sq, n = 0.0, 0
    for b in range(2):
        for t in plans[b].masked:
            r, c = divmod(int(t), 4)
            for ch in range(3):
                for dr in range(2):
                    for dc in range(2):
                        i, j = 2 * r + dr, 2 * c + dc
                        if valid[b, ch, i, j]:
                            sq += (recon[b, ch, i, j] - target[b, ch, i, j]) ** 2
                            n += 1
    got = masked_rmse_loss(torch.from_numpy(recon), torch.from_numpy(target), plans,
                           torch.from_numpy(valid))
    assert got.item() == pytest.approx(np.sqrt(sq / n), rel=1e-12)


def test_loss_ignores_visible_patches():
    rng = np.random.default_rng(1)
    recon = torch.from_numpy(rng.normal(size=(1, 2, 42, 42)))
    target = torch.from_numpy(rng.normal(size=(1, 2, 42, 42)))
    plan = random_mask(441, 0.75, 5)
    base = masked_rmse_loss(recon, target, [plan])
    tok = patchify(recon.clone())
    tok[0, plan.visible] += torch.from_numpy(rng.normal(size=(111, 8))) * 100
    assert torch.equal(masked_rmse_loss(unpatchify(tok, 2, 42, 42), target, [plan]), base)


def test_visible_pixel_gradient_flows_through_attention():
    model = build_mae(get_profile("tiny"), 2, seed=3).double()
    plan = random_mask(16, 0.75, 2)
    x = torch.randn(1, 2, 8, 8, dtype=torch.float64, requires_grad=True)
    masked_rmse_loss(model(x, [plan]), x.detach(), [plan]).backward()
    vis = plan.visible[0]
    r, c = divmod(int(vis), 4)
    g = x.grad[0, :, 2 * r:2 * r + 2, 2 * c:2 * c + 2]
    assert g.abs().sum() > 0
    # finite-difference confirmation on the same pixel
    xs = {"x": x.detach().clone().requires_grad_(True)}
    err = finite_diff_check(lambda: masked_rmse_loss(model(xs["x"], [plan]), x.detach(), [plan]),
                            xs, n_samples=64)
    assert err < 1e-3


def test_tiny_profile_gradcheck():
    torch.manual_seed(0)
    model = build_mae(get_profile("tiny"), 2, seed=0).double()
    x = torch.randn(1, 2, 8, 8, dtype=torch.float64)
    plan = random_mask(16, 0.75, 0)
    err = finite_diff_check(lambda: masked_rmse_loss(model(x, [plan]), x, [plan]),
                            param_set(model), eps=1e-3, n_samples=50, seed=0)
    assert err < 1e-3


def test_profile_sizes():
    desk = count_parameters(build_mae(get_profile("desk"), 16))
    assert 1.0e6 < desk < 1.6e6
    with torch.device("meta"):
        big = count_parameters(MaskedAutoencoder(PROFILES["paper"], 17))
    assert 40e6 < big < 60e6


def _tiles(n, seed=0, **kw):
    return [gen_tile(SynthConfig(seed=seed, **kw), i) for i in range(n)]


def test_pretrain_zero_epochs_is_init():
    prof = get_profile("tiny")
    ckpt, log = pretrain(_tiles(2), prof, epochs=0, seed=4)
    assert log == []
    init = param_set(build_mae(prof, 16, 4))
    for k, v in init.items():
        assert np.array_equal(ckpt.params[k], v.detach().numpy())


def test_pretrain_deterministic_and_checkpoint_roundtrip(tmp_path):
    prof = get_profile("tiny")
    tiles = _tiles(4)
    a, log_a = pretrain(tiles, prof, epochs=3, seed=1, val_tiles=tiles[:2])
    b, log_b = pretrain(tiles, prof, epochs=3, seed=1, val_tiles=tiles[:2])
    assert a == b and log_a == log_b
    assert {r.split for r in log_a} == {"train", "train_norm", "val"}
    write_checkpoint(a, tmp_path / "m.ckp")
    model = mae_from_checkpoint(read_checkpoint(tmp_path / "m.ckp"))
    for k, v in param_set(model).items():
        assert np.array_equal(v.detach().numpy(), a.params[k])


def test_pretrain_rejects_cloudy_tiles():
    with pytest.raises(ValidationError):
        pretrain(_tiles(2, cloud_fraction=0.5), get_profile("tiny"), epochs=1)


def test_pretrain_reduces_loss():
    _, log = pretrain(_tiles(8), get_profile("tiny"), epochs=40, seed=0, lr_peak=5e-3)
    train = [r.loss for r in log if r.split == "train"]
    assert np.mean(train[-5:]) < 0.7 * np.mean(train[:5])
