import json

import numpy as np
import pytest
import torch

import oracles
from triposer.denoiser import (
    AttentionBlock, CrossAttention, Denoiser, DenoiserConfig, ResBlock, SelfAttention, TimeEmbedding,
    build, collate, condition_tokens, init_parameters, load_checkpoint, loss_and_gradients,
    parameter_manifest, read_manifest, save_checkpoint,
)
from triposer.diffusion import TrainingExample, make_linear_schedule, training_example
from triposer.errors import FormatError, NumericalError

TINY = dict(triplane_channels=2, resolution=16, base_channels=8, channel_multipliers=(1, 2),
            attention_resolutions=(16, 8), attention_heads=2, time_embed_dim=16, num_timesteps=20)


def tiny(**kw):
    return DenoiserConfig(**{**TINY, **kw})


def rand_inputs(cfg, B=2, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    C, R = cfg.triplane_channels, cfg.resolution
    lat = torch.randn(B, 6 * C, R, R, generator=g, dtype=dtype)
    cond = torch.randn(B, 12 * C, R, R, generator=g, dtype=dtype)
    t = torch.randint(1, cfg.num_timesteps + 1, (B,), generator=g)
    return lat, t, cond


# -- config and construction ---------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        build(tiny(attention_resolutions=(4,)))
    with pytest.raises(ValueError):
        build(tiny(attention_heads=3))
    with pytest.raises(ValueError):
        build(tiny(conditioning_mode="film"))
    with pytest.raises(ValueError):
        DenoiserConfig.from_dict({**tiny().to_dict(), "dropout": 0.1})
    assert DenoiserConfig.from_dict(tiny().to_dict()) == tiny()


def test_paper_scale_config_expressible():
    cfg = DenoiserConfig(triplane_channels=6, resolution=128, channel_multipliers=(1, 1, 2, 2, 4),
                         attention_resolutions=(32, 16, 8), attention_heads=4)
    cfg.validate()
    names = [n for n, _ in parameter_manifest(cfg)]
    assert any("cross_attn" in n for n in names)


def test_same_seed_same_parameters():
    a, b = build(tiny(), seed=3), build(tiny(), seed=3)
    for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2)
    c = build(tiny(), seed=4)
    assert not torch.equal(next(a.parameters()), next(c.parameters())) or any(
        not torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


@pytest.mark.parametrize("mode", ["concat", "cross_attention", "both"])
def test_zero_init_output(mode):
    cfg = tiny(conditioning_mode=mode)
    model = build(cfg, seed=1)
    out = model(*rand_inputs(cfg))
    assert out.shape == (2, 6 * cfg.triplane_channels, 16, 16)
    assert not out.any()


@pytest.mark.parametrize("kw", [
    {}, {"conditioning_mode": "concat", "attention_resolutions": ()},
    {"conditioning_mode": "cross_attention", "attention_resolutions": (8,)},
    {"channel_multipliers": (1, 2, 2), "attention_resolutions": (4,), "attention_heads": 1},
    {"triplane_channels": 3, "base_channels": 16},
])
def test_parameter_count_matches_formula(kw):
    cfg = tiny(**kw)
    assert sum(int(np.prod(s)) for _, s in parameter_manifest(cfg)) == oracles.count_parameters(cfg)


def test_manifest_pure_function_of_config():
    assert parameter_manifest(tiny()) == parameter_manifest(tiny())


def test_output_shape_random_configs():
    rng = np.random.default_rng(0)
    for _ in range(4):
        levels = int(rng.integers(1, 4))
        R = 8 << int(rng.integers(0, 2))
        sizes = [R >> k for k in range(levels)]
        cfg = DenoiserConfig(triplane_channels=int(rng.integers(1, 4)), resolution=R, base_channels=8,
                             channel_multipliers=tuple(int(m) for m in rng.integers(1, 3, levels)),
                             attention_resolutions=tuple(rng.choice(sizes, size=1)), attention_heads=1,
                             time_embed_dim=16, num_timesteps=10)
        model = build(cfg, seed=0)
        init_parameters(model, 0, zero_output=False)
        lat, t, cond = rand_inputs(cfg)
        out = model(lat, t, cond)
        assert out.shape == lat.shape and torch.isfinite(out).all()


def test_input_checks():
    cfg = tiny()
    model = build(cfg)
    lat, t, cond = rand_inputs(cfg)
    with pytest.raises(ValueError):
        model(lat[:, :-1], t, cond)
    with pytest.raises(ValueError):
        model(lat, t, cond[:, :-1])
    with pytest.raises(ValueError):
        model(lat, torch.tensor([0, 1]), cond)
    with pytest.raises(ValueError):
        model(lat, torch.tensor([1, 21]), cond)


def test_condition_token_count():
    cond = torch.randn(2, 12 * 2, 16, 16)
    for r in (16, 8, 4):
        tok = condition_tokens(cond, r)
        assert tok.shape == (2, 3 * r * r, 8)
    # token layout: plane-major, then row-major spatial
    tok = condition_tokens(cond, 16)
    assert torch.equal(tok[1, 256 + 5 * 16 + 3], cond[1, 8:16, 5, 3])
    with pytest.raises(ValueError):
        CrossAttention(8, 8, 2, 4, 8)(torch.randn(1, 8, 4, 4), torch.randn(1, 47, 8))


def test_concat_mode_uses_condition():
    cfg = tiny(conditioning_mode="concat", attention_resolutions=())
    model = build(cfg)
    init_parameters(model, 0, zero_output=False)
    lat, t, cond = rand_inputs(cfg)
    assert not torch.allclose(model(lat, t, cond), model(lat, t, cond + 1))


def test_cross_attention_mode_uses_condition():
    cfg = tiny(conditioning_mode="cross_attention")
    model = build(cfg)
    init_parameters(model, 0, zero_output=False)
    lat, t, cond = rand_inputs(cfg)
    assert model.conv_in.in_channels == 6 * cfg.triplane_channels
    assert not torch.allclose(model(lat, t, cond), model(lat, t, torch.randn_like(cond)))


# -- gradients ---------------------------------------------------------------------


def test_gradcheck_time_embedding():
    assert oracles.check_module_gradients(TimeEmbedding(8, 16), [torch.tensor([1, 7, 20])], n_dirs=25) < 1e-4


def test_gradcheck_resblock():
    assert oracles.check_module_gradients(ResBlock(8, 16, 16, 8), [torch.randn(2, 8, 6, 6), torch.randn(2, 16)], n_dirs=25) < 1e-4


def test_gradcheck_self_attention():
    assert oracles.check_module_gradients(SelfAttention(8, 2, 4, 8), [torch.randn(2, 8, 4, 4)], n_dirs=25) < 1e-4


def test_gradcheck_cross_attention():
    block = CrossAttention(8, 12, 2, 4, 8)
    assert oracles.check_module_gradients(block, [torch.randn(2, 8, 4, 4), torch.randn(2, 48, 12)], n_dirs=25) < 1e-4


def test_gradcheck_attention_block():
    block = AttentionBlock(8, 4, 4, 8, 12)
    assert oracles.check_module_gradients(block, [torch.randn(1, 8, 4, 4), torch.randn(1, 48, 12)], n_dirs=25) < 1e-4


# -- loss and gradients -----------------------------------------------------------------


def _batch(cfg, B=3, seed=0):
    sched = make_linear_schedule(cfg.num_timesteps)
    g = torch.Generator().manual_seed(seed)
    C, R = cfg.triplane_channels, cfg.resolution
    F0 = torch.randn(B, 6 * C, R, R, generator=g)
    cond = torch.randn(B, 12 * C, R, R, generator=g)
    return [training_example(F0[k:k + 1], cond[k:k + 1], sched, g) for k in range(B)]


def test_loss_deterministic_and_duplicate_invariant():
    cfg = tiny()
    model = build(cfg, seed=2)
    init_parameters(model, 2, zero_output=False)
    batch = _batch(cfg)
    l1, g1 = loss_and_gradients(model, batch)
    l2, g2 = loss_and_gradients(model, batch)
    assert l1 == l2 and all(torch.equal(g1[k], g2[k]) for k in g1)
    l3, _ = loss_and_gradients(model, batch + batch)
    assert abs(l3 - l1) <= 1e-6 * abs(l1)


def test_loss_permutation_invariance():
    cfg = tiny()
    model = build(cfg, seed=2).double()
    init_parameters(model, 2, zero_output=False)
    batch = [TrainingExample(e.latent.double(), e.t, e.eps.double(), e.cond.double()) for e in _batch(cfg, 4)]
    l1, g1 = loss_and_gradients(model, batch)
    l2, g2 = loss_and_gradients(model, batch[::-1])
    assert abs(l1 - l2) <= 1e-12 * abs(l1)
    for k in g1:
        assert torch.allclose(g1[k], g2[k], rtol=1e-10, atol=1e-14)


def test_zero_targets_zero_model_zero_loss():
    cfg = tiny()
    model = build(cfg)
    batch = [TrainingExample(e.latent, e.t, torch.zeros_like(e.eps), e.cond) for e in _batch(cfg)]
    loss, _ = loss_and_gradients(model, batch)
    assert loss == 0.0


def test_linear_probe_analytic_gradient():
    # eps_hat = w * x: d/dw mean((eps - w x)^2) = -2 mean(x (eps - w x))
    class Probe(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.nn.Parameter(torch.tensor(0.3, dtype=torch.float64))

        def forward(self, x, t, c):
            return self.w * x

    g = torch.Generator().manual_seed(0)
    x = torch.randn(4, 5, generator=g, dtype=torch.float64)
    eps = torch.randn(4, 5, generator=g, dtype=torch.float64)
    probe = Probe()
    _, grads = loss_and_gradients(probe, TrainingExample(x, torch.ones(4, dtype=torch.long), eps, x))
    expected = -2 * (x * (eps - 0.3 * x)).mean()
    assert abs(float(grads["w"]) - float(expected)) < 1e-14


def test_nonfinite_loss_names_sample():
    cfg = tiny()
    model = build(cfg)
    batch = collate(_batch(cfg))
    batch.eps[1, 0, 0, 0] = float("nan")
    with pytest.raises(NumericalError) as info:
        loss_and_gradients(model, batch)
    assert info.value.diagnostics["sample"] == 1
    with pytest.raises(ValueError):
        loss_and_gradients(model, [])


# -- checkpoints ---------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny()
    model = build(cfg, seed=5)
    init_parameters(model, 5, zero_output=False)
    save_checkpoint(model, tmp_path / "ck", {"note": "x"})
    back, extra = load_checkpoint(tmp_path / "ck")
    assert extra == {"note": "x"} and back.config == cfg
    for (n, p), (m, q) in zip(model.named_parameters(), back.named_parameters()):
        assert n == m and torch.equal(p, q)
    blob = (tmp_path / "ck" / "params.bin").read_bytes()
    save_checkpoint(back, tmp_path / "ck2", {"note": "x"})
    assert (tmp_path / "ck2" / "params.bin").read_bytes() == blob
    assert (tmp_path / "ck2" / "manifest.json").read_text() == (tmp_path / "ck" / "manifest.json").read_text()


def _mutate_manifest(path, fn):
    m = json.loads((path / "manifest.json").read_text())
    fn(m)
    (path / "manifest.json").write_text(json.dumps(m))


@pytest.mark.parametrize("fn,reason", [
    (lambda m: m.update(format="other"), "magic"),
    (lambda m: m.update(version=99), "version"),
    (lambda m: m["config"].update(base_channels=16), "schema"),
    (lambda m: m["parameters"][0].update(nbytes=4), "schema"),
])
def test_checkpoint_corruption(tmp_path, fn, reason):
    save_checkpoint(build(tiny()), tmp_path / "ck")
    _mutate_manifest(tmp_path / "ck", fn)
    with pytest.raises(FormatError) as info:
        load_checkpoint(tmp_path / "ck")
    assert info.value.reason == reason


def test_checkpoint_truncated_blob(tmp_path):
    save_checkpoint(build(tiny()), tmp_path / "ck")
    p = tmp_path / "ck" / "params.bin"
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(FormatError) as info:
        load_checkpoint(tmp_path / "ck")
    assert info.value.reason == "truncated"
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "missing")


def test_gradcheck_composed_unet():
    cfg = tiny(triplane_channels=1, attention_resolutions=(8,), attention_heads=2)
    model = build(cfg, seed=0)
    lat, t, cond = rand_inputs(cfg, B=1, dtype=torch.float64)
    assert oracles.check_module_gradients(model, [lat, t, cond], n_dirs=100) < 1e-4


def test_batch_of_three_matches_single():
    # a flat batch of three must not be mistaken for per-plane layout
    cfg = tiny(triplane_channels=1)
    model = build(cfg, seed=0)
    init_parameters(model, 0, zero_output=False)
    lat, t, cond = rand_inputs(cfg, B=3)
    with torch.no_grad():
        full = model(lat, t, cond)
        single = torch.cat([model(lat[k:k + 1], t[k:k + 1], cond[k:k + 1]) for k in range(3)])
    assert torch.allclose(full, single, atol=1e-5)
