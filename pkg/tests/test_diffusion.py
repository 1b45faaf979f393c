import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coffeelab import autodiff as ad
from coffeelab.datagen import N_PIX, build_pretrain_corpus
from coffeelab.diffusion import (
    DenoiserNet, PretrainConfig, SamplerConfig, check_coverage, ddpm_sample, diffusion_loss, forward_noise,
    guided, make_batch, make_schedule, neg_prompt_train_loss, predict_noise, pretrain, skip_scale,
    to_model_space, to_pixel_space,
)
from coffeelab.evaluation import presence_rate
from coffeelab.textenc import encode_value
from oracles import numeric_grad, rel_err


def test_schedule_matches_brute_force_product():
    s = make_schedule(200, 1e-4, 0.02)
    betas = [1e-4 + (0.02 - 1e-4) * k / 199 for k in range(200)]
    for t in (0, 1, 57, 199):
        prod = 1.0
        for b in betas[: t + 1]:
            prod *= 1 - b
        assert s.alpha_bar[t] == pytest.approx(prod, rel=1e-12)
    assert s.alpha_bar[0] == pytest.approx(0.9999, abs=1e-12)


def test_default_schedule_reaches_near_pure_noise():
    s = make_schedule()
    assert s.T == 200 and s.alpha_bar[-1] < 0.05
    assert np.all(np.diff(s.alpha_bar) < 0)


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (200, 0.0, 0.02), (200, 0.03, 0.02), (200, 1e-4, 1.0)])
def test_schedule_bounds(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_forward_noise_limits():
    s = make_schedule()
    z, eps = np.full(N_PIX, 0.5, np.float32), np.ones(N_PIX, np.float32)
    np.testing.assert_allclose(forward_noise(z, 0, eps, s),
                               np.sqrt(s.alpha_bar[0]) * 0.5 + np.sqrt(1 - s.alpha_bar[0]), rtol=1e-6)
    with pytest.raises(ValueError, match="outside"):
        forward_noise(z, 200, eps, s)
    with pytest.raises(ValueError):
        forward_noise(z, -1, eps, s)


@settings(max_examples=30)
@given(st.integers(0, 199), st.integers(0, 2**32 - 1))
def test_forward_noise_moments(t, seed):
    s = make_schedule()
    rng = np.random.default_rng(seed)
    z_y = rng.uniform(-1, 1, N_PIX).astype(np.float32)
    eps = rng.standard_normal((2000, N_PIX)).astype(np.float32)
    z_t = forward_noise(np.broadcast_to(z_y, eps.shape), np.full(2000, t), eps, s)
    se = np.sqrt(1 - s.alpha_bar[t]) / np.sqrt(2000 * N_PIX)
    assert abs((z_t - np.sqrt(s.alpha_bar[t]) * z_y).mean()) < 5 * se
    assert z_t.var(0).mean() == pytest.approx(1 - s.alpha_bar[t], rel=0.02)


def test_pixel_space_round_trip():
    x = np.linspace(0, 1, 11, dtype=np.float32)
    np.testing.assert_allclose(to_pixel_space(to_model_space(x)), x, atol=1e-7)
    assert to_pixel_space(np.array([5.0, -5.0])).tolist() == [1.0, 0.0]


def test_zero_final_layer_predicts_zero_without_skip(rng):
    net = DenoiserNet.init(0, zero_final=True)
    out = predict_noise(net, rng.standard_normal(N_PIX), 17, ad.const(rng.standard_normal(32)))
    assert not out.data.any()


def test_skip_path_alone_is_sigma_times_input(rng):
    s = make_schedule()
    net = DenoiserNet.init(0, zero_final=True, schedule=s)
    z = rng.standard_normal((3, N_PIX)).astype(np.float32)
    t = np.array([0, 50, 199])
    out = predict_noise(net, z, t, ad.const(np.zeros(32)))
    np.testing.assert_allclose(out.data, z * skip_scale(s)[t][:, None].astype(np.float32), rtol=1e-6)


def test_denoiser_shapes_and_errors(rng):
    net = DenoiserNet.init(0, hidden=16)
    out = predict_noise(net, rng.standard_normal((5, N_PIX)), np.arange(5), ad.const(np.zeros(32)))
    assert out.data.shape == (5, N_PIX)
    with pytest.raises(ad.ShapeError, match="width"):
        predict_noise(net, rng.standard_normal(N_PIX), 3, ad.const(np.zeros(8)))
    with pytest.raises(ad.ShapeError):
        predict_noise(net, rng.standard_normal((2, N_PIX)), np.arange(2), ad.param(np.zeros(32)))
    assert net.n_params() == (N_PIX + 64) * 16 + 16 + 16 * 16 + 16 + 16 * N_PIX + N_PIX


def test_loss_gradient_wrt_embedding_matches_finite_differences(rng):
    s = make_schedule()
    net = DenoiserNet(
        [p.data.astype(np.float64) for p in DenoiserNet.init(1, hidden=8).params()],
        skip_scale(s), dtype=np.float64)
    z_y, eps = rng.uniform(-1, 1, N_PIX), rng.standard_normal(N_PIX)
    v = ad.param(rng.standard_normal(32) * 0.5, np.float64)

    def f():
        b = make_batch(z_y, 40, eps, ad.const(v.data, np.float64), s)
        b.z_t = b.z_t.astype(np.float64)
        return diffusion_loss(net, b).item()

    with ad.Graph() as g:
        b = make_batch(z_y, 40, eps, v, s)
        b.z_t = b.z_t.astype(np.float64)
        g.backward(diffusion_loss(net, b))
    assert rel_err(v.grad, numeric_grad(f, v.data, 1e-5)) <= 1e-4


def test_loss_is_mean_squared_noise_for_a_zero_predictor(rng):
    s = make_schedule()
    net = DenoiserNet.init(0, zero_final=True)
    eps = rng.standard_normal((64, N_PIX)).astype(np.float32)
    b = make_batch(np.zeros((64, N_PIX), np.float32), rng.integers(0, 200, 64), eps, ad.const(np.zeros(32)), s)
    loss = diffusion_loss(net, b).item()
    assert loss == pytest.approx(float(np.mean(eps.astype(np.float64) ** 2)), rel=1e-6)
    assert abs(loss - 1.0) < 0.1


def test_guidance_identities(rng):
    a, b = ad.const(rng.standard_normal(8)), ad.const(rng.standard_normal(8))
    np.testing.assert_array_equal(guided(a, b, 0.0).data, a.data)
    np.testing.assert_allclose(guided(a, b, 1.0).data, b.data, rtol=1e-6)
    np.testing.assert_allclose(guided(a, b, 3.0).data, a.data + 3 * (b.data - a.data), rtol=1e-5, atol=1e-6)


def test_negative_prompt_loss_reduces_to_plain_loss(rng):
    s = make_schedule()
    net = DenoiserNet.init(2, hidden=16, schedule=s)
    v, v_neg = ad.const(rng.standard_normal(32)), ad.const(rng.standard_normal(32))
    b = make_batch(rng.uniform(-1, 1, N_PIX), 80, rng.standard_normal(N_PIX), v, s)
    plain = diffusion_loss(net, b).item()
    assert neg_prompt_train_loss(net, b, v, v_neg, 0.0).item() == plain
    assert neg_prompt_train_loss(net, b, v, v, 3.0).item() == plain
    assert neg_prompt_train_loss(net, b, v, v_neg, 3.0).item() != plain


def test_embedding_gradient_is_sparse(tiny_model, rng):
    s = make_schedule()
    table = tiny_model.table.copy()
    from coffeelab.textenc import encode
    with ad.Graph() as g:
        v = encode("square", table)
        g.backward(diffusion_loss(tiny_model.net, make_batch(rng.uniform(-1, 1, N_PIX), 10,
                                                             rng.standard_normal(N_PIX), v, s)))
    rows = np.flatnonzero(np.abs(table.matrix.grad).sum(1))
    assert rows.tolist() == [table.vocab.id("square")]


def test_sampler_is_deterministic_and_in_range(tiny_model):
    s = make_schedule()
    cfg = SamplerConfig(guidance_scale=2.0, seed=9)
    a = ddpm_sample(tiny_model.net, tiny_model.table, "circle", s, cfg, n=3)
    b = ddpm_sample(tiny_model.net, tiny_model.table, "circle", s, cfg, n=3)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (3, N_PIX) and a.min() >= 0 and a.max() <= 1
    c = ddpm_sample(tiny_model.net, tiny_model.table, "circle", s, SamplerConfig(guidance_scale=2.0, seed=10), n=3)
    assert not np.array_equal(a, c)


def test_sampler_validation(tiny_model):
    s = make_schedule()
    with pytest.raises(ValueError):
        SamplerConfig(guidance_scale=-1)
    with pytest.raises(ValueError, match="steps"):
        ddpm_sample(tiny_model.net, tiny_model.table, "circle", s, SamplerConfig(steps=50))


def test_pretrained_model_follows_the_prompt(assets):
    """The prompted base is the most frequent class among its samples, and
    well above the 1/4 chance rate."""
    s = assets.schedule
    for k, base in enumerate(assets.fx.bases):
        x = ddpm_sample(assets.net, assets.table, base, s, SamplerConfig(seed=k), n=32)
        counts = np.bincount(assets.fx.base_probs(x).argmax(1), minlength=4)
        assert counts.argmax() == k and counts[k] / 32 >= 0.5, (base, counts)


def test_pretrained_model_follows_the_attribute(assets):
    s = assets.schedule
    with_attr = ddpm_sample(assets.net, assets.table, "circle frame", s, SamplerConfig(seed=1), n=32)
    without = ddpm_sample(assets.net, assets.table, "circle", s, SamplerConfig(seed=1), n=32)
    assert presence_rate(with_attr, "frame", assets.fx) >= 0.8
    assert presence_rate(without, "frame", assets.fx) <= 0.2


def test_explicit_embedding_overrides_prompt(tiny_model):
    s = make_schedule()
    v = encode_value("square", tiny_model.table)
    a = ddpm_sample(tiny_model.net, tiny_model.table, "circle", s, SamplerConfig(seed=0), n=2, v=v)
    b = ddpm_sample(tiny_model.net, tiny_model.table, "square", s, SamplerConfig(seed=0), n=2)
    np.testing.assert_array_equal(a, b)


def test_pretraining_reduces_loss(tiny_model):
    first, last = np.mean(tiny_model.losses[:20]), np.mean(tiny_model.losses[-20:])
    assert last < first
    assert tiny_model.uncond_used > 0


def test_pretraining_without_dropout_never_uses_uncond(small_corpus):
    res = pretrain(small_corpus, PretrainConfig(steps=5, batch_size=8, p_uncond=0.0))
    assert res.uncond_used == 0


def test_pretraining_is_deterministic(small_corpus):
    cfg = PretrainConfig(steps=5, batch_size=8, seed=3)
    a, b = pretrain(small_corpus, cfg), pretrain(small_corpus, cfg)
    assert a.losses == b.losses
    for p, q in zip(a.net.params() + a.table.params(), b.net.params() + b.table.params()):
        np.testing.assert_array_equal(p.data, q.data)


def test_pretraining_requires_full_coverage():
    corpus = [im for im in build_pretrain_corpus(320, 0) if im.base != "cross"]
    with pytest.raises(ValueError, match="missing combinations"):
        check_coverage(corpus)
