import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from anchorcodec.entropy import (
    P_MIN,
    SIGMA_MAX,
    SIGMA_MIN,
    FactorizedPrior,
    HyperpriorTable,
    ModelConfig,
    SequencingError,
    SymbolOverflowError,
    build_context,
    factorized_bin_prob,
    factorized_cdf,
    gaussian_bin_prob,
    gaussian_bits,
    gaussian_bits_backward,
    gaussian_mass,
    heads,
    heads_backward,
    normalize_positions,
    predict_params,
    quantize_attr,
    round_half_away,
)
from anchorcodec.partition import PartitionConfig, partition
from anchorcodec.plan import full_plan, single_plan
from anchorcodec.rate import code_pass, draw_noise, train_loss

from conftest import random_scene, small_model


def perturbed_prior(channels, seed=0):
    prior = FactorizedPrior.init(channels)
    rng = np.random.default_rng(seed)
    for arr in prior.params().values():
        arr += rng.normal(0.0, 0.5, size=arr.shape)
    return prior


# ------------------------------------------------------------------ basics


@pytest.mark.parametrize("x, want", [(0.5, 1.0), (-0.5, -1.0), (1.49, 1.0), (-2.5, -3.0), (0.0, 0.0)])
def test_round_half_away(x, want):
    assert round_half_away(x) == want


def test_model_config_layout():
    cfg = ModelConfig(feature_dim=8, scaling_dim=3, n_offsets=2, hyper_dim=2, levels=3)
    assert cfg.n_channels == 17
    assert cfg.context_dim(2) == 5
    assert cfg.context_dim(0) == cfg.context_dim(1) == 2 + 11 + 3
    assert cfg.group_slices()["offsets"] == slice(11, 17)
    assert ModelConfig.hyper_dim_for(50) == 12


def test_normalize_positions_degenerate_axis():
    out = normalize_positions([[0.0, 5.0, 2.0], [4.0, 5.0, 2.0]], [0.0, 5.0, 0.0], [4.0, 5.0, 4.0])
    assert out.tolist() == [[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]


# ------------------------------------------------------------------- heads


def test_heads_ranges(rng):
    delta0 = np.array([1.0, 0.1])
    raw = rng.normal(0.0, 50.0, size=(200, 6))
    mu, sigma, delta, _ = heads(raw, delta0)
    assert np.array_equal(mu, raw[:, :2])
    assert (sigma >= SIGMA_MIN).all() and (sigma <= SIGMA_MAX).all()
    assert (delta >= delta0 / 2 - 1e-15).all() and (delta <= delta0 * 2 + 1e-15).all()


def test_heads_at_zero():
    mu, sigma, delta, _ = heads(np.zeros(3), np.array([0.5]))
    assert sigma[0] == pytest.approx(SIGMA_MIN + math.log(2.0))
    assert delta[0] == 0.5


def test_heads_wrong_width():
    with pytest.raises(ValueError):
        heads(np.zeros(5), np.ones(2))


def test_heads_backward_fd(rng):
    delta0 = rng.uniform(0.1, 2.0, size=4)
    raw = rng.normal(0.0, 2.0, size=(3, 12))
    w = rng.normal(size=(3, 3, 4))

    def f(r):
        mu, sigma, delta, _ = heads(r, delta0)
        return float((w[:, 0] * mu + w[:, 1] * sigma + w[:, 2] * delta).sum())

    _, _, _, cache = heads(raw, delta0)
    g = heads_backward(cache, w[:, 0], w[:, 1], w[:, 2])
    for idx in np.ndindex(raw.shape):
        e = np.zeros_like(raw)
        e[idx] = 1e-6
        assert g[idx] == pytest.approx((f(raw + e) - f(raw - e)) / 2e-6, rel=1e-6, abs=1e-8)


# ---------------------------------------------------------------- Gaussian


@settings(max_examples=200, deadline=None)
@given(st.integers(-30, 30), st.floats(-3, 3), st.floats(0.01, 20), st.floats(0.01, 5))
def test_gaussian_mass_matches_erfc(q, mu, sigma, delta):
    want = max(oracles.gaussian_bin_mass(q, mu, sigma, delta), P_MIN)
    got = float(gaussian_bin_prob(q, mu, sigma, delta, mode="code"))
    assert got == pytest.approx(want, rel=1e-9, abs=1e-15)


def test_gaussian_train_and_code_agree():
    mu, sigma, delta = 0.3, 1.7, 0.4
    for s in range(-5, 6):
        a = gaussian_bin_prob(mu + s * delta, mu, sigma, delta, mode="train")
        b = gaussian_bin_prob(s, mu, sigma, delta, mode="code")
        assert a == pytest.approx(b, rel=1e-12)


def test_gaussian_far_tail_is_floored():
    assert gaussian_bin_prob(10_000, 0.0, 1.0, 1.0, mode="code") == P_MIN


def test_gaussian_probabilities_sum_to_one():
    s = np.arange(-200, 201)
    assert gaussian_mass(s * 0.5, 3.0, 0.5).sum() == pytest.approx(1.0, abs=1e-12)


def test_gaussian_bits_backward_fd(rng):
    v, mu = rng.normal(size=20), rng.normal(size=20)
    sigma, delta = rng.uniform(0.2, 3.0, 20), rng.uniform(0.1, 2.0, 20)
    g = rng.normal(size=20)
    _, cache = gaussian_bits(v, mu, sigma, delta)
    grads = gaussian_bits_backward(cache, g)
    args = [v, mu, sigma, delta]
    for k in range(4):
        for i in range(20):
            up = [a.copy() for a in args]
            dn = [a.copy() for a in args]
            up[k][i] += 1e-6
            dn[k][i] -= 1e-6
            fd = ((g * gaussian_bits(*up)[0]).sum() - (g * gaussian_bits(*dn)[0]).sum()) / 2e-6
            assert grads[k][i] == pytest.approx(fd, rel=1e-5, abs=1e-9)


# ---------------------------------------------------------------- quantize


def test_quantize_attr_code_mode():
    deq, sym = quantize_attr(np.array([1.26, -0.74]), np.array([1.0, -1.0]), np.array([0.5, 0.5]))
    assert sym.tolist() == [1, 1]
    assert deq.tolist() == [1.5, -0.5]


def test_quantize_attr_train_mode():
    out, sym = quantize_attr(2.0, 0.0, 0.5, mode="train", noise=0.25)
    assert out == 2.125 and sym is None


def test_quantize_attr_overflow():
    with pytest.raises(SymbolOverflowError):
        quantize_attr(np.array([1e9]), np.array([0.0]), np.array([1.0]))


def test_quantize_attr_bad_mode():
    with pytest.raises(ValueError):
        quantize_attr(1.0, 0.0, 1.0, mode="nope")


# ------------------------------------------------------------- factorized


def test_factorized_cdf_monotone_and_bounded():
    prior = perturbed_prior(3, seed=4)
    x = np.concatenate([[-1e6], np.linspace(-40, 40, 801), [1e6]])
    for ch in range(3):
        c = factorized_cdf(x, ch, prior)
        assert (np.diff(c) >= 0).all()
        assert c[0] < 1e-6 and c[-1] > 1 - 1e-6


def test_factorized_default_is_symmetric():
    prior = FactorizedPrior.init(2)
    assert factorized_cdf(0.0, 1, prior) == pytest.approx(0.5)
    p = factorized_bin_prob(np.arange(-3, 4), 0, prior)
    assert np.allclose(p, p[::-1])


def test_factorized_bins_sum_to_one():
    prior = perturbed_prior(2, seed=1)
    centres = np.zeros((20001, 2))
    centres[:, 1] = np.arange(-10000, 10001)
    assert prior.bin_mass(centres)[:, 1].sum() == pytest.approx(1.0, abs=1e-6)


def test_factorized_channel_range():
    with pytest.raises(IndexError):
        factorized_cdf(0.0, 5, FactorizedPrior.init(2))


def test_factorized_bits_backward_fd(rng):
    prior = perturbed_prior(2, seed=2)
    centres = rng.normal(0, 3, size=(7, 2))
    g = rng.normal(size=(7, 2))
    bits, cache = prior.bits(centres)
    grads, g_centres = prior.bits_backward(cache, g)

    def f():
        return float((g * prior.bits(centres)[0]).sum())

    for name, arr in prior.params().items():
        for idx in list(np.ndindex(arr.shape))[:12]:
            old = arr[idx]
            arr[idx] = old + 1e-6
            up = f()
            arr[idx] = old - 1e-6
            dn = f()
            arr[idx] = old
            assert grads[name][idx] == pytest.approx((up - dn) / 2e-6, rel=1e-5, abs=1e-9), name
    for idx in np.ndindex(centres.shape):
        old = centres[idx]
        centres[idx] = old + 1e-6
        up = f()
        centres[idx] = old - 1e-6
        dn = f()
        centres[idx] = old
        assert g_centres[idx] == pytest.approx((up - dn) / 2e-6, rel=1e-5, abs=1e-9)


def test_hyper_rounded_overflow():
    table = HyperpriorTable(np.array([[1e6]]), FactorizedPrior.init(1))
    with pytest.raises(SymbolOverflowError):
        table.rounded()


# ---------------------------------------------------------------- context


def test_build_context_layout(rng):
    scene = random_scene(rng, 40)
    part = partition(scene, PartitionConfig(levels=2))
    model = small_model(scene, 2)
    child = int(np.flatnonzero(part.parent_of >= 0)[0])
    parent = int(part.parent_of[child])
    store = {parent: np.arange(20.0)}
    ctx = build_context(child, part, scene, model.hyper, decoded_store=store)
    assert ctx.values[ctx.segments["parent_feature"]].tolist() == list(range(6))
    assert ctx.values[ctx.segments["parent_scaling"]].tolist() == [6.0, 7.0, 8.0]
    assert ctx.values[ctx.segments["z"]].tolist() == round_half_away(model.hyper.z[child]).tolist()
    assert len(ctx.values) == model.config.context_dim(0)
    top = int(np.flatnonzero(part.parent_of < 0)[0])
    assert len(build_context(top, part, scene, model.hyper).values) == model.config.context_dim(1)


def test_build_context_requires_decoded_parent(rng):
    scene = random_scene(rng, 40)
    part = partition(scene, PartitionConfig(levels=2))
    model = small_model(scene, 2)
    child = int(np.flatnonzero(part.parent_of >= 0)[0])
    with pytest.raises(SequencingError):
        build_context(child, part, scene, model.hyper, decoded_store={})
    with pytest.raises(SequencingError):
        build_context(child, part, scene, model.hyper)


def test_predict_params_groups(rng):
    scene = random_scene(rng, 20)
    model = small_model(scene, 1)
    ctx = rng.normal(size=(4, model.config.context_dim(0)))
    groups = predict_params(model.nets[0], ctx, model.config.channel_delta0(), model.config)
    assert groups["feature"].mu.shape == (4, 6)
    assert groups["offsets"].sigma.shape == (4, 6)
    with pytest.raises(ValueError):
        predict_params(model.nets[0], ctx[:, :3], model.config.channel_delta0())


# ------------------------------------------------------------------- loss


def reference_single_anchor_loss(model, scene, noise, lambda_e, lambda_d):
    """Loop-level recomputation of the training loss for a one-anchor scene."""
    cfg = model.config
    u_z, u_a = noise
    net = model.nets[0]
    z = model.hyper.z[0] + u_z[0]
    x = list(z) + [0.0, 0.0, 0.0]  # a single anchor normalizes to the bbox centre
    h = x
    for w, b in ((net.w1, net.b1), (net.w2, net.b2)):
        h = [max(0.0, sum(h[i] * w[i][j] for i in range(len(h))) + b[j]) for j in range(len(b))]
    raw = [sum(h[i] * net.w3[i][j] for i in range(len(h))) + net.b3[j]
           for j in range(net.w3.shape[1])]
    c = cfg.n_channels
    d0 = cfg.channel_delta0()
    vals = scene.attributes()[0]
    m = scene.channel_mask()[0]
    bits = 0.0
    dist = 0.0
    for ch in range(c):
        if not m[ch]:
            continue
        mu = raw[ch]
        sigma = min(SIGMA_MIN + math.log1p(math.exp(raw[c + ch])), SIGMA_MAX)
        delta = d0[ch] * math.exp(math.tanh(raw[2 * c + ch]) * math.log(2.0))
        v = vals[ch] + u_a[0][ch] * delta
        p = oracles.gaussian_bin_mass((v - mu) / delta, mu, sigma, delta)
        bits -= math.log2(max(p, P_MIN))
        dist += (u_a[0][ch] * delta) ** 2
    for ch in range(cfg.hyper_dim):
        upper = factorized_cdf(z[ch] + 0.5, ch, model.hyper.prior)
        lower = factorized_cdf(z[ch] - 0.5, ch, model.hyper.prior)
        bits -= math.log2(max(upper - lower, P_MIN))
    return lambda_e * bits + lambda_d * dist / max(m.sum(), 1)


def test_single_anchor_loss_matches_reference(rng):
    scene = random_scene(rng, 1, feature_dim=3, n_offsets=2, mask_p=0.5)
    scene.masks[0] = [True, False]
    model = small_model(scene, 1, hidden=5)
    plan = single_plan(1)
    noise = draw_noise(rng, model, plan)
    got = train_loss(model, scene, plan, noise, lambda_e=0.3, lambda_d=2.0, need_grad=False)
    want = reference_single_anchor_loss(model, scene, noise, 0.3, 2.0)
    assert got.loss == pytest.approx(want, rel=1e-10)


def test_zero_weights_give_zero_loss(rng):
    scene = random_scene(rng, 30)
    part = partition(scene, PartitionConfig(levels=2))
    model = small_model(scene, 2)
    plan = full_plan(part)
    res = train_loss(model, scene, plan, draw_noise(rng, model, plan), lambda_e=0.0, lambda_d=0.0)
    assert res.loss == 0.0
    assert all(not g.any() for g in res.grads.values())
    assert res.rate.total > 0


def test_masked_channels_cost_nothing(rng):
    scene = random_scene(rng, 30)
    part = partition(scene, PartitionConfig(levels=2))
    model = small_model(scene, 2)
    plan = full_plan(part)
    scene.masks[:] = False
    res = code_pass(model, scene, plan)
    assert res.rate.offsets == 0.0
    assert (res.symbols[:, 9:] == 0).all()
