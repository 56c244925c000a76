import math

import numpy as np
import pytest

from cimlite import autodiff as ad
from cimlite.autodiff import Tensor
from cimlite.data import default_config, make_dataset
from cimlite.errors import ConfigurationError, DimensionError, NumericalError
from cimlite.model import CimConfig, build_cim
from cimlite.ssl import (
    AugmentConfig,
    LarsState,
    SslRunConfig,
    augment,
    augment_batch,
    cosine_lr,
    is_lars_exempt,
    lars_step,
    nt_xent_loss,
    pretrain,
    view_batches,
    view_rng,
    vicreg_loss,
)
from oracles import nt_xent_oracle, vicreg_oracle


@pytest.mark.parametrize("seed", range(50))
def test_nt_xent_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    b = int(rng.integers(2, 6))
    d = int(rng.integers(2, 7))
    t = float(rng.uniform(0.05, 1.0))
    z = rng.normal(size=(2 * b, d))
    assert abs(nt_xent_loss(Tensor(z), t).item() - nt_xent_oracle(z.tolist(), t)) < 1e-9


@pytest.mark.parametrize("seed", range(50))
def test_vicreg_matches_double_loop(seed):
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(2, 7))
    d = int(rng.integers(1, 6))
    a = rng.normal(scale=rng.uniform(0.1, 2), size=(n, d))
    b = a + rng.normal(scale=0.3, size=(n, d))
    assert abs(vicreg_loss(Tensor(a), Tensor(b)).item() - vicreg_oracle(a, b)) < 1e-9


def test_nt_xent_identical_pair_is_ln3():
    z = np.ones((4, 5))
    assert abs(nt_xent_loss(Tensor(z), 0.2).item() - math.log(3)) < 1e-12


def test_nt_xent_errors():
    with pytest.raises(ConfigurationError):
        nt_xent_loss(Tensor(np.ones((4, 2))), 0.0)
    with pytest.raises(NumericalError):
        nt_xent_loss(Tensor(np.zeros((4, 2))), 0.2)
    with pytest.raises(DimensionError):
        nt_xent_loss(Tensor(np.ones((3, 2))), 0.2)


def test_vicreg_terms_and_errors():
    a = np.random.default_rng(0).normal(size=(8, 3))
    _, terms = vicreg_loss(Tensor(a), Tensor(a), return_terms=True)
    assert terms["invariance"] == 0.0
    with pytest.raises(DimensionError):
        vicreg_loss(Tensor(a[:1]), Tensor(a[:1]))


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(6, 4))
    assert ad.grad_check(lambda t: nt_xent_loss(t, 0.3), z) < 1e-6
    errs = ad.grad_check_many(lambda t: vicreg_loss(t["a"], t["b"]), {"a": z[:3] * 0.3, "b": z[3:] * 0.3})
    assert max(errs.values()) < 1e-6


def test_lars_two_steps_match_hand_computation():
    w0 = np.array([3.0, 4.0])  # |w| = 5
    b0 = np.array([1.0])
    g1, g2 = np.array([0.6, 0.8]), np.array([0.0, 2.0])  # |g| = 1, 2
    state = LarsState(lr=0.3, momentum=0.9, weight_decay=1e-6, trust=1e-3)
    params = {"fc.weight": w0.copy(), "fc.bias": b0.copy()}
    lars_step(params, {"fc.weight": g1, "fc.bias": np.array([0.5])}, state)
    local1 = 1e-3 * 5.0 / (1.0 + 1e-6 * 5.0)
    u1 = 0.3 * local1 * (g1 + 1e-6 * w0)
    w1 = w0 - u1
    np.testing.assert_allclose(params["fc.weight"], w1, rtol=0, atol=1e-15)
    np.testing.assert_allclose(params["fc.bias"], b0 - 0.3 * 0.5, atol=1e-15)
    lars_step(params, {"fc.weight": g2, "fc.bias": np.array([0.5])}, state, lr=0.1)
    n1 = float(np.linalg.norm(w1))
    local2 = 1e-3 * n1 / (2.0 + 1e-6 * n1)
    u2 = 0.9 * u1 + 0.1 * local2 * (g2 + 1e-6 * w1)
    np.testing.assert_allclose(params["fc.weight"], w1 - u2, rtol=0, atol=1e-15)
    np.testing.assert_allclose(params["fc.bias"], b0 - 0.15 - (0.9 * 0.15 + 0.05), atol=1e-15)


def test_lars_exemptions_and_errors():
    assert is_lars_exempt("stem.bn.gamma") and is_lars_exempt("stem.bias") and not is_lars_exempt("stem.weight")
    with pytest.raises(NumericalError):
        lars_step({"a.weight": np.ones(2)}, {"a.weight": np.array([np.inf, 0])}, LarsState())


def test_cosine_schedule():
    assert cosine_lr(0.3, 0, 100) == 0.3
    assert abs(cosine_lr(0.3, 50, 100) - 0.15) < 1e-15
    assert cosine_lr(0.3, 100, 100) == 0.0


def test_augment_identity_is_exact():
    x = np.random.default_rng(0).uniform(size=(3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(augment(x, AugmentConfig.identity(), np.random.default_rng(1)), x)


def test_augment_geometry_shared_across_channels():
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(12, 12))
    x = np.stack([img, img, img])
    cfg = AugmentConfig(intensity=0.0, noise=0.0)
    for seed in range(10):
        y = augment(x, cfg, np.random.default_rng(seed))
        assert y.shape == x.shape
        np.testing.assert_array_equal(y[0], y[1])
        np.testing.assert_array_equal(y[0], y[2])


def test_augment_flips_are_exact_and_output_nonnegative():
    x = np.arange(2 * 4 * 4, dtype=np.float64).reshape(2, 4, 4)
    cfg = AugmentConfig(p_flip=1.0, rotation=0.0, translation=0.0, scale=(1.0, 1.0), intensity=0.0, noise=0.0)
    np.testing.assert_array_equal(augment(x, cfg, np.random.default_rng(0)), x[:, ::-1, ::-1])
    y = augment(x, AugmentConfig.preset("strong"), np.random.default_rng(0))
    assert y.min() >= 0


def test_augment_draws_per_channel_gains_in_range():
    x = np.ones((4, 6, 6))
    cfg = AugmentConfig(p_flip=0.0, rotation=0.0, translation=0.0, scale=(1.0, 1.0), intensity=0.2, noise=0.0)
    y, draw = augment(x, cfg, np.random.default_rng(5), return_draw=True)
    assert np.all((draw.gains >= 0.8) & (draw.gains <= 1.2))
    np.testing.assert_allclose(y, np.broadcast_to(draw.gains[:, None, None], x.shape))


def test_presets_scale_strength():
    weak, base, strong = (AugmentConfig.preset(s) for s in ("weak", "default", "strong"))
    assert weak.noise == 0.5 * base.noise and strong.noise == 2 * base.noise
    assert strong.rotation == 2 * base.rotation and weak.intensity == 0.5 * base.intensity
    with pytest.raises(ConfigurationError):
        AugmentConfig.preset("extreme")


def test_views_are_schedule_independent():
    x = np.random.default_rng(0).uniform(size=(5, 2, 8, 8))
    cfg = AugmentConfig()
    full = augment_batch(x, cfg, [view_rng(7, 3, i, 0) for i in range(5)])
    single = augment(x[2], cfg, view_rng(7, 3, 2, 0))
    np.testing.assert_allclose(full[2], single)


@pytest.fixture(scope="module")
def small_bundle():
    return make_dataset(default_config(n_cells=400, patch_size=12))


def test_view_batches_deterministic(small_bundle):
    cfg = SslRunConfig(batch_size=8, iterations=2)
    a = list(view_batches(small_bundle, cfg, AugmentConfig()))
    b = list(view_batches(small_bundle, cfg, AugmentConfig()))
    for (_, a1, a2), (_, b1, b2) in zip(a, b):
        np.testing.assert_array_equal(a1, b1)
        np.testing.assert_array_equal(a2, b2)
    assert not np.array_equal(a[0][1], a[0][2])


@pytest.mark.parametrize("objective", ["simclr", "vicreg"])
def test_pretrain_is_deterministic_and_learns(small_bundle, objective):
    model = build_cim(CimConfig.cim_s(8, input_size=12))
    cfg = SslRunConfig(objective=objective, batch_size=16, iterations=30)
    m1, h1 = pretrain(small_bundle, model, cfg)
    m2, h2 = pretrain(small_bundle, model, cfg)
    assert m1.digest() == m2.digest() and h1 == h2
    assert np.mean(h1[-5:]) < np.mean(h1[:5])
    assert model.digest() == build_cim(CimConfig.cim_s(8, input_size=12)).digest()


def test_pretrain_rejects_bad_config(small_bundle):
    with pytest.raises(ConfigurationError):
        pretrain(small_bundle, build_cim(CimConfig.cim_s(8)), SslRunConfig(objective="byol"))
    with pytest.raises(ConfigurationError):
        pretrain(small_bundle, build_cim(CimConfig.cim_s(8, proj_dim=0)), SslRunConfig(iterations=1))


def test_lars_quadratic_trajectory_matches_scalar_script():
    # f(w) = 0.5 * a * w^2 on a two-element tensor, gradient a * w
    a = 3.0
    w = np.array([1.5, -0.5])
    params = {"q.weight": w.copy()}
    state = LarsState(lr=0.3, momentum=0.9, weight_decay=1e-6, trust=1e-3)
    ref_w, ref_buf = [1.5, -0.5], [0.0, 0.0]
    for _ in range(3):
        lars_step(params, {"q.weight": a * params["q.weight"]}, state)
        g = [a * v for v in ref_w]
        wn = math.sqrt(sum(v * v for v in ref_w))
        gn = math.sqrt(sum(v * v for v in g))
        local = 1e-3 * wn / (gn + 1e-6 * wn)
        ref_buf = [0.9 * b + local * 0.3 * (gi + 1e-6 * wi) for b, gi, wi in zip(ref_buf, g, ref_w)]
        ref_w = [wi - b for wi, b in zip(ref_w, ref_buf)]
        assert np.max(np.abs(params["q.weight"] - np.array(ref_w))) < 1e-12


def test_lars_trivial_cases():
    p = {"w.weight": np.array([2.0, 1.0])}
    lars_step(p, {"w.weight": np.zeros(2)}, LarsState())
    np.testing.assert_array_equal(p["w.weight"], [2.0, 1.0])
    p = {"w.weight": np.array([1.0])}
    lars_step(p, {"w.weight": np.array([1.0])}, LarsState(lr=0.3, momentum=0.0, weight_decay=0.0, trust=1e-3))
    assert abs((1.0 - p["w.weight"][0]) - 1e-3 * 0.3) < 1e-15
    rng = np.random.default_rng(0)
    w, g = rng.normal(size=5), rng.normal(size=5)
    p = {"w.weight": w.copy()}
    lars_step(p, {"w.weight": g}, LarsState(lr=0.1, momentum=0.0, weight_decay=0.0, adapt=False))
    np.testing.assert_array_equal(p["w.weight"], w - 0.1 * g)


def test_nt_xent_hand_computed_orthogonal_pairs():
    z = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    t = 0.2
    # each anchor: positive sim 1/T, two orthogonal candidates at 0
    expected = -math.log(math.exp(1 / t) / (math.exp(1 / t) + 2.0))
    assert abs(nt_xent_loss(Tensor(z), t).item() - expected) < 1e-12


def test_nt_xent_row_scale_invariance():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(8, 3))
    base = nt_xent_loss(Tensor(z), 0.2).item()
    for i in range(8):
        y = z.copy()
        y[i] *= rng.uniform(0.1, 10.0)
        assert abs(nt_xent_loss(Tensor(y), 0.2).item() - base) < 1e-9


def test_vicreg_zero_and_constant_cases():
    z = np.array([[2.0, 0.0], [-2.0, 0.0], [0.0, 2.0], [0.0, -2.0]])  # std > 1, zero covariance
    assert abs(vicreg_loss(Tensor(z), Tensor(z)).item()) < 1e-12
    c = np.ones((5, 3))
    _, terms = vicreg_loss(Tensor(c), Tensor(c), return_terms=True)
    assert terms["invariance"] == 0.0 and terms["covariance"] == 0.0
    assert abs(terms["variance"] - 2 * (1 - math.sqrt(1e-4))) < 1e-12  # 1 - std per branch, std = sqrt(eps)


def test_pretrain_zero_iterations_is_identity(small_bundle):
    model = build_cim(CimConfig.cim_s(8, input_size=12)).astype(np.float64)
    out, hist = pretrain(small_bundle, model, SslRunConfig(iterations=0))
    assert hist == [] and out.digest() == model.digest()
