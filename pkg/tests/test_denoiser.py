import numpy as np
import pytest

from conftest import central_difference, relative_gradient_match
from ttga import (
    AnalyticGaussianDenoiser,
    ConditionEmbedding,
    ConvDenoiser,
    DenoiserTrainConfig,
    SeededRng,
    build_schedule,
    load_checkpoint,
    save_checkpoint,
    train_toy_denoiser,
)
from ttga.denoiser import Denoiser, denoising_mse
from ttga.errors import CapabilityError, ConfigError, ContractError


@pytest.fixture(scope="module")
def schedule():
    return build_schedule()


def make_analytic(schedule, mu=0.0, dim=6, shape=(8, 8), seed=3):
    return AnalyticGaussianDenoiser(schedule, shape, dim, mu=mu, rng=SeededRng(seed))


def test_analytic_zero_mean_formula(schedule, rng):
    m = make_analytic(schedule, mu=0.0)
    x = rng.normal((8, 8))
    for t in (1, 250, 999):
        expected = np.sqrt(1.0 - schedule.alpha_bars[t]) * x
        got = m.predict(x, t, m.null_embedding())
        assert np.allclose(got, expected, rtol=1e-13)


def test_analytic_shifted_mean_formula(schedule, rng):
    mu = rng.normal((8, 8))
    m = AnalyticGaussianDenoiser(schedule, (8, 8), 4, mu=mu, rng=SeededRng(5))
    x = rng.normal((8, 8))
    t = 400
    abar = schedule.alpha_bars[t]
    expected = np.sqrt(1.0 - abar) * (x - np.sqrt(abar) * mu)
    assert np.allclose(m.predict(x, t, m.null_embedding()), expected, rtol=1e-13)


def test_analytic_matches_numerical_score(schedule, rng):
    """eps = -sqrt(1-abar) * d/dx log N(x; sqrt(abar)*mu, I), checked by
    central differences of the log-density."""
    mu = rng.normal((3, 3))
    m = AnalyticGaussianDenoiser(schedule, (3, 3), 2, mu=mu, rng=SeededRng(8))
    t = 300
    abar = schedule.alpha_bars[t]
    x = rng.normal((3, 3))

    def log_density(flat):
        return -0.5 * float(np.sum((flat.reshape(3, 3) - np.sqrt(abar) * mu) ** 2))

    score = central_difference(log_density, x.ravel(), h=1e-5).reshape(3, 3)
    expected = -np.sqrt(1.0 - abar) * score
    got = m.predict(x, t, m.null_embedding())
    assert relative_gradient_match(got, expected, rtol=1e-7)


def test_analytic_conditioning_is_linear_projection(schedule, rng):
    m = make_analytic(schedule)
    x = rng.normal((8, 8))
    e = ConditionEmbedding(rng.normal(6))
    base = m.predict(x, 100, m.null_embedding())
    got = m.predict(x, 100, e)
    assert np.allclose(got - base, (m.projection @ e.values).reshape(8, 8), rtol=1e-12)


def test_analytic_embedding_gradient_exact(schedule, rng):
    m = make_analytic(schedule)
    x = rng.normal((8, 8))
    e = ConditionEmbedding(rng.normal(6))
    loss_grad = rng.normal((8, 8))
    got = m.grad_wrt_embedding(loss_grad, x, 50, e)
    assert np.array_equal(got, m.projection.T @ loss_grad.ravel())
    assert np.array_equal(
        m.grad_wrt_embedding(np.zeros((8, 8)), x, 50, e), np.zeros(6)
    )


def test_predict_rejects_dim_mismatch(schedule, rng):
    m = make_analytic(schedule)
    with pytest.raises(ContractError, match="embedding dim"):
        m.predict(rng.normal((8, 8)), 10, ConditionEmbedding(np.zeros(5)))


def test_predict_rejects_bad_step(schedule, rng):
    m = make_analytic(schedule)
    with pytest.raises(IndexError):
        m.predict(rng.normal((8, 8)), 1001, m.null_embedding())


def test_base_class_capability_error(schedule):
    class Opaque(Denoiser):
        kind = "opaque"
        embedding_dim = 2

        def __init__(self):
            self.schedule = schedule

        def predict(self, x, t, e):
            return x

    with pytest.raises(CapabilityError):
        Opaque().grad_wrt_embedding(np.zeros((2, 2)), np.zeros((2, 2)), 1,
                                    ConditionEmbedding(np.zeros(2)))


@pytest.fixture(scope="module")
def conv_model(schedule):
    return ConvDenoiser(schedule, channels=1, embedding_dim=4, hidden=6, rng=SeededRng(21))


def test_conv_predict_is_pure_and_shape_preserving(conv_model, rng):
    x = rng.normal((9, 7))
    e = ConditionEmbedding(rng.normal(4))
    a = conv_model.predict(x, 123, e)
    b = conv_model.predict(x, 123, e)
    assert a.shape == x.shape
    assert np.array_equal(a, b)


def test_conv_embedding_gradient_matches_fd(conv_model, rng):
    x = rng.normal((6, 6))
    e0 = rng.normal(4)
    loss_grad = rng.normal((6, 6))
    t = 77

    def f(vec):
        pred = conv_model.predict(x, t, ConditionEmbedding(vec))
        return float(np.sum(pred * loss_grad))

    numeric = central_difference(f, e0)
    analytic = conv_model.grad_wrt_embedding(loss_grad, x, t, ConditionEmbedding(e0))
    assert relative_gradient_match(analytic, numeric)


def test_conv_input_gradient_matches_fd(conv_model, rng):
    x = rng.normal((5, 5))
    e = ConditionEmbedding(rng.normal(4))
    loss_grad = rng.normal((5, 5))

    def f(flat):
        return float(np.sum(conv_model.predict(flat.reshape(5, 5), 10, e) * loss_grad))

    numeric = central_difference(f, x.ravel()).reshape(5, 5)
    analytic = conv_model.grad_wrt_input(loss_grad, x, 10, e)
    assert relative_gradient_match(analytic, numeric)


def _disk_dataset(n, rng, size=12, dim=4):
    out = []
    for _ in range(n):
        yy, xx = np.mgrid[0:size, 0:size]
        cy, cx = rng.uniform(4, size - 4, (2,))
        r = float(rng.uniform(2.0, 4.0))
        img = 0.2 + 0.6 * (((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r)
        e = np.zeros(dim)
        e[:3] = [cy / size, cx / size, r / size]
        out.append((img.astype(np.float64), ConditionEmbedding(e)))
    return out


def test_training_halves_denoising_mse(schedule):
    rng = SeededRng(99)
    dataset = _disk_dataset(120, rng)
    config = DenoiserTrainConfig(epochs=4, batch_size=16, drop_p=0.1, lr=3e-3)
    model = ConvDenoiser(schedule, channels=1, embedding_dim=4, hidden=8,
                         rng=rng.derive(1))
    model, stats = train_toy_denoiser(dataset, schedule, rng.derive(2), config, model=model)
    assert stats.final_mse <= 0.5 * stats.initial_mse
    held_out = _disk_dataset(30, SeededRng(123))
    untrained = ConvDenoiser(schedule, channels=1, embedding_dim=4, hidden=8,
                             rng=SeededRng(99).derive(1))
    mse_trained = denoising_mse(model, held_out, SeededRng(7))
    mse_untrained = denoising_mse(untrained, held_out, SeededRng(7))
    assert mse_trained < mse_untrained


def test_drop_p_zero_never_substitutes_null(schedule):
    rng = SeededRng(5)
    dataset = _disk_dataset(20, rng)
    config = DenoiserTrainConfig(epochs=1, batch_size=8, drop_p=0.0, lr=1e-3)
    _, stats = train_toy_denoiser(dataset, schedule, rng.derive(3), config)
    assert stats.null_substitutions == 0
    assert stats.examples_seen == 20


def test_drop_p_one_conditional_equals_unconditional(schedule):
    rng = SeededRng(6)
    dataset = _disk_dataset(20, rng)
    config = DenoiserTrainConfig(epochs=2, batch_size=8, drop_p=1.0, lr=3e-3)
    model, stats = train_toy_denoiser(dataset, schedule, rng.derive(3), config)
    assert stats.null_substitutions == stats.examples_seen
    x = SeededRng(8).normal((12, 12))
    e = ConditionEmbedding(SeededRng(9).normal(4))
    cond = model.predict(x, 40, e)
    uncond = model.predict(x, 40, model.null_embedding())
    assert np.array_equal(cond, uncond)


def test_empty_dataset_rejected(schedule, rng):
    with pytest.raises(ConfigError, match="dataset"):
        train_toy_denoiser([], schedule, rng)


def test_checkpoint_round_trip_analytic(tmp_path, schedule, rng):
    mu = rng.normal((6, 6))
    m = AnalyticGaussianDenoiser(schedule, (6, 6), 5, mu=mu, rng=SeededRng(17))
    path = tmp_path / "analytic.ckpt"
    save_checkpoint(path, m)
    loaded = load_checkpoint(path, schedule)
    x = rng.normal((6, 6))
    e = ConditionEmbedding(rng.normal(5))
    assert np.array_equal(loaded.predict(x, 300, e), m.predict(x, 300, e))


def test_checkpoint_round_trip_conv(tmp_path, schedule, conv_model, rng):
    path = tmp_path / "conv.ckpt"
    save_checkpoint(path, conv_model)
    loaded = load_checkpoint(path, schedule)
    x = rng.normal((6, 6))
    e = ConditionEmbedding(rng.normal(4))
    assert np.array_equal(loaded.predict(x, 55, e), conv_model.predict(x, 55, e))


def test_checkpoint_magic(tmp_path, schedule, conv_model):
    path = tmp_path / "conv.ckpt"
    save_checkpoint(path, conv_model)
    assert path.read_bytes()[:4] == b"TTGM"
