import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from adadiff.core import LabeledDataset, PointCloud, make_dataset, make_rng, sample_primitive
from adadiff.denoiser import AnalyticGaussianDenoiser, DenoiserHyper, PointMlpDenoiser, train_denoiser
from adadiff.diffusion import make_schedule
from adadiff.errors import ContractError, FormatError, InvalidArgumentError, TrainingFailure

SCHED = make_schedule()


def fd_check(model, x, t, eps, n_params=20, h=1e-6, seed=0):
    """Largest relative error of analytic vs central-difference gradients over sampled parameters."""
    _, grads = model.loss_and_grads(x, t, eps)
    rng = make_rng(seed)
    names = sorted(model.params)
    worst = 0.0
    for _ in range(n_params):
        name = names[rng.integers(len(names))]
        p = model.params[name]
        idx = tuple(rng.integers(s) for s in p.shape)
        old = p[idx]
        p[idx] = old + h
        up = model.loss(x, t, eps)
        p[idx] = old - h
        down = model.loss(x, t, eps)
        p[idx] = old
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(fd - grads[name][idx]) / max(abs(fd), abs(grads[name][idx]), 1e-7))
    return worst


def test_analytic_standard_gaussian():
    den = AnalyticGaussianDenoiser(np.zeros(3), 1.0, SCHED)
    x = make_rng(0).normal(size=(8, 3))
    for t in (1, 20, 200):
        np.testing.assert_allclose(den.predict(x, t), np.sqrt(1 - SCHED.alpha_bar[t]) * x, rtol=1e-14)


def test_analytic_matches_quadrature_posterior():
    # E[eps | x_t] by integrating over x0 in one coordinate
    mu, var, t, xt = 0.2, 0.3, 15, 0.7
    ab = SCHED.alpha_bar[t]

    def weight(x0):
        prior = np.exp(-(x0 - mu) ** 2 / (2 * var))
        lik = np.exp(-(xt - np.sqrt(ab) * x0) ** 2 / (2 * (1 - ab)))
        return prior * lik

    z = integrate.quad(weight, -10, 10)[0]
    mean_x0 = integrate.quad(lambda u: u * weight(u), -10, 10)[0] / z
    expected = (xt - np.sqrt(ab) * mean_x0) / np.sqrt(1 - ab)
    got = AnalyticGaussianDenoiser([mu, mu, mu], var, SCHED).predict(np.full((1, 3), xt), t)
    np.testing.assert_allclose(got, expected, rtol=1e-7)


def test_analytic_contract():
    den = AnalyticGaussianDenoiser(np.zeros(3), 1.0, SCHED)
    with pytest.raises(ContractError):
        den.predict(np.zeros((4, 2)), 1)
    with pytest.raises(ContractError):
        den.predict(np.zeros((4, 3)), 0)


@pytest.mark.parametrize("layers", [(1, 1), (2, 2), (2, 3), (3, 1)])
def test_gradients_match_finite_differences(layers):
    rng = make_rng(1)
    model = PointMlpDenoiser.initialize(16, 8, SCHED.T, rng, *layers)
    for k in model.params:
        model.params[k] = model.params[k] + 0.1 * rng.standard_normal(model.params[k].shape)
    x = rng.standard_normal((3, 12, 3))
    assert fd_check(model, x, np.array([2, 40, 750]), rng.standard_normal(x.shape)) < 1e-4


@given(st.integers(0, 2**32 - 1), st.integers(1, 200))
@settings(max_examples=25, deadline=None)
def test_permutation_equivariance(seed, t):
    model = PointMlpDenoiser.initialize(16, 8, SCHED.T, make_rng(seed))
    x = make_rng(seed, 1).normal(size=(20, 3))
    perm = make_rng(seed, 2).permutation(20)
    np.testing.assert_allclose(model.predict(x[perm], t), model.predict(x, t)[perm], atol=1e-12)


def test_predict_shapes_and_contract():
    model = PointMlpDenoiser.initialize(8, 4, SCHED.T, make_rng(0))
    assert model.predict(np.zeros((5, 3)), 3).shape == (5, 3)
    assert model.predict(np.zeros((2, 5, 3)), np.array([1, 9])).shape == (2, 5, 3)
    with pytest.raises(ContractError):
        model.predict(np.zeros((5, 4)), 3)
    with pytest.raises(ContractError):
        model.predict(np.zeros((5, 3)), SCHED.T + 1)


def test_zero_epochs_returns_initialization():
    train, _ = make_dataset(6, 3, 32, seed=0)
    hyper = DenoiserHyper(epochs=0, H=8, E=4)
    model, log = train_denoiser(train, SCHED, hyper, make_rng(3))
    ref = PointMlpDenoiser.initialize(8, 4, SCHED.T, make_rng(3), hyper.enc_layers, hyper.dec_layers)
    for k in ref.params:
        np.testing.assert_array_equal(model.params[k], ref.params[k])
    assert len(log.val_loss) == 1 and log.train_loss == []


def test_identical_clouds_loss_halves():
    c = sample_primitive("cube", 32, make_rng(0))
    data = LabeledDataset(tuple(PointCloud(c.points, 1) for _ in range(32)), ("sphere", "cube", "torus"))
    hyper = DenoiserHyper(epochs=40, batch=8, H=32, E=16, lr=0.003, t_max=0)
    _, log = train_denoiser(data, SCHED, hyper, make_rng(1))
    assert log.val_loss[-1] <= 0.5 * log.val_loss[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch():
    train, _ = make_dataset(6, 3, 16, seed=0)
    hyper = DenoiserHyper(epochs=3, H=8, E=4, optimizer="sgd", lr=1e200, clip=1e300)
    with pytest.raises(TrainingFailure, match="epoch 1") as info:
        train_denoiser(train, SCHED, hyper, make_rng(0))
    assert info.value.epoch == 1


def test_bad_training_arguments():
    train, _ = make_dataset(3, 3, 16, seed=0)
    with pytest.raises(InvalidArgumentError):
        train_denoiser(train, SCHED, DenoiserHyper(epochs=1, t_max=SCHED.T + 1), make_rng(0))
    with pytest.raises(InvalidArgumentError):
        train_denoiser(train, SCHED, DenoiserHyper(epochs=1, optimizer="lbfgs"), make_rng(0))


def test_checkpoint_roundtrip(tmp_path):
    train, _ = make_dataset(6, 3, 16, seed=0)
    hyper = DenoiserHyper(epochs=1, H=8, E=4, enc_layers=1, dec_layers=3)
    model, _ = train_denoiser(train, SCHED, hyper, make_rng(0))
    model.save(tmp_path / "d.ckpt")
    back = PointMlpDenoiser.load(tmp_path / "d.ckpt")
    x = make_rng(1).normal(size=(2, 16, 3))
    assert back.predict(x, np.array([3, 7])).tobytes() == model.predict(x, np.array([3, 7])).tobytes()
    assert (back.enc_layers, back.dec_layers) == (1, 3)
    raw = (tmp_path / "d.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"ACLS" + raw[4:])
    with pytest.raises(FormatError):
        PointMlpDenoiser.load(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        PointMlpDenoiser.load(tmp_path / "short.ckpt")
