import numpy as np
import pytest

from msdyn.autodiff import Tape, finite_difference
from msdyn.models import (LinearModel, MlpDeltaModel, Normalizer, SigmoidModel, init_model, load_model,
                          save_model)
from msdyn.systems import CartpoleSwingup, generate_dataset

from conftest import rel_err


def test_linear_forward():
    assert LinearModel(0.5).predict(np.array([2.0])) == pytest.approx([1.0])


def test_sigmoid_forward():
    m = SigmoidModel(2.0, 0.5)
    s = np.array([0.0, 1.0])
    assert m.predict(s) == pytest.approx(2.0 / (1.0 + np.exp(-0.5 * s)))


@pytest.mark.parametrize("dist,bound", [("default", 1.0), ("uniform", 1.0), ("xavier-uniform", np.sqrt(3.0))])
def test_sigmoid_init_bounds(dist, bound):
    m = SigmoidModel.init(3, dist, shape=(500,))
    for v in m.params.values():
        assert np.all(np.abs(v) <= bound)
        assert np.abs(v).max() > 0.8 * bound


def test_unknown_init():
    with pytest.raises(ValueError):
        init_model("linear", 0, "gaussian")
    with pytest.raises(ValueError):
        init_model("transformer")


def test_mlp_zero_head_is_identity():
    m = MlpDeltaModel(4, 1, hidden=8, seed=1).zero_output_layer()
    s = np.random.default_rng(0).normal(size=(5, 4))
    a = np.ones((5, 1))
    assert np.array_equal(m.predict(s, a), s)


def test_mlp_delta_bounded():
    m = MlpDeltaModel(2, 0, hidden=8, seed=1, out_range=3.0)
    m.params["Wmu"] *= 1e3
    s = np.random.default_rng(0).normal(size=(50, 2)) * 100
    assert np.all(np.abs(m.predict(s) - s) <= 3.0 + 1e-12)


def test_mlp_gaussian_sigma_bounds():
    m = MlpDeltaModel(2, 0, hidden=8, gaussian=True, seed=1, sigma_max=2.0)
    m.params["Wsd"] *= 1e3
    s = np.random.default_rng(0).normal(size=(200, 2))
    _, sig = m.predict(s)
    assert np.all(sig > 0) and np.all(sig >= 1e-4 * (1 - 1e-9)) and np.all(sig <= 2.0 * (1 + 1e-9))


def test_mlp_shape_checks():
    m = MlpDeltaModel(4, 1, hidden=8)
    with pytest.raises(ValueError):
        m.predict(np.zeros((2, 3)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        m.predict(np.zeros((2, 4)))


def test_mlp_gradient_matches_finite_difference():
    m = MlpDeltaModel(3, 1, hidden=5, gaussian=True, dropout=0.0, seed=2)
    rng = np.random.default_rng(0)
    s, a, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 1)), rng.normal(size=(4, 3))

    def loss_value(params):
        from msdyn.autodiff import Tensor
        mu, sig = m.forward({k: Tensor(v) for k, v in params.items()}, Tensor(s), Tensor(a))
        return float(np.sum((mu.value - y) ** 2 + sig.value))

    tape = Tape()
    p = m.bind(tape)
    mu, sig = m.forward(p, s, a)
    from msdyn import autodiff as ad
    loss = ad.tsum(ad.square(mu - y) + sig)
    grads = tape.backward(loss)
    for name in m.params:
        def f(x, name=name):
            q = dict(m.params)
            q[name] = x
            return loss_value(q)
        assert rel_err(grads[name], finite_difference(f, m.params[name])) < 1e-5, name


def test_normalizer_fit():
    rng = np.random.default_rng(0)
    s = rng.normal(3, 2, (1000, 2))
    s[:, 1] = 5.0
    nz = Normalizer.fit(s, np.zeros((1000, 0)), s + 0.1)
    assert nz.s_std[1] == 1.0
    z = nz.normalize_states(s)
    assert abs(z[:, 0].mean()) < 1e-12 and abs(z[:, 0].std() - 1) < 1e-12
    assert nz.delta_std == pytest.approx([0.1, 0.1])
    assert np.allclose(nz.denormalize_states(z), s)
    with pytest.raises(ValueError):
        Normalizer.fit(np.zeros((0, 2)), np.zeros((0, 0)), np.zeros((0, 2)))


@pytest.mark.parametrize("make", [
    lambda: LinearModel(0.3),
    lambda: SigmoidModel.init(4, "xavier-uniform"),
    lambda: MlpDeltaModel(4, 1, hidden=6, gaussian=True, seed=3,
                          normalizer=Normalizer(np.ones(4), 2 * np.ones(4), np.zeros(1), np.ones(1), np.ones(4))),
])
def test_checkpoint_round_trip(tmp_path, make):
    m = make()
    save_model(m, tmp_path / "m.ckpt")
    m2 = load_model(tmp_path / "m.ckpt")
    assert type(m2) is type(m)
    for k in m.params:
        assert np.array_equal(m.params[k], m2.params[k])
    s = np.ones((2, 4)) if isinstance(m, MlpDeltaModel) else np.ones(2)
    a = np.ones((2, 1)) if isinstance(m, MlpDeltaModel) else None
    assert np.array_equal(np.asarray(m.predict(s, a)), np.asarray(m2.predict(s, a)))


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not a model")
    with pytest.raises(ValueError):
        load_model(p)
    save_model(LinearModel(1.0), p)
    p.write_bytes(p.read_bytes() + b"\0")
    with pytest.raises(ValueError):
        load_model(p)


def test_cartpole_width():
    ds = generate_dataset(CartpoleSwingup(), episodes=1, horizon=3, seed=0)
    m = init_model("mlp", 0, d_s=ds.state_dim, d_a=ds.action_dim)
    assert m.params["W1s"].shape == (5, 64) and m.params["W1a"].shape == (1, 64)
