import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopsteady.deepdmd import (
    FeedforwardNet,
    KoopmanModel,
    TrainConfig,
    TrainingError,
    _forward_cached,
    forward,
    gradients,
    init_model,
    loss,
    loss_terms,
    multi_step_predict,
    prediction_error,
    train,
    write_loss_curve,
)
from koopsteady.dmdc import fit_dmdc, predict_linear
from koopsteady.observables import MonomialDictionary
from koopsteady.systems import SnapshotSet


def _net(widths, seed=0):
    rng = np.random.default_rng(seed)
    return FeedforwardNet.init(widths, rng, np.zeros(widths[0]), np.ones(widths[0]))


def _random_snap(n, m, cols, seed=0):
    rng = np.random.default_rng(seed)
    return SnapshotSet(rng.normal(size=(n, cols)), rng.normal(size=(n, cols)), rng.normal(size=(m, cols)))


def _linear_snap(A, B, cols, seed=0):
    rng = np.random.default_rng(seed)
    Xp = rng.normal(size=(A.shape[0], cols))
    Up = rng.normal(size=(B.shape[1], cols))
    return SnapshotSet(Xp, A @ Xp + B @ Up, Up)


# ------------------------------------------------------------------ forward


def test_forward_zero_network():
    net = _net([3, 4, 2])
    net.weights = [np.zeros_like(W) for W in net.weights]
    net.biases = [np.zeros_like(b) for b in net.biases]
    np.testing.assert_array_equal(forward(net, [1.0, -2.0, 3.0]), np.zeros(2))


def test_forward_relu_identity_layer():
    net = FeedforwardNet([np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)], np.zeros(2), np.ones(2))
    np.testing.assert_array_equal(forward(net, [1.0, -1.0]), [1.0, 0.0])


def test_forward_deterministic_and_batched():
    net = _net([3, 8, 8, 4], seed=3)
    v = np.random.default_rng(1).normal(size=(3, 6))
    out = forward(net, v)
    np.testing.assert_array_equal(out, forward(net, v))
    for j in range(6):
        np.testing.assert_allclose(out[:, j], forward(net, v[:, j]), rtol=1e-15, atol=1e-15)
    with pytest.raises(ValueError):
        forward(net, np.ones(2))


def test_network_dict_roundtrip():
    net = _net([2, 5, 3], seed=4)
    back = FeedforwardNet.from_dict(json.loads(json.dumps(net.to_dict())))
    v = np.array([0.3, -0.7])
    np.testing.assert_array_equal(forward(back, v), forward(net, v))


# --------------------------------------------------------------------- model


def _small_model(mixed="none", n=2, m=1, width=16, seed=0, lam1=0.0, lam2=0.0):
    rng = np.random.default_rng(seed)
    nL, mL = n + 3, m + 2
    obs_x = FeedforwardNet.init([n, width, width, nL - n], rng, np.zeros(n), np.ones(n))
    obs_u = FeedforwardNet.init([m, width, width, mL - m], rng, np.zeros(m), np.ones(m))
    obs_xu = None
    ML = 0
    if mixed == "dictionary":
        ML = nL * mL
    elif mixed == "learned":
        obs_xu = FeedforwardNet.init([n + m, width, width, 4], rng, np.zeros(n + m), np.ones(n + m))
        ML = 4
    for net in (obs_x, obs_u, obs_xu):
        if net is not None:
            net.biases = [0.1 * rng.normal(size=b.shape) for b in net.biases]
    return KoopmanModel(
        n, m, obs_x, obs_u,
        K_x=0.3 * rng.normal(size=(nL, nL)),
        K_u=0.3 * rng.normal(size=(nL, mL)),
        mixed=mixed,
        K_xu=None if mixed == "none" else 0.1 * rng.normal(size=(nL, ML)),
        obs_xu=obs_xu,
        metadata={"lam1": lam1, "lam2": lam2},
    )


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["none", "dictionary", "learned"]), st.integers(0, 2**31))
def test_inclusiveness(mixed, seed):
    model = _small_model(mixed, seed=seed % 1000)
    rng = np.random.default_rng(seed)
    x, u = rng.normal(size=2), rng.normal(size=1)
    np.testing.assert_array_equal(model.psi_x(x)[:2], x)
    np.testing.assert_array_equal(model.psi_u(u)[:1], u)


def test_mixed_configuration_checks():
    m = _small_model()
    with pytest.raises(ValueError):
        KoopmanModel(2, 1, m.obs_x, m.obs_u, m.K_x, m.K_u, mixed="none", K_xu=np.ones((5, 3)))
    with pytest.raises(ValueError):
        KoopmanModel(2, 1, m.obs_x, m.obs_u, m.K_x, m.K_u, mixed="dictionary")
    with pytest.raises(ValueError):
        KoopmanModel(2, 1, m.obs_x, m.obs_u, m.K_x[:2], m.K_u)


def test_unit_eigenvalue_flag():
    model = KoopmanModel(2, 1, None, None, np.diag([1.0, 0.5]), np.ones((2, 1)))
    assert model.has_unit_eigenvalue()
    model = KoopmanModel(2, 1, None, None, np.diag([0.9, 0.5]), np.ones((2, 1)))
    assert not model.has_unit_eigenvalue()


# ---------------------------------------------------------------------- loss


def test_loss_zero_for_exact_linear_model():
    A = np.array([[0.9, 0.1], [0.0, 0.7]])
    B = np.array([[1.0], [0.5]])
    snap = _linear_snap(A, B, 30)
    model = KoopmanModel.from_linear(fit_dmdc(snap))
    assert loss(model, snap, 0.0, 0.0) < 1e-12


def test_loss_on_empty_data_is_regularization_only():
    model = _small_model(lam1=0.5, lam2=0.1)
    empty = SnapshotSet(np.zeros((2, 0)), np.zeros((2, 0)), np.zeros((1, 0)))
    t = loss_terms(model, empty)
    assert t["residual"] == 0.0
    assert loss(model, empty) == pytest.approx(0.5 * t["spectral"] + 0.1 * t["l1"])


def test_l1_penalty_is_linear_in_lambda():
    model = _small_model()
    snap = _random_snap(2, 1, 10)
    base = loss(model, snap, 0.0, 0.0)
    one = loss(model, snap, 0.0, 0.01) - base
    two = loss(model, snap, 0.0, 0.02) - base
    assert two == pytest.approx(2 * one, rel=1e-10)


def test_loss_nonnegative():
    for mixed in ("none", "dictionary", "learned"):
        assert loss(_small_model(mixed, lam1=0.1, lam2=0.1), _random_snap(2, 1, 5)) >= 0.0


# ----------------------------------------------------------------- gradients


def _activation_patterns(model, snap):
    pats = []
    for lifter, V in ((model.obs_x, snap.Xp), (model.obs_x, snap.Xf), (model.obs_u, snap.Up),
                      (model.obs_xu, np.vstack([snap.Xp, snap.Up]))):
        if isinstance(lifter, FeedforwardNet):
            acts = _forward_cached(lifter, V)[1]
            pats.extend(a > 0 for a in acts[1:-1])
    return pats


def _perturbed(model, key, idx, delta):
    p = model.params()
    p[key][idx] += delta
    return model.with_params(p)


@pytest.mark.parametrize("mixed", ["none", "dictionary", "learned"])
def test_gradients_match_central_differences(mixed):
    lam1, lam2 = 0.3, 0.01
    model = _small_model(mixed, width=16, seed=11, lam1=lam1, lam2=lam2)
    snap = _random_snap(2, 1, 40, seed=12)
    _, grads = gradients(model, snap)
    base_pattern = _activation_patterns(model, snap)
    keys = sorted(grads)
    rng = np.random.default_rng(13)
    h = 1e-5
    checked = 0
    worst = 0.0
    for _ in range(100):
        key = keys[rng.integers(len(keys))]
        idx = tuple(rng.integers(s) for s in grads[key].shape)
        plus, minus = _perturbed(model, key, idx, h), _perturbed(model, key, idx, -h)
        # skip probes whose perturbation crosses a kink of ReLU or |w|
        if "." in key and abs(model.params()[key][idx]) < 1e-6:
            continue
        pats = [_activation_patterns(mm, snap) for mm in (plus, minus)]
        if any(not np.array_equal(a, b) for p in pats for a, b in zip(p, base_pattern)):
            continue
        fd = (loss(plus, snap) - loss(minus, snap)) / (2 * h)
        g = grads[key][idx]
        rel = abs(fd - g) / max(abs(fd), abs(g), 1e-6)
        worst = max(worst, rel)
        checked += 1
    assert checked >= 80
    assert worst < 1e-4, worst


def test_zero_residual_zero_gradient():
    A = np.array([[0.5]])
    B = np.array([[1.0]])
    snap = _linear_snap(A, B, 10)
    model = KoopmanModel(1, 1, None, None, A, B)
    _, grads = gradients(model, snap, 0.0, 0.0)
    for g in grads.values():
        assert not np.any(g)


def test_relu_kink_uses_zero_subgradient():
    # hidden pre-activation exactly 0 for the only sample: no gradient to W0
    net = FeedforwardNet([np.array([[1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)], np.zeros(1), np.ones(1))
    model = KoopmanModel(1, 1, net, None, np.eye(2) * 0.5, np.ones((2, 1)))
    snap = SnapshotSet(np.zeros((1, 1)), np.ones((1, 1)), np.ones((1, 1)))
    _, grads = gradients(model, snap, 0.0, 0.0)
    assert grads["x.W0"][0, 0] == 0.0


def test_gradients_reject_empty_batch():
    with pytest.raises(ValueError):
        gradients(_small_model(), SnapshotSet(np.zeros((2, 0)), np.zeros((2, 0)), np.zeros((1, 0))))


# ------------------------------------------------------------------ training


def test_training_reduces_to_dmdc():
    A = np.array([[0.8]])
    B = np.array([[0.5]])
    rng = np.random.default_rng(0)
    Xp = rng.normal(size=(1, 200))
    Up = rng.normal(size=(1, 200))
    snap = SnapshotSet(Xp, A @ Xp + B @ Up + 0.01 * rng.normal(size=(1, 200)), Up)
    ref = fit_dmdc(snap)
    cfg = TrainConfig(n_lifted=1, m_lifted=1, epochs=1500, lr=1e-2, lr_min=1e-4,
                      batch_size=200, init_operators="zero", seed=1)
    model = train(cfg, snap)
    err = np.linalg.norm(model.K_x - ref.A) + np.linalg.norm(model.K_u - ref.B)
    assert err < 1e-3


def test_training_is_seed_deterministic():
    snap = _random_snap(2, 1, 64, seed=2)
    cfg = TrainConfig(hidden=(8,), n_lifted=4, m_lifted=2, epochs=5, batch_size=16, seed=3)
    a, b = train(cfg, snap, snap), train(cfg, snap, snap)
    assert a.metadata["loss_curve"] == b.metadata["loss_curve"]
    np.testing.assert_array_equal(a.K_x, b.K_x)


def test_training_best_val_not_worse_than_init():
    A = np.array([[0.9, 0.0], [0.2, 0.7]])
    B = np.array([[1.0], [0.0]])
    snap = _linear_snap(A, B, 128, seed=4)
    val = _linear_snap(A, B, 32, seed=5)
    cfg = TrainConfig(hidden=(8,), n_lifted=4, m_lifted=2, epochs=20, batch_size=32, seed=0)
    model = train(cfg, snap, val)
    curve = model.metadata["loss_curve"]
    assert model.metadata["best_val_loss"] <= curve[0][2]
    assert len(curve) == 21


def test_training_divergence_aborts():
    snap = _random_snap(2, 1, 16)
    cfg = TrainConfig(hidden=(4,), n_lifted=3, m_lifted=1, epochs=2, divergence_limit=1e-12)
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        train(cfg, snap)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam1=-1.0).validate(2, 1)
    with pytest.raises(ValueError):
        TrainConfig(mixed_terms="bogus").validate(2, 1)
    with pytest.raises(ValueError):
        TrainConfig(n_lifted=1).validate(2, 1)


def test_loss_curve_csv(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_curve(path, [(0, 1.0, 2.0), (1, 0.5, 0.75)])
    assert path.read_text().splitlines() == ["epoch,train_loss,val_loss", "0,1.0,2.0", "1,0.5,0.75"]


# ---------------------------------------------------------------- prediction


def test_predict_horizon_zero():
    model = _small_model()
    np.testing.assert_array_equal(multi_step_predict(model, [1.0, 2.0], np.zeros((3, 1)), 0), [[1.0, 2.0]])
    with pytest.raises(ValueError):
        multi_step_predict(model, [1.0, 2.0], np.zeros((3, 1)), 4)


def test_identity_model_matches_predict_linear():
    A = np.array([[0.9, 0.1], [-0.1, 0.8]])
    B = np.array([[1.0], [0.3]])
    lin = fit_dmdc(_linear_snap(A, B, 20))
    model = KoopmanModel.from_linear(lin)
    u = np.random.default_rng(0).normal(size=(15, 1))
    np.testing.assert_array_equal(multi_step_predict(model, [1.0, -1.0], u, 15),
                                  predict_linear(lin, [1.0, -1.0], u).states)


def test_prediction_error_cases():
    truth = np.random.default_rng(0).normal(size=(10, 3))
    assert prediction_error(truth, truth) == 0.0
    assert prediction_error(1.05 * truth, truth) == pytest.approx(0.05)


@pytest.mark.parametrize("mixed", ["none", "dictionary", "learned"])
def test_json_roundtrip_bitwise_predictions(mixed):
    model = _small_model(mixed, seed=5)
    back = KoopmanModel.from_json(model.to_json())
    u = np.random.default_rng(1).normal(size=(20, 1))
    np.testing.assert_array_equal(multi_step_predict(back, [0.4, -0.2], u, 20),
                                  multi_step_predict(model, [0.4, -0.2], u, 20))
    assert json.loads(model.to_json())["kind"] == "deepdmd"


def test_monomial_lifters_roundtrip():
    dx, du = MonomialDictionary.build(2, 2), MonomialDictionary.build(1, 2)
    model = KoopmanModel(2, 1, dx, du, 0.1 * np.eye(5), np.ones((5, 2)), mixed="dictionary",
                         K_xu=np.zeros((5, 10)))
    back = KoopmanModel.from_json(model.to_json())
    assert back.obs_x == dx and back.mixed_dim == 10


def test_init_model_dimensions():
    snap = _random_snap(3, 2, 50)
    model = init_model(TrainConfig(hidden=(8,), mixed_terms="learned", n_mixed=6), snap)
    assert (model.n_lifted, model.m_lifted, model.mixed_dim) == (23, 7, 6)
