import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from qpflab import neural as nn
from qpflab.datagen import draw_and_label, generate_pool
from qpflab.gridmodel import builtin_grid
from qpflab.qsim import NoiseModel, parameter_shift_grad
from qpflab.surrogates import (
    DELTA_INTERVAL,
    V_INTERVAL,
    NNRegressor,
    QCNNRegressor,
    QcnnParams,
    QcnnSpec,
    QNNRegressor,
    QnnSpec,
    TrainingDiverged,
    _Intervals,
    _quantum_layer,
    encode_features,
    feature_map,
    ansatz,
    hybrid_backward,
    make_model,
    qcnn_forward,
    qnn_forward,
    train,
)


def toy_spec(hidden=3, qubits=2, n_in=2, n_out=2):
    return QcnnSpec(nn.MlpSpec((n_in, hidden, qubits)), QnnSpec(qubits), nn.MlpSpec((qubits, hidden, n_out)))


def toy_params(spec, seed=0):
    rng = np.random.default_rng(seed)
    enc = nn.init_params(spec.encoder, rng)
    dec = nn.init_params(spec.decoder, rng)
    return QcnnParams(enc, rng.uniform(-1, 1, spec.quantum.n_params), dec)


@pytest.fixture(scope="module")
def small_data():
    grid = builtin_grid("feeder4")
    pool = generate_pool(grid, 300, 0.3, seed=1)
    ds = draw_and_label(pool, 64, grid, seed=2)
    return ds


# -- feature map ----------------------------------------------------------------


def test_feature_map_angles():
    circ = encode_features([0.0, 1.0, 1e6])
    assert [g.kind for g in circ.gates] == ["h"] * 3 + ["rz"] * 3
    rz = [g.param for g in circ.gates[3:]]
    assert rz[0] == 0.0
    assert rz[1] == pytest.approx(np.pi / 4, abs=1e-15)
    assert abs(rz[2] - np.pi / 2) < 1e-5
    assert [g.qubits[0] for g in circ.gates[3:]] == [0, 1, 2]


@pytest.mark.parametrize("x", [[np.nan, 1.0], [np.inf], []])
def test_feature_map_rejects_bad_input(x):
    with pytest.raises(ValueError):
        encode_features(x)


def test_ansatz_layout_and_parameter_count():
    spec = QnnSpec(6)
    assert spec.n_params == 12
    circ = ansatz(6)
    kinds = [g.kind for g in circ.gates]
    assert kinds == ["ry"] * 6 + ["cnot"] * 5 + ["ry"] * 6
    assert [g.qubits for g in circ.gates[6:11]] == [(q, q + 1) for q in range(5)]
    assert len(spec.circuit.parameters) == 6 + 12


# -- QNN forward ------------------------------------------------------------------


def test_feature_map_alone_lands_on_interval_centres():
    x = np.random.default_rng(0).normal(size=(5, 6))
    out = qnn_forward(QnnSpec(6), np.zeros(12), x)
    assert np.allclose(out[:, :3], 1.0, atol=1e-12)
    assert np.allclose(out[:, 3:], 0.0, atol=1e-12)


def test_interval_endpoints():
    iv = _Intervals(1, V_INTERVAL, DELTA_INTERVAL)
    assert np.allclose(iv.from_qubits(np.array([[1.0, 1.0]])), [[1.15, 8.0]])
    assert np.allclose(iv.from_qubits(np.array([[-1.0, -1.0]])), [[0.85, -8.0]])


def test_qubit_pairing():
    # qubit 2i drives v_i and qubit 2i+1 drives delta_i
    iv = _Intervals(2, V_INTERVAL, DELTA_INTERVAL)
    z = np.array([[0.1, 0.2, 0.3, 0.4]])
    out = iv.from_qubits(z)
    assert np.allclose(out, [[1 + 0.015, 1 + 0.045, 1.6, 3.2]])


def test_exact_matches_many_shots():
    rng = np.random.default_rng(4)
    w = rng.uniform(-1, 1, 12)
    x = rng.normal(size=(1, 6))
    exact = qnn_forward(QnnSpec(6), w, x)
    z_exact = (exact[0, :3] - 1) / 0.15
    shot = qnn_forward(QnnSpec(6), w, x, shots=8192, rng=1)
    z_shot = (shot[0, :3] - 1) / 0.15
    assert np.max(np.abs(z_exact - z_shot)) < 0.05


def test_qnn_forward_errors():
    with pytest.raises(ValueError):
        qnn_forward(QnnSpec(2), np.zeros(4), np.zeros((1, 2)), shots=0)
    with pytest.raises(ValueError):
        qnn_forward(QnnSpec(2), np.zeros(4), np.zeros((1, 3)))


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.floats(1e-3, 1e6),
    st.sampled_from([None, 16]),
    st.sampled_from([None, NoiseModel(depolarizing=0.1), NoiseModel(measurement_flip=0.4, gate_imperfection=0.3)]),
)
def test_predictions_stay_inside_the_boxes(seed, scale, shots, noise):
    rng = np.random.default_rng(seed)
    x = scale * rng.standard_normal((4, 6))
    w = rng.uniform(-10, 10, 12)
    outs = [qnn_forward(QnnSpec(6), w, x, shots=shots, noise=noise, rng=1)]
    spec = QcnnSpec(nn.MlpSpec((6, 5, 4)), QnnSpec(4), nn.MlpSpec((4, 5, 6)))
    p = toy_params(spec, seed)
    p.decoder = [a * scale for a in p.decoder]
    outs.append(qcnn_forward(spec, p, x, shots=shots, noise=noise, rng=1))
    for out in outs:
        assert np.all((out[:, :3] >= 0.85) & (out[:, :3] <= 1.15))
        assert np.all((out[:, 3:] >= -8) & (out[:, 3:] <= 8))


# -- QCNN forward / backward ----------------------------------------------------------


def test_zero_decoder_outputs_its_bias():
    spec = toy_spec()
    p = toy_params(spec)
    p.decoder = [np.zeros_like(a) for a in p.decoder]
    p.decoder[-1] = np.array([0.3, -0.2])
    x = np.random.default_rng(1).normal(size=(6, 2))
    out = qcnn_forward(spec, p, x)
    expect = [1 + 0.15 * np.tanh(0.3), 8 * np.tanh(-0.2)]
    assert np.allclose(out, expect, atol=1e-12)


def test_qcnn_forward_is_bitwise_repeatable():
    spec = toy_spec()
    p = toy_params(spec, 3)
    x = np.random.default_rng(2).normal(size=(8, 2))
    assert qcnn_forward(spec, p, x).tobytes() == qcnn_forward(spec, p, x).tobytes()


def test_qcnn_dimension_mismatch():
    spec = toy_spec()
    with pytest.raises(ValueError):
        qcnn_forward(spec, toy_params(spec), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        QcnnSpec(nn.MlpSpec((2, 3)), QnnSpec(2), nn.MlpSpec((2, 2)))


def _hybrid_loss(spec, params, x, y):
    return nn.mse_loss(qcnn_forward(spec, params, x), y)


def test_hybrid_gradient_matches_finite_differences():
    spec = toy_spec()
    params = toy_params(spec, seed=7)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(5, 2))
    y = np.c_[rng.uniform(0.9, 1.1, 5), rng.uniform(-5, 5, 5)]
    _, grads, _ = hybrid_backward(spec, params, x, y)
    flat, gflat = params.flat(), grads.flat()
    h = 1e-6
    worst = 0.0
    for arr, g in zip(flat, gflat):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = _hybrid_loss(spec, QcnnParams.from_flat(spec, flat), x, y)
            arr[idx] = old - h
            down = _hybrid_loss(spec, QcnnParams.from_flat(spec, flat), x, y)
            arr[idx] = old
            worst = max(worst, abs((up - down) / (2 * h) - g[idx]))
    assert worst < 1e-4


def test_zero_output_error_gives_zero_gradients():
    spec = toy_spec()
    params = toy_params(spec, seed=2)
    x = np.random.default_rng(3).normal(size=(4, 2))
    y = qcnn_forward(spec, params, x)
    loss, grads, _ = hybrid_backward(spec, params, x, y)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.flat())


def test_quantum_layer_gradients_reduce_to_parameter_shift():
    spec = QnnSpec(3)
    rng = np.random.default_rng(5)
    w = rng.uniform(-1, 1, spec.n_params)
    angles = rng.uniform(-1.5, 1.5, (2, 3))
    q = _quantum_layer(spec, w, angles, grad_weights=True, grad_inputs=True)
    circ = spec.circuit
    for r in range(2):
        b = {f"x{i}": angles[r, i] for i in range(3)}
        b.update({f"w{k}": w[k] for k in range(spec.n_params)})
        for obs in range(3):
            g = parameter_shift_grad(circ, b, obs)  # order: x0..x2, w0..w5
            assert np.allclose(q.dz_dphi[r, obs], g[:3], atol=1e-12)
            assert np.allclose(q.dz_dw[r, obs], g[3:], atol=1e-12)


def test_qnn_training_gradient_is_loss_weighted_parameter_shift(small_data):
    x, y = small_data.subset("train")
    model = QNNRegressor(epochs=1, random_state=0).fit(x, y)
    w = model.params_[0]
    xb, yb = x[:4], y[:4]
    _, (g,) = model._loss_and_grads([w], xb, yb, None)
    pred = model._predict([w], xb, None)
    gz = model.intervals_.grad_to_qubits(nn.mse_grad(pred, yb))
    circ = model.spec_.circuit
    expect = np.zeros_like(w)
    for r in range(4):
        b = {f"x{i}": np.arctan(xb[r, i]) for i in range(6)}
        b.update({f"w{k}": w[k] for k in range(12)})
        for obs in range(6):
            expect += gz[r, obs] * parameter_shift_grad(circ, b, obs)[6:]
    assert np.allclose(g, expect, atol=1e-12)


def test_call_counts_per_step():
    n, rec = 6, 16
    spec = QnnSpec(n)
    angles = np.zeros((rec, n))
    qnn = _quantum_layer(spec, np.zeros(2 * n), angles, grad_weights=True)
    qcnn = _quantum_layer(spec, np.zeros(2 * n), angles, grad_weights=True, grad_inputs=True)
    # ansatz shifts are shared; the hybrid adds one shift pair per input angle
    assert qnn.n_circuits == rec * (1 + 2 * 2 * n)
    assert qcnn.n_circuits == qnn.n_circuits + rec * 2 * n


# -- estimators -----------------------------------------------------------------------


def test_one_epoch_step_count(small_data):
    x, y = small_data.subset("train")
    for est in (NNRegressor(epochs=1), QNNRegressor(epochs=1), QCNNRegressor(epochs=1)):
        est.fit(x, y)
        assert est.n_steps_ == math.ceil(len(x) / 16)
        assert len(est.history_["train_mse"]) == 1


def test_zero_epochs_rejected(small_data):
    x, y = small_data.subset("train")
    with pytest.raises(ValueError):
        QCNNRegressor(epochs=0).fit(x, y)


def test_qcnn_learns_a_constant_label(small_data):
    x, _ = small_data.subset("train")
    y = np.tile([1.02, 0.98, 1.05, -1.5, 2.0, 0.5], (len(x), 1))
    est = QCNNRegressor(epochs=200, learning_rate=1e-2, weight_decay=0.0, random_state=1).fit(x, y)
    assert est.history_["train_mse"][-1] < 1e-3


def test_fit_is_deterministic(small_data):
    x, y = small_data.subset("train")
    xt, _ = small_data.subset("test")
    for kind in ("nn", "qnn", "qcnn"):
        kw = {"shots": 64} if kind != "nn" else {"dropout": 0.1}
        a = make_model(kind, nn.TrainConfig(epochs=2, seed=3), **kw).fit(x, y).predict(xt)
        b = make_model(kind, nn.TrainConfig(epochs=2, seed=3), **kw).fit(x, y).predict(xt)
        assert a.tobytes() == b.tobytes()


def test_sklearn_estimator_contract(small_data):
    x, y = small_data.subset("train")
    est = QCNNRegressor(epochs=1, n_qubits=4)
    assert est.get_params()["n_qubits"] == 4
    est.set_params(n_qubits=2)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.predict(x)
    est.fit(x, y)
    with pytest.raises(ValueError):
        est.predict(x[:, :5])
    bad = x.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        est.predict(bad)
    with pytest.raises(ValueError):
        QNNRegressor(epochs=1).fit(x, y[:, :4])
    assert np.isfinite(est.score(x, y))


def test_divergence_raises(small_data):
    x, y = small_data.subset("train")
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged):
        NNRegressor(epochs=3, learning_rate=1e200, weight_decay=0.0).fit(x * 1e150, y)


@pytest.mark.parametrize("cls", [NNRegressor, QNNRegressor, QCNNRegressor])
def test_checkpoint_round_trip(cls, small_data, tmp_path):
    x, y = small_data.subset("train")
    est = cls(epochs=1, random_state=4).fit(x, y)
    path = tmp_path / "model.json"
    est.save(path)
    back = cls.load(path)
    assert back.get_params() == est.get_params()
    assert back.predict(x).tobytes() == est.predict(x).tobytes()


def test_predict_under_defaults_to_predict(small_data):
    x, y = small_data.subset("train")
    est = QCNNRegressor(epochs=1).fit(x, y)
    assert np.array_equal(est.predict_under(x), est.predict(x))
    a = est.predict_under(x, shots=128, seed=3)
    assert np.array_equal(a, est.predict_under(x, shots=128, seed=3))
    assert not np.array_equal(a, est.predict(x))
    noisy = est.predict_under(x, noise=NoiseModel(depolarizing=0.05))
    assert not np.array_equal(noisy, est.predict(x))
    assert est.noise is None and est.shots is None


def test_train_reports_metrics(small_data):
    res = train("nn", small_data, nn.TrainConfig(epochs=3, seed=0))
    _, yte = small_data.subset("test")
    assert res.metrics["test_mse"] == pytest.approx(nn.mse_loss(res.test_pred, yte))
    for key in ("train_mse", "val_mse", "epoch_mean", "epoch_std", "best_epoch", "wall_time"):
        assert key in res.metrics
    assert len(res.model.history_["val_mse"]) == 3


def test_unknown_model_kind():
    with pytest.raises(ValueError):
        make_model("svm")


def test_feature_map_plus_ansatz_parameter_names():
    circ = feature_map(2) + ansatz(2)
    assert circ.parameters == ["x0", "x1", "w0", "w1", "w2", "w3"]
