"""Classical, quantum and hybrid surrogate regressors for power-flow labels.

All three models expose the scikit-learn estimator API. Features are the PQ
bus demands ``(p_1..p_m, q_1..q_m)`` and targets are ``(v_1..v_m, delta_1..delta_m)``
with angles in degrees.

Quantum models read ``<Z>`` of every qubit and map it affinely onto the
output intervals: qubit ``2i`` drives ``v_i`` and qubit ``2i + 1`` drives
``delta_i``.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import neural as nn
from .datagen import LabeledDataset, derive_seed
from .qsim import CircuitSpec, Gate, NoiseModel, expectations

__all__ = [
    "TrainingDiverged",
    "QnnSpec",
    "QcnnSpec",
    "encode_features",
    "feature_map",
    "ansatz",
    "qnn_forward",
    "qcnn_forward",
    "hybrid_backward",
    "NNRegressor",
    "QNNRegressor",
    "QCNNRegressor",
    "TrainResult",
    "make_model",
    "train",
]

V_INTERVAL = (0.85, 1.15)
DELTA_INTERVAL = (-8.0, 8.0)


class TrainingDiverged(FloatingPointError):
    pass


# -- circuits -------------------------------------------------------------------


def encode_features(x) -> CircuitSpec:
    """Feature-map circuit for one record: H on every qubit, then Rz(arctan x_i)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("expected a non-empty feature vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    n = x.size
    gates = [Gate.h(q) for q in range(n)] + [Gate.rz(q, float(np.arctan(v))) for q, v in enumerate(x)]
    return CircuitSpec(n, gates)


def feature_map(n_qubits: int) -> CircuitSpec:
    """Feature map with angles left as parameters ``x0 .. x{n-1}``."""
    gates = [Gate.h(q) for q in range(n_qubits)] + [Gate.rz(q, f"x{q}") for q in range(n_qubits)]
    return CircuitSpec(n_qubits, gates)


def _entangler(n: int, entanglement: str) -> list[Gate]:
    if n == 1:
        return []
    if entanglement == "linear":
        pairs = [(q, q + 1) for q in range(n - 1)]
    elif entanglement == "circular":
        pairs = [(q, (q + 1) % n) for q in range(n)] if n > 2 else [(0, 1)]
    elif entanglement == "full":
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    else:
        raise ValueError(f"unknown entanglement {entanglement!r}")
    return [Gate.cnot(c, t) for c, t in pairs]


def ansatz(n_qubits: int, entanglement: str = "linear") -> CircuitSpec:
    """Ry layer, CNOT entangler, Ry layer; parameters ``w0 .. w{2n-1}``."""
    n = n_qubits
    gates = [Gate.ry(q, f"w{q}") for q in range(n)]
    gates += _entangler(n, entanglement)
    gates += [Gate.ry(q, f"w{n + q}") for q in range(n)]
    return CircuitSpec(n, gates)


@dataclass(frozen=True)
class QnnSpec:
    n_qubits: int
    entanglement: str = "linear"
    v_interval: tuple[float, float] = V_INTERVAL
    delta_interval: tuple[float, float] = DELTA_INTERVAL

    def __post_init__(self):
        if self.n_qubits < 1:
            raise ValueError("need at least one qubit")

    @property
    def n_params(self) -> int:
        return 2 * self.n_qubits

    @property
    def circuit(self) -> CircuitSpec:
        return feature_map(self.n_qubits) + ansatz(self.n_qubits, self.entanglement)


@dataclass(frozen=True)
class QcnnSpec:
    encoder: nn.MlpSpec
    quantum: QnnSpec
    decoder: nn.MlpSpec

    def __post_init__(self):
        q = self.quantum.n_qubits
        if self.encoder.n_out != q:
            raise ValueError(f"encoder output width {self.encoder.n_out} != {q} qubits")
        if self.decoder.n_in != q:
            raise ValueError(f"decoder input width {self.decoder.n_in} != {q} qubits")
        if self.decoder.n_out % 2:
            raise ValueError("decoder output must hold (v, delta) pairs")

    @property
    def n_hidden(self) -> int:
        return self.encoder.n_hidden + self.decoder.n_hidden


class _Intervals:
    """Affine map of values in [-1, 1] onto the (v, delta) output boxes."""

    def __init__(self, m: int, v_interval, delta_interval):
        lo = np.r_[np.full(m, v_interval[0]), np.full(m, delta_interval[0])]
        hi = np.r_[np.full(m, v_interval[1]), np.full(m, delta_interval[1])]
        self.center = (hi + lo) / 2
        self.half = (hi - lo) / 2
        # output column k (y order) reads qubit perm[k]
        self.perm = np.r_[np.arange(0, 2 * m, 2), np.arange(1, 2 * m, 2)]

    def from_qubits(self, z):
        return self.center + self.half * z[:, self.perm]

    def grad_to_qubits(self, grad_y):
        g = np.empty_like(grad_y)
        g[:, self.perm] = grad_y * self.half
        return g


# -- quantum layer ----------------------------------------------------------------


@dataclass
class _QuantumEval:
    z: np.ndarray  # (N, n)
    dz_dw: np.ndarray | None = None  # (N, n, P)
    dz_dphi: np.ndarray | None = None  # (N, n, n)
    n_circuits: int = 0


def _quantum_layer(
    spec: QnnSpec,
    weights: np.ndarray,
    angles: np.ndarray,
    *,
    grad_weights: bool = False,
    grad_inputs: bool = False,
    shots: int | None = None,
    noise: NoiseModel | None = None,
    rng: np.random.Generator | None = None,
) -> _QuantumEval:
    """Evaluate the feature map + ansatz for a batch of input angles.

    With gradients requested, every record is run together with its
    +/- pi/2 shifted copies (one pair per ansatz weight and, optionally, per
    input angle) in a single batched simulation.
    """
    n = spec.n_qubits
    n_rec = angles.shape[0]
    n_w = spec.n_params
    shifts = [("w", k, s) for k in range(n_w) for s in (1, -1)] if grad_weights else []
    if grad_inputs:
        shifts += [("x", k, s) for k in range(n) for s in (1, -1)]
    n_var = 1 + len(shifts)

    x_cols = np.repeat(angles[:, None, :], n_var, axis=1)  # (N, S, n)
    w_cols = np.broadcast_to(weights, (n_rec, n_var, n_w)).copy()
    for j, (kind, k, s) in enumerate(shifts, start=1):
        if kind == "w":
            w_cols[:, j, k] += s * np.pi / 2
        else:
            x_cols[:, j, k] += s * np.pi / 2
    bindings = {f"x{q}": x_cols[:, :, q].ravel() for q in range(n)}
    bindings.update({f"w{k}": w_cols[:, :, k].ravel() for k in range(n_w)})
    z = expectations(spec.circuit, bindings, noise=noise, shots=shots, rng=rng)
    z = z.reshape(n_rec, n_var, n)

    out = _QuantumEval(z=z[:, 0], n_circuits=n_rec * n_var)
    pos = 1
    if grad_weights:
        d = 0.5 * (z[:, pos : pos + 2 * n_w : 2] - z[:, pos + 1 : pos + 2 * n_w : 2])  # (N, P, n)
        out.dz_dw = d.transpose(0, 2, 1)
        pos += 2 * n_w
    if grad_inputs:
        d = 0.5 * (z[:, pos : pos + 2 * n : 2] - z[:, pos + 1 : pos + 2 * n : 2])  # (N, n_in, n)
        out.dz_dphi = d.transpose(0, 2, 1)
    return out


def qnn_forward(spec: QnnSpec, weights, x, shots: int | None = None, noise: NoiseModel | None = None, rng=None):
    """Predicted ``(v, delta)`` rows for inputs ``x`` of shape ``(N, n_qubits)``."""
    if shots is not None and shots < 1:
        raise ValueError("shots must be >= 1 (or None for exact expectations)")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != spec.n_qubits:
        raise ValueError(f"expected {spec.n_qubits} features, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    rng = np.random.default_rng(rng) if shots is not None else None
    q = _quantum_layer(spec, np.asarray(weights, dtype=float), np.arctan(x), shots=shots, noise=noise, rng=rng)
    return _Intervals(spec.n_qubits // 2, spec.v_interval, spec.delta_interval).from_qubits(q.z)


@dataclass
class QcnnParams:
    encoder: list
    ansatz: np.ndarray
    decoder: list

    def flat(self) -> list[np.ndarray]:
        return [*self.encoder, self.ansatz, *self.decoder]

    @classmethod
    def from_flat(cls, spec: QcnnSpec, arrays) -> "QcnnParams":
        ne = 2 * (len(spec.encoder.widths) - 1)
        return cls(list(arrays[:ne]), arrays[ne], list(arrays[ne + 1 :]))


def _decoder_intervals(spec: QcnnSpec) -> _Intervals:
    m = spec.decoder.n_out // 2
    iv = _Intervals(m, spec.quantum.v_interval, spec.quantum.delta_interval)
    iv.perm = np.arange(2 * m)  # decoder already emits y order
    return iv


def qcnn_forward(
    spec: QcnnSpec,
    params: QcnnParams,
    x,
    shots: int | None = None,
    noise: NoiseModel | None = None,
    train_mode: bool = False,
    rng=None,
):
    """Encoder MLP -> arctan feature map -> ansatz -> decoder MLP -> tanh box map."""
    out, _ = _qcnn_pass(spec, params, x, shots=shots, noise=noise, train_mode=train_mode, rng=rng)
    return out


def _qcnn_pass(spec, params, x, *, shots, noise, train_mode, rng, grads=False):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != spec.encoder.n_in:
        raise ValueError(f"expected {spec.encoder.n_in} features, got {x.shape[1]}")
    rng = np.random.default_rng(rng)
    zenc, enc_cache = nn.forward(spec.encoder, params.encoder, x, train_mode, rng)
    q = _quantum_layer(
        spec.quantum,
        params.ansatz,
        np.arctan(zenc),
        grad_weights=grads,
        grad_inputs=grads,
        shots=shots,
        noise=noise,
        rng=rng,
    )
    o, dec_cache = nn.forward(spec.decoder, params.decoder, q.z, train_mode, rng)
    t = np.tanh(o)
    iv = _decoder_intervals(spec)
    y = iv.from_qubits(t)
    return y, dict(zenc=zenc, enc=enc_cache, q=q, dec=dec_cache, t=t, iv=iv)


def hybrid_backward(spec: QcnnSpec, params: QcnnParams, x, y, *, shots=None, noise=None, train_mode=False, rng=None):
    """Loss and gradients for every block of a QCNN.

    Decoder gradients come from backprop, ansatz gradients from the
    parameter-shift rule, and encoder gradients from parameter shifts on the
    feature-map Rz angles chained through ``d arctan(z)/dz = 1 / (1 + z**2)``.
    Returns ``(loss, QcnnParams_of_gradients, n_circuits)``.
    """
    pred, c = _qcnn_pass(spec, params, x, shots=shots, noise=noise, train_mode=train_mode, rng=rng, grads=True)
    y = np.atleast_2d(y)
    loss = nn.mse_loss(pred, y)
    g_y = nn.mse_grad(pred, y)
    g_o = c["iv"].grad_to_qubits(g_y) * (1 - c["t"] ** 2)
    g_dec, g_z = nn.backward(spec.decoder, params.decoder, c["dec"], g_o)
    q = c["q"]
    g_w = np.einsum("nq,nqp->p", g_z, q.dz_dw)
    g_phi = np.einsum("nq,nqk->nk", g_z, q.dz_dphi)
    g_zenc = g_phi / (1 + c["zenc"] ** 2)
    g_enc, _ = nn.backward(spec.encoder, params.encoder, c["enc"], g_zenc)
    return loss, QcnnParams(g_enc, g_w, g_dec), q.n_circuits


# -- estimators -----------------------------------------------------------------


class _SurrogateRegressor(RegressorMixin, BaseEstimator):
    """Shared minibatch AdamW loop; subclasses supply the model maths."""

    def _check_targets(self, X, y):
        pass

    def _fit_streams(self):
        seed = 0 if self.random_state is None else int(self.random_state)
        return {tag: np.random.default_rng(derive_seed(seed, tag)) for tag in ("init", "shuffle", "noise", "eval")}

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        y = y.reshape(len(y), -1).astype(float)
        self._check_targets(X, y)
        cfg = nn.TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            dropout=self.dropout,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=0 if self.random_state is None else int(self.random_state),
        )
        rngs = self._fit_streams()
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = y.shape[1]
        self.scaler_ = StandardScaler(with_mean=self.standardize, with_std=self.standardize).fit(X)
        xs = self.scaler_.transform(X)
        if X_val is not None:
            X_val = check_array(X_val)
            xv = self.scaler_.transform(X_val)
            y_val = np.asarray(y_val, dtype=float).reshape(len(X_val), -1)

        params = self._init_params(rngs["init"])
        state = nn.AdamState()
        n = len(xs)
        hist: dict[str, list] = {"train_mse": [], "val_mse": [], "wall_time": []}
        self.n_steps_ = 0
        self.n_circuits_ = 0
        best = (np.inf, params, 0)
        t0 = time.perf_counter()
        for epoch in range(cfg.epochs):
            order = rngs["shuffle"].permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                loss, grads = self._loss_and_grads(params, xs[idx], y[idx], rngs["noise"])
                if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                    raise TrainingDiverged(
                        f"{type(self).__name__}: non-finite loss/gradient at epoch {epoch}, step {self.n_steps_}"
                    )
                params = nn.adam_step(params, grads, state, cfg.learning_rate, cfg.weight_decay)
                self.n_steps_ += 1
            hist["train_mse"].append(nn.mse_loss(self._predict(params, xs, rngs["eval"]), y))
            if X_val is not None:
                val = nn.mse_loss(self._predict(params, xv, rngs["eval"]), y_val)
                hist["val_mse"].append(val)
                if val < best[0]:
                    best = (val, params, epoch)
            hist["wall_time"].append(time.perf_counter() - t0)
            if not np.isfinite(hist["train_mse"][-1]):
                raise TrainingDiverged(f"{type(self).__name__}: non-finite training MSE at epoch {epoch}")
        self.params_ = params
        self.history_ = hist
        self.best_params_, self.best_epoch_ = (best[1], best[2]) if X_val is not None else (params, cfg.epochs - 1)
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        rng = np.random.default_rng(derive_seed(0 if self.random_state is None else int(self.random_state), "predict"))
        return self._predict(self.params_, self.scaler_.transform(X), rng)

    # checkpointing
    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        blocks = self._checkpoint_blocks()
        blocks["scaler"] = nn.pack([self.scaler_.mean_ if self.standardize else np.zeros(self.n_features_in_),
                                    self.scaler_.scale_ if self.standardize else np.ones(self.n_features_in_)])
        blocks["estimator"] = {"class": type(self).__name__, "params": _jsonable(self.get_params())}
        nn.save_checkpoint(path, blocks)


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, NoiseModel):
            v = {"noise_model": vars(v)}
        elif isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


def _restore(cls, path):
    blocks = nn.load_checkpoint(path)
    est_meta = blocks.pop("estimator")
    kw = dict(est_meta["params"])
    if isinstance(kw.get("noise"), dict):
        kw["noise"] = NoiseModel(**kw["noise"]["noise_model"])
    for key in ("v_interval", "delta_interval"):
        if key in kw:
            kw[key] = tuple(kw[key])
    est = cls(**kw)
    mean, scale = nn.unpack(blocks.pop("scaler"))
    est.scaler_ = StandardScaler()
    est.scaler_.mean_, est.scaler_.scale_, est.scaler_.var_ = mean, scale, scale**2
    est.scaler_.n_features_in_ = len(mean)
    est.n_features_in_ = len(mean)
    est._load_blocks(blocks)
    return est


class NNRegressor(_SurrogateRegressor):
    """ReLU MLP whose first/last hidden layers are ``n_features`` wide and
    inner hidden layers twice that. ``n_hidden=0`` gives linear regression."""

    def __init__(
        self,
        n_hidden=7,
        hidden_base=None,
        learning_rate=1.5e-4,
        weight_decay=3e-3,
        dropout=0.0,
        batch_size=16,
        epochs=1000,
        standardize=True,
        random_state=0,
    ):
        self.n_hidden = n_hidden
        self.hidden_base = hidden_base
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.batch_size = batch_size
        self.epochs = epochs
        self.standardize = standardize
        self.random_state = random_state

    def _spec(self):
        return nn.MlpSpec.stacked(self.n_features_in_, self.n_outputs_, self.n_hidden, self.hidden_base, self.dropout)

    def _init_params(self, rng):
        self.spec_ = self._spec()
        return nn.init_params(self.spec_, rng)

    def _loss_and_grads(self, params, xb, yb, rng):
        pred, cache = nn.forward(self.spec_, params, xb, train_mode=True, rng=rng)
        grads, _ = nn.backward(self.spec_, params, cache, nn.mse_grad(pred, yb))
        return nn.mse_loss(pred, yb), grads

    def _predict(self, params, xs, rng):
        return nn.forward(self.spec_, params, xs)[0]

    def _checkpoint_blocks(self):
        return {"mlp": dict(nn.pack(self.params_), layers=list(self.spec_.widths))}

    def _load_blocks(self, blocks):
        self.n_outputs_ = blocks["mlp"]["layers"][-1]
        self.spec_ = self._spec()
        self.params_ = nn.unpack(blocks["mlp"])

    @classmethod
    def load(cls, path):
        return _restore(cls, path)


class _QuantumMixin:
    def _qnn_spec(self, n_qubits):
        return QnnSpec(n_qubits, self.entanglement, tuple(self.v_interval), tuple(self.delta_interval))

    def predict_under(self, X, *, shots=None, noise=None, seed=0):
        """Predict with the fitted parameters but another shot budget or noise model."""
        check_is_fitted(self, "params_")
        X = check_array(X)
        if shots is not None and shots < 1:
            raise ValueError("shots must be >= 1 (or None for exact expectations)")
        other = copy.copy(self)
        other.shots, other.noise = shots, noise
        return other._predict(self.params_, self.scaler_.transform(X), np.random.default_rng(seed))


class QNNRegressor(_QuantumMixin, _SurrogateRegressor):
    """Pure quantum model: one qubit per feature, Ry-CNOT-Ry ansatz.

    Needs as many targets as features (each qubit yields one output).
    ``shots=None`` trains on exact expectation values.
    """

    def __init__(
        self,
        entanglement="linear",
        shots=None,
        noise=None,
        v_interval=V_INTERVAL,
        delta_interval=DELTA_INTERVAL,
        init_scale=1.0,
        learning_rate=1.5e-4,
        weight_decay=3e-3,
        dropout=0.0,
        batch_size=16,
        epochs=1000,
        standardize=False,
        random_state=0,
    ):
        self.entanglement = entanglement
        self.shots = shots
        self.noise = noise
        self.v_interval = v_interval
        self.delta_interval = delta_interval
        self.init_scale = init_scale
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.batch_size = batch_size
        self.epochs = epochs
        self.standardize = standardize
        self.random_state = random_state

    def _check_targets(self, X, y):
        if X.shape[1] != y.shape[1] or X.shape[1] % 2:
            raise ValueError("QNN needs an even number of features equal to the number of targets")

    def _init_params(self, rng):
        self.spec_ = self._qnn_spec(self.n_features_in_)
        self.intervals_ = _Intervals(self.n_features_in_ // 2, self.spec_.v_interval, self.spec_.delta_interval)
        return [rng.uniform(-self.init_scale, self.init_scale, size=self.spec_.n_params)]

    def _loss_and_grads(self, params, xb, yb, rng):
        q = _quantum_layer(self.spec_, params[0], np.arctan(xb), grad_weights=True,
                           shots=self.shots, noise=self.noise, rng=rng)
        self.n_circuits_ += q.n_circuits
        pred = self.intervals_.from_qubits(q.z)
        g_z = self.intervals_.grad_to_qubits(nn.mse_grad(pred, yb))
        return nn.mse_loss(pred, yb), [np.einsum("nq,nqp->p", g_z, q.dz_dw)]

    def _predict(self, params, xs, rng):
        q = _quantum_layer(self.spec_, params[0], np.arctan(xs), shots=self.shots, noise=self.noise, rng=rng)
        return self.intervals_.from_qubits(q.z)

    def _checkpoint_blocks(self):
        return {"ansatz": nn.pack(self.params_)}

    def _load_blocks(self, blocks):
        self.n_outputs_ = self.n_features_in_
        self.spec_ = self._qnn_spec(self.n_features_in_)
        self.intervals_ = _Intervals(self.n_features_in_ // 2, self.spec_.v_interval, self.spec_.delta_interval)
        self.params_ = nn.unpack(blocks["ansatz"])

    @classmethod
    def load(cls, path):
        return _restore(cls, path)


def _adapter_stack(n_layers: int, base: int) -> list[int]:
    if n_layers <= 0:
        return []
    if n_layers == 1:
        return [base]
    return [base] + [2 * base] * (n_layers - 2) + [base]


class QCNNRegressor(_QuantumMixin, _SurrogateRegressor):
    """Hybrid model: MLP encoder -> quantum layer -> MLP decoder.

    The encoder has ``n_before`` ReLU hidden layers and a linear head with one
    unit per qubit; the decoder has ``n_after`` hidden layers. The hidden
    layers adjacent to the quantum layer are ``hidden_base`` wide (default:
    number of features). Decoder outputs pass through ``tanh`` and the interval
    map, so predictions always stay inside the output boxes.

    ``encoder_offset`` is added to the initial bias of the encoder head. The
    feature map's response to its input angle is flat at zero, so starting the
    angles near ``arctan(1)`` keeps both the signal and the encoder gradient
    alive from the first step.
    """

    def __init__(
        self,
        n_qubits=6,
        n_before=4,
        n_after=3,
        hidden_base=None,
        encoder_offset=1.0,
        entanglement="linear",
        shots=None,
        noise=None,
        v_interval=V_INTERVAL,
        delta_interval=DELTA_INTERVAL,
        init_scale=1.0,
        learning_rate=1.5e-4,
        weight_decay=3e-3,
        dropout=0.0,
        batch_size=16,
        epochs=1000,
        standardize=True,
        random_state=0,
    ):
        self.n_qubits = n_qubits
        self.n_before = n_before
        self.n_after = n_after
        self.hidden_base = hidden_base
        self.encoder_offset = encoder_offset
        self.entanglement = entanglement
        self.shots = shots
        self.noise = noise
        self.v_interval = v_interval
        self.delta_interval = delta_interval
        self.init_scale = init_scale
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.batch_size = batch_size
        self.epochs = epochs
        self.standardize = standardize
        self.random_state = random_state

    def _check_targets(self, X, y):
        if y.shape[1] % 2:
            raise ValueError("targets must hold (v, delta) pairs")

    def _build_spec(self):
        base = self.hidden_base or self.n_features_in_
        enc = nn.MlpSpec((self.n_features_in_, *_adapter_stack(self.n_before, base), self.n_qubits), self.dropout)
        dec = nn.MlpSpec((self.n_qubits, *_adapter_stack(self.n_after, base), self.n_outputs_), self.dropout)
        return QcnnSpec(enc, self._qnn_spec(self.n_qubits), dec)

    def _init_params(self, rng):
        self.spec_ = self._build_spec()
        enc = nn.init_params(self.spec_.encoder, rng)
        enc[-1] = enc[-1] + self.encoder_offset
        w = rng.uniform(-self.init_scale, self.init_scale, size=self.spec_.quantum.n_params)
        dec = nn.init_params(self.spec_.decoder, rng)
        return QcnnParams(enc, w, dec).flat()

    def _loss_and_grads(self, params, xb, yb, rng):
        p = QcnnParams.from_flat(self.spec_, params)
        loss, g, n_circ = hybrid_backward(self.spec_, p, xb, yb, shots=self.shots, noise=self.noise,
                                          train_mode=True, rng=rng)
        self.n_circuits_ += n_circ
        return loss, g.flat()

    def _predict(self, params, xs, rng):
        p = QcnnParams.from_flat(self.spec_, params)
        return qcnn_forward(self.spec_, p, xs, shots=self.shots, noise=self.noise, rng=rng)

    def _checkpoint_blocks(self):
        p = QcnnParams.from_flat(self.spec_, self.params_)
        return {
            "encoder": dict(nn.pack(p.encoder), layers=list(self.spec_.encoder.widths)),
            "ansatz": nn.pack([p.ansatz]),
            "decoder": dict(nn.pack(p.decoder), layers=list(self.spec_.decoder.widths)),
        }

    def _load_blocks(self, blocks):
        self.n_outputs_ = blocks["decoder"]["layers"][-1]
        self.spec_ = self._build_spec()
        self.params_ = QcnnParams(
            nn.unpack(blocks["encoder"]), nn.unpack(blocks["ansatz"])[0], nn.unpack(blocks["decoder"])
        ).flat()

    @classmethod
    def load(cls, path):
        return _restore(cls, path)


# -- training entry point ----------------------------------------------------------


MODEL_KINDS = ("lr", "nn", "qnn", "qcnn")


def make_model(kind: str, config: nn.TrainConfig | None = None, **options) -> _SurrogateRegressor:
    """Estimator for ``kind`` in ``{"lr", "nn", "qnn", "qcnn"}`` configured from ``config``."""
    config = config or nn.TrainConfig()
    common = dict(
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
        dropout=config.dropout,
        batch_size=config.batch_size,
        epochs=config.epochs,
        random_state=config.seed,
    )
    common.update(options)
    if kind == "lr":
        common.setdefault("n_hidden", 0)
        return NNRegressor(**common)
    if kind == "nn":
        return NNRegressor(**common)
    if kind == "qnn":
        return QNNRegressor(**common)
    if kind == "qcnn":
        return QCNNRegressor(**common)
    raise ValueError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")


@dataclass
class TrainResult:
    model: _SurrogateRegressor
    metrics: dict[str, Any] = field(default_factory=dict)
    test_pred: np.ndarray | None = None


def train(kind: str, dataset: LabeledDataset, config: nn.TrainConfig | None = None, **options) -> TrainResult:
    """Fit ``kind`` on the train split, tracking validation, and score the test split.

    Metrics use the summed-component MSE convention; ``*_mse_component``
    entries divide by the number of output components.
    """
    model = make_model(kind, config, **options)
    xtr, ytr = dataset.subset("train")
    xva, yva = dataset.subset("validation")
    xte, yte = dataset.subset("test")
    if len(xtr) == 0:
        raise ValueError("dataset has no training records")
    model.fit(xtr, ytr, xva if len(xva) else None, yva if len(yva) else None)
    d = ytr.shape[1]
    curve = np.asarray(model.history_["train_mse"])
    metrics: dict[str, Any] = {
        "train_mse": float(curve[-1]),
        "final_train_mse": float(curve[-1]),
        "epoch_mean": float(curve.mean()),
        "epoch_std": float(curve.std()),
        "n_steps": model.n_steps_,
        "n_circuits": model.n_circuits_,
        "wall_time": float(model.history_["wall_time"][-1]),
    }
    if len(xva):
        metrics["val_mse"] = float(model.history_["val_mse"][-1])
        metrics["best_val_mse"] = float(np.min(model.history_["val_mse"]))
        metrics["best_epoch"] = int(model.best_epoch_)
    pred = None
    if len(xte):
        pred = model.predict(xte)
        metrics["test_mse"] = nn.mse_loss(pred, yte)
    for key in ("train_mse", "val_mse", "test_mse"):
        if key in metrics:
            metrics[key + "_component"] = metrics[key] / d
    return TrainResult(model=model, metrics=metrics, test_pred=pred)
