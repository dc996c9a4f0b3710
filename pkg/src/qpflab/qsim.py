"""Dense statevector / density-matrix simulator for H, Rz, Ry and CNOT circuits.

Qubit ``q`` is bit ``q`` of the basis index (qubit 0 is least significant).
Rotations follow ``R_a(t) = exp(-i t P_a / 2)``.

Every simulation routine is batched: angles may be arrays of shape ``(B,)``
and the state carries a leading batch axis, which is how the surrogate models
evaluate a minibatch together with all of its parameter shifts in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "MAX_PURE_QUBITS",
    "MAX_MIXED_QUBITS",
    "Gate",
    "CircuitSpec",
    "NoiseModel",
    "QuantumState",
    "UnboundParameterError",
    "apply_gate",
    "run",
    "expectation_z",
    "sample_shots",
    "expectations",
    "parameter_shift_grad",
]

MAX_PURE_QUBITS = 12
MAX_MIXED_QUBITS = 8

_ROTATIONS = ("ry", "rz")
_KINDS = {"h": 1, "ry": 1, "rz": 1, "cnot": 2}
_SQRT1_2 = 1.0 / np.sqrt(2.0)


class UnboundParameterError(KeyError):
    pass


@dataclass(frozen=True)
class Gate:
    """One gate; ``param`` is a bound angle (float) or a parameter name (str)."""

    kind: str
    qubits: tuple[int, ...]
    param: float | str | None = None

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "qubits", tuple(int(q) for q in self.qubits))
        if kind not in _KINDS:
            raise ValueError(f"unsupported gate {self.kind!r}")
        if len(self.qubits) != _KINDS[kind]:
            raise ValueError(f"{kind} acts on {_KINDS[kind]} qubit(s), got {self.qubits}")
        if kind == "cnot" and self.qubits[0] == self.qubits[1]:
            raise ValueError("CNOT control and target must differ")
        if kind in _ROTATIONS:
            if self.param is None:
                raise ValueError(f"{kind} needs an angle or a parameter name")
        elif self.param is not None:
            raise ValueError(f"{kind} takes no parameter")

    @property
    def is_named(self) -> bool:
        return isinstance(self.param, str)

    # convenience constructors
    @classmethod
    def h(cls, q):
        return cls("h", (q,))

    @classmethod
    def ry(cls, q, theta):
        return cls("ry", (q,), theta)

    @classmethod
    def rz(cls, q, theta):
        return cls("rz", (q,), theta)

    @classmethod
    def cnot(cls, control, target):
        return cls("cnot", (control, target))


@dataclass(frozen=True)
class CircuitSpec:
    n_qubits: int
    gates: tuple[Gate, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        if self.n_qubits < 1:
            raise ValueError("a circuit needs at least one qubit")
        for g in self.gates:
            if any(q < 0 or q >= self.n_qubits for q in g.qubits):
                raise ValueError(f"{g} addresses a qubit outside 0..{self.n_qubits - 1}")

    @property
    def parameters(self) -> list[str]:
        """Named parameters in order of first appearance."""
        seen: dict[str, None] = {}
        for g in self.gates:
            if g.is_named:
                seen.setdefault(g.param, None)
        return list(seen)

    def __add__(self, other: "CircuitSpec") -> "CircuitSpec":
        if other.n_qubits != self.n_qubits:
            raise ValueError("cannot concatenate circuits of different width")
        return CircuitSpec(self.n_qubits, self.gates + other.gates)

    def bind(self, bindings: Mapping[str, float]) -> "CircuitSpec":
        gates = []
        for g in self.gates:
            if g.is_named:
                if g.param not in bindings:
                    raise UnboundParameterError(g.param)
                g = replace(g, param=float(bindings[g.param]))
            gates.append(g)
        return CircuitSpec(self.n_qubits, tuple(gates))


@dataclass(frozen=True)
class NoiseModel:
    """Hardware noise knobs.

    ``gate_imperfection`` is a coherent over-rotation (radians) added to every
    Ry/Rz angle. ``depolarizing`` and ``amplitude_damping`` act on the
    qubits touched by each gate, in that order, after the unitary.
    ``measurement_flip`` is a symmetric readout bit-flip probability.
    """

    measurement_flip: float = 0.0
    gate_imperfection: float = 0.0
    depolarizing: float = 0.0
    amplitude_damping: float = 0.0

    def __post_init__(self):
        for name in ("measurement_flip", "depolarizing", "amplitude_damping"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")
        if not 0.0 <= self.gate_imperfection <= np.pi:
            raise ValueError("gate_imperfection must lie in [0, pi]")

    @property
    def incoherent(self) -> bool:
        return self.depolarizing > 0 or self.amplitude_damping > 0

    @property
    def is_trivial(self) -> bool:
        return not (self.incoherent or self.measurement_flip or self.gate_imperfection)

    @classmethod
    def from_level(cls, channel: str, level: float) -> "NoiseModel":
        """Single-channel model for a sweep level in [0, 1].

        ``gate_imperfection`` maps ``level`` to ``level * pi / 20`` radians;
        the other channels use ``level`` as their probability.
        """
        if channel == "gate_imperfection":
            return cls(gate_imperfection=level * np.pi / 20)
        if channel not in ("measurement_flip", "depolarizing", "amplitude_damping"):
            raise ValueError(f"unknown noise channel {channel!r}")
        return cls(**{channel: level})


@dataclass(frozen=True)
class QuantumState:
    """A pure state (vector of length 2**n) or a density matrix (2**n x 2**n)."""

    data: np.ndarray
    n_qubits: int

    def __post_init__(self):
        dim = 1 << self.n_qubits
        if self.data.shape not in ((dim,), (dim, dim)):
            raise ValueError(f"state of shape {self.data.shape} does not match {self.n_qubits} qubits")

    @property
    def mode(self) -> str:
        return "pure" if self.data.ndim == 1 else "mixed"

    @classmethod
    def zero(cls, n_qubits: int, mode: str = "pure") -> "QuantumState":
        _check_width(n_qubits, mode == "mixed")
        dim = 1 << n_qubits
        if mode == "pure":
            data = np.zeros(dim, dtype=complex)
            data[0] = 1.0
        elif mode == "mixed":
            data = np.zeros((dim, dim), dtype=complex)
            data[0, 0] = 1.0
        else:
            raise ValueError(f"mode must be 'pure' or 'mixed', got {mode!r}")
        return cls(data, n_qubits)

    def to_mixed(self) -> "QuantumState":
        if self.mode == "mixed":
            return self
        return QuantumState(np.outer(self.data, self.data.conj()), self.n_qubits)

    def probabilities(self) -> np.ndarray:
        if self.mode == "pure":
            return np.abs(self.data) ** 2
        return np.real(np.diag(self.data)).copy()


def _check_width(n: int, mixed: bool) -> None:
    cap = MAX_MIXED_QUBITS if mixed else MAX_PURE_QUBITS
    if n > cap:
        raise ValueError(f"{'mixed' if mixed else 'pure'} simulation is capped at {cap} qubits, got {n}")


# -- batched kernels ------------------------------------------------------------
#
# Pure batches have shape (B, D); mixed batches (B, D, D). A single-qubit
# operator (shape (2, 2) or (B, 2, 2)) acts on bit q of the row index by
# viewing rows as (D >> (q + 1), 2, rest).


def _apply_rows(arr: np.ndarray, u: np.ndarray, q: int) -> np.ndarray:
    b, d = arr.shape[0], arr.shape[1]
    x = arr.reshape(b, d >> (q + 1), 2, -1)
    u = u[:, None] if u.ndim == 3 else u
    return np.matmul(u, x).reshape(arr.shape)


def _apply_unitary(arr: np.ndarray, u: np.ndarray, q: int, mixed: bool) -> np.ndarray:
    arr = _apply_rows(arr, u, q)
    if mixed:
        # rho U^dagger = (conj(U) rho^T)^T
        arr = _apply_rows(arr.transpose(0, 2, 1), np.conj(u), q).transpose(0, 2, 1)
    return arr


_H = np.array([[_SQRT1_2, _SQRT1_2], [_SQRT1_2, -_SQRT1_2]], dtype=complex)


def _gate_matrix(kind: str, theta) -> np.ndarray:
    if kind == "h":
        return _H
    half = np.asarray(theta, dtype=float) / 2
    out = np.zeros(half.shape + (2, 2), dtype=complex)
    if kind == "ry":
        c, s = np.cos(half), np.sin(half)
        out[..., 0, 0], out[..., 0, 1], out[..., 1, 0], out[..., 1, 1] = c, -s, s, c
    elif kind == "rz":
        e = np.exp(-1j * half)
        out[..., 0, 0], out[..., 1, 1] = e, np.conj(e)
    else:
        raise ValueError(kind)
    return out


def _cnot_perm(n: int, control: int, target: int) -> np.ndarray:
    idx = np.arange(1 << n)
    return np.where((idx >> control) & 1, idx ^ (1 << target), idx)


def _split(arr: np.ndarray, q: int, axis: int) -> np.ndarray:
    d = arr.shape[axis]
    return arr.reshape(arr.shape[:axis] + (d >> (q + 1), 2, 1 << q) + arr.shape[axis + 1 :])


def _depolarize(rho: np.ndarray, q: int, p: float) -> np.ndarray:
    a = _split(_split(rho, q, 1), q, 4)  # (B, hi, 2, lo, hi, 2, lo)
    tr = a[:, :, 0, :, :, 0, :] + a[:, :, 1, :, :, 1, :]
    out = (1 - p) * a
    out[:, :, 0, :, :, 0, :] += 0.5 * p * tr
    out[:, :, 1, :, :, 1, :] += 0.5 * p * tr
    return out.reshape(rho.shape)


def _amp_damp(rho: np.ndarray, q: int, gamma: float) -> np.ndarray:
    a = _split(_split(rho, q, 1), q, 4)
    out = a.copy()
    keep = np.sqrt(1 - gamma)
    out[:, :, 0, :, :, 0, :] += gamma * a[:, :, 1, :, :, 1, :]
    out[:, :, 0, :, :, 1, :] *= keep
    out[:, :, 1, :, :, 0, :] *= keep
    out[:, :, 1, :, :, 1, :] *= 1 - gamma
    return out.reshape(rho.shape)


def _unitary_of(gate: Gate, theta, noise: NoiseModel | None) -> np.ndarray:
    if gate.kind in _ROTATIONS and noise is not None and noise.gate_imperfection:
        theta = theta + noise.gate_imperfection
    return _gate_matrix(gate.kind, theta)


def _step(arr: np.ndarray, n: int, gate: Gate, theta, noise: NoiseModel | None, mixed: bool) -> np.ndarray:
    if gate.kind == "cnot":
        perm = _cnot_perm(n, *gate.qubits)
        arr = arr[:, perm] if not mixed else arr[:, perm][:, :, perm]
    else:
        arr = _apply_unitary(arr, _unitary_of(gate, theta, noise), gate.qubits[0], mixed)
    if mixed and noise is not None:
        for q in gate.qubits:
            if noise.depolarizing:
                arr = _depolarize(arr, q, noise.depolarizing)
            if noise.amplitude_damping:
                arr = _amp_damp(arr, q, noise.amplitude_damping)
    return arr


def _run_fused(n: int, gates, angles, noise, b: int, defer_tail: bool = False):
    """Noiseless (or coherent-noise) pure simulation with gate fusion.

    Runs of single-qubit gates on one qubit are multiplied into a single 2x2,
    adjacent CNOTs are composed into one index permutation, and everything
    applied before the first entangling gate is built directly as a product
    state. With ``defer_tail`` the trailing single-qubit gates are returned
    unapplied as ``{qubit: matrix}`` next to the state.
    """
    pending: dict[int, np.ndarray] = {}
    psi = None
    perm = None

    def product_state():
        out = np.ones((b, 1), dtype=complex)
        for q in range(n):
            col = pending.pop(q)[..., :, 0] if q in pending else np.array([1.0, 0.0], dtype=complex)
            col = np.broadcast_to(col, (b, 2))
            out = (col[:, :, None] * out[:, None, :]).reshape(b, -1)
        return out

    def flush(qubits):
        nonlocal psi, perm
        if psi is None:
            psi = product_state()
        if perm is not None:
            psi = psi[:, perm]
            perm = None
        for q in qubits:
            if q in pending:
                psi = _apply_rows(psi, pending.pop(q), q)

    for gate, theta in zip(gates, angles):
        if gate.kind == "cnot":
            touched = [q for q in gate.qubits if q in pending]
            if touched or psi is None:
                flush(touched)
            p = _cnot_perm(n, *gate.qubits)
            perm = p if perm is None else perm[p]
        else:
            q = gate.qubits[0]
            if perm is not None and psi is not None:
                flush([])
            u = _unitary_of(gate, theta, noise)
            pending[q] = u if q not in pending else np.matmul(u, pending[q])
    if psi is None:
        psi = product_state()
    if defer_tail:
        flush([])
        return psi, pending
    flush(sorted(pending))
    return psi


def _resolve_angles(circuit: CircuitSpec, bindings, batch: int | None):
    bindings = bindings or {}
    angles = []
    sizes = set()
    for g in circuit.gates:
        if g.kind not in _ROTATIONS:
            angles.append(None)
            continue
        if g.is_named:
            if g.param not in bindings:
                raise UnboundParameterError(g.param)
            val = np.asarray(bindings[g.param], dtype=float)
        else:
            val = np.asarray(g.param, dtype=float)
        if val.ndim > 1:
            raise ValueError(f"binding for {g.param!r} must be scalar or 1-D")
        if val.ndim == 1:
            sizes.add(val.shape[0])
        angles.append(val)
    if batch is not None:
        sizes.add(batch)
    if len(sizes) > 1:
        raise ValueError(f"inconsistent batch sizes in bindings: {sorted(sizes)}")
    b = sizes.pop() if sizes else 1
    return [a if a is None or a.ndim == 1 else np.full(b, float(a)) for a in angles], b


def run(
    circuit: CircuitSpec,
    bindings: Mapping[str, float | np.ndarray] | None = None,
    *,
    noise: NoiseModel | None = None,
    mixed: bool | None = None,
    batch: int | None = None,
    fuse: bool = True,
) -> np.ndarray:
    """Simulate from ``|0...0>`` and return the raw batch array.

    The result has shape ``(B, 2**n)`` for pure simulation and
    ``(B, 2**n, 2**n)`` for density matrices. Mixed mode is chosen
    automatically when ``noise`` has incoherent channels. ``fuse=False``
    applies gates one at a time (reference path).
    """
    if mixed is None:
        mixed = noise is not None and noise.incoherent
    if noise is not None and noise.incoherent and not mixed:
        raise ValueError("depolarizing/amplitude-damping noise requires mixed-state simulation")
    n = circuit.n_qubits
    _check_width(n, mixed)
    angles, b = _resolve_angles(circuit, bindings, batch)
    incoherent = noise is not None and noise.incoherent
    if fuse and not incoherent:
        psi = _run_fused(n, circuit.gates, angles, noise, b)
        return psi if not mixed else psi[:, :, None] * np.conj(psi[:, None, :])
    dim = 1 << n
    if mixed:
        arr = np.zeros((b, dim, dim), dtype=complex)
        arr[:, 0, 0] = 1.0
    else:
        arr = np.zeros((b, dim), dtype=complex)
        arr[:, 0] = 1.0
    for gate, theta in zip(circuit.gates, angles):
        arr = _step(arr, n, gate, theta, noise, mixed)
    return arr


def _z_signs(n: int) -> np.ndarray:
    idx = np.arange(1 << n)[:, None]
    return 1.0 - 2.0 * ((idx >> np.arange(n)[None, :]) & 1)


def _z_after(psi: np.ndarray, u: np.ndarray, q: int) -> np.ndarray:
    """<Z_q> of ``u`` applied to qubit ``q`` of ``psi``, via the 2x2 reduced state."""
    x = psi.reshape(psi.shape[0], -1, 2, 1 << q)
    x0, x1 = x[:, :, 0, :], x[:, :, 1, :]
    r00 = np.sum(np.abs(x0) ** 2, axis=(1, 2))
    r11 = np.sum(np.abs(x1) ** 2, axis=(1, 2))
    r01 = np.sum(x0 * np.conj(x1), axis=(1, 2))
    u = np.broadcast_to(u, (psi.shape[0], 2, 2))
    # Z-weight of row a of U rho U^dagger, summed with sign (+ for a=0, - for a=1)
    w = np.abs(u[:, :, 0]) ** 2 * r00[:, None] + np.abs(u[:, :, 1]) ** 2 * r11[:, None]
    w = w + 2 * np.real(u[:, :, 0] * np.conj(u[:, :, 1]) * r01[:, None])
    return w[:, 0] - w[:, 1]


def _probs(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 2:
        return np.abs(arr) ** 2
    return np.real(np.diagonal(arr, axis1=1, axis2=2))


def expectations(
    circuit: CircuitSpec,
    bindings: Mapping[str, float | np.ndarray] | None = None,
    *,
    noise: NoiseModel | None = None,
    shots: int | None = None,
    rng: np.random.Generator | None = None,
    batch: int | None = None,
) -> np.ndarray:
    """Per-qubit ``<Z>`` for every batch element, shape ``(B, n_qubits)``.

    ``shots=None`` gives exact values; otherwise each entry is the mean of
    ``shots`` simulated single-qubit readouts.
    """
    n = circuit.n_qubits
    if noise is not None and noise.incoherent:
        z = _probs(run(circuit, bindings, noise=noise, batch=batch)) @ _z_signs(n)
    else:
        _check_width(n, False)
        angles, b = _resolve_angles(circuit, bindings, batch)
        psi, tail = _run_fused(n, circuit.gates, angles, noise, b, defer_tail=True)
        z = np.abs(psi) ** 2 @ _z_signs(n)
        for q, u in tail.items():
            z[:, q] = _z_after(psi, u, q)
    flip = noise.measurement_flip if noise is not None else 0.0
    z = (1 - 2 * flip) * z
    if shots is None:
        return z
    if shots < 1:
        raise ValueError("shots must be >= 1")
    if rng is None:
        raise ValueError("shot sampling needs an rng")
    return _sample(z, shots, rng)


def _sample(z_exact: np.ndarray, shots: int, rng: np.random.Generator) -> np.ndarray:
    p0 = np.clip((1 + z_exact) / 2, 0.0, 1.0)
    n0 = rng.binomial(shots, p0)
    return (2 * n0 - shots) / shots


# -- single-state API -----------------------------------------------------------


def apply_gate(state: QuantumState, gate: Gate, noise: NoiseModel | None = None) -> QuantumState:
    """Return the state after ``gate`` (and, if given, its noise channels)."""
    if gate.is_named:
        raise UnboundParameterError(gate.param)
    if any(q >= state.n_qubits for q in gate.qubits):
        raise ValueError(f"{gate} addresses a qubit outside the {state.n_qubits}-qubit register")
    mixed = state.mode == "mixed"
    if noise is not None and noise.incoherent and not mixed:
        raise ValueError("noisy gate application requires a mixed state")
    theta = None if gate.param is None else np.asarray(float(gate.param))
    arr = _step(state.data[None], state.n_qubits, gate, theta, noise, mixed)
    return QuantumState(arr[0], state.n_qubits)


def expectation_z(state: QuantumState, qubit: int, noise: NoiseModel | None = None) -> float:
    """Exact ``<Z_qubit>``, scaled by ``1 - 2 p`` for readout flip probability ``p``."""
    if not 0 <= qubit < state.n_qubits:
        raise ValueError(f"qubit {qubit} out of range")
    z = float(state.probabilities() @ _z_signs(state.n_qubits)[:, qubit])
    if noise is not None:
        z *= 1 - 2 * noise.measurement_flip
    return z


def sample_shots(
    state: QuantumState, qubit: int, shots: int, seed: int | None = None, noise: NoiseModel | None = None
) -> float:
    """Estimate ``<Z_qubit>`` as ``(n0 - n1) / shots`` from simulated readouts."""
    if shots < 1:
        raise ValueError("shots must be >= 1")
    z = expectation_z(state, qubit, noise)
    return float(_sample(np.array([z]), shots, np.random.default_rng(seed))[0])


def parameter_shift_grad(
    circuit: CircuitSpec,
    bindings: Mapping[str, float],
    observable: int,
    noise: NoiseModel | None = None,
    *,
    shots: int | None = None,
    seed: int | None = None,
) -> np.ndarray:
    """Gradient of ``<Z_observable>`` w.r.t. ``circuit.parameters``.

    Each occurrence of a parameter is shifted by +/- pi/2 on its own and the
    contributions are summed, so a name may appear in several gates.
    """
    names = circuit.parameters
    if not names:
        return np.zeros(0)
    for g in circuit.gates:
        if g.is_named and g.kind not in _ROTATIONS:
            raise ValueError(f"parameter shift is not valid for {g.kind} gates")
    missing = [p for p in names if p not in bindings]
    if missing:
        raise UnboundParameterError(missing[0])

    occurrences = [k for k, g in enumerate(circuit.gates) if g.is_named]
    n_eval = 2 * len(occurrences)
    # give every occurrence its own column so it can be shifted independently
    gates = list(circuit.gates)
    cols = {}
    for j, k in enumerate(occurrences):
        key = f"__occ{j}"
        cols[key] = np.full(n_eval, float(bindings[gates[k].param]))
        cols[key][2 * j] += np.pi / 2
        cols[key][2 * j + 1] -= np.pi / 2
        gates[k] = replace(gates[k], param=key)
    shifted = CircuitSpec(circuit.n_qubits, tuple(gates))
    rng = np.random.default_rng(seed) if shots is not None else None
    z = expectations(shifted, cols, noise=noise, shots=shots, rng=rng)[:, observable]
    per_occ = 0.5 * (z[0::2] - z[1::2])
    grad = np.zeros(len(names))
    for j, k in enumerate(occurrences):
        grad[names.index(circuit.gates[k].param)] += per_occ[j]
    return grad
