"""Acceptance checks at full protocol scale.

Each test reports a single PASS/FAIL line (collected in the terminal summary)
and then asserts it. The training-based checks share one set of fits through
the harness cache: 5 seeds, 1000 epochs, exact expectations.
"""

import time
import timeit

import numpy as np
import pytest

import oracles
from qpflab import benchcli as bc
from qpflab import neural as nn
from qpflab.benchcli import ExperimentConfig
from qpflab.gridmodel import builtin_grid, power_injections, solve_newton_raphson
from qpflab.qsim import CircuitSpec, Gate, NoiseModel, expectations, parameter_shift_grad, run
from qpflab.surrogates import QcnnParams, QcnnSpec, QnnSpec, hybrid_backward, qcnn_forward

pytestmark = pytest.mark.acceptance

QUANTUM = ("qnn", "qcnn")


def median(records, model, sweep, attr="test_mse"):
    vals = [getattr(r, attr) for r in records if r.ok and r.model == model and r.sweep == sweep]
    return float(np.median(vals)) if vals else float("nan")


@pytest.fixture(scope="module")
def generalization():
    t0 = time.perf_counter()
    recs = bc.run_experiment(ExperimentConfig("generalization"))
    return recs, time.perf_counter() - t0


@pytest.fixture(scope="module")
def robustness(generalization):
    return bc.run_experiment(ExperimentConfig("robustness", models=("nn", "qcnn"), noise_levels=(0.01, 0.10)))


@pytest.fixture(scope="module")
def trainsize(generalization):
    return bc.run_experiment(ExperimentConfig("trainsize", train_sizes=(128, 512)))


# -- 1 ------------------------------------------------------------------------------------


def test_newton_raphson_correctness(verdict):
    g = builtin_grid("feeder4")
    sol = solve_newton_raphson(g)
    p, q = power_injections(g, sol.v, sol.delta_rad)
    pq = g.pq_indices
    round_trip = max(np.max(np.abs(p[pq] + g.p_load[pq])), np.max(np.abs(q[pq] + g.q_load[pq])))
    per_solve = min(timeit.repeat(lambda: solve_newton_raphson(g), number=50, repeat=7)) / 50
    ok = sol.converged and sol.final_residual_norm < 1e-8 and sol.iterations <= 10 and round_trip < 1e-8
    ok = ok and per_solve < 1e-3
    verdict(1, "NR on the 4-bus feeder", ok,
            f"iters={sol.iterations} mismatch={sol.final_residual_norm:.2e} round_trip={round_trip:.2e} "
            f"time={per_solve * 1e3:.3f} ms")


# -- 2 ------------------------------------------------------------------------------------


def _shift_vs_fd(rng):
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 7))
        gates = oracles.random_gate_list(rng, n, int(rng.integers(3, 16))) + [("ry", (0,))]
        names, spec_gates = [], []
        for kind, qubits in gates:
            if kind in ("ry", "rz"):
                names.append(f"t{len(names)}")
                spec_gates.append(Gate(kind, qubits, names[-1]))
            else:
                spec_gates.append(Gate(kind, qubits))
        circ = CircuitSpec(n, spec_gates)
        theta = rng.uniform(-np.pi, np.pi, len(names))
        obs = int(rng.integers(n))
        grad = parameter_shift_grad(circ, dict(zip(names, theta)), obs)
        fd = oracles.central_difference(lambda t: expectations(circ, dict(zip(names, t)))[0, obs], theta, 1e-5)
        worst = max(worst, float(np.max(np.abs(grad - fd))))
    return worst


def _mlp_vs_fd(rng):
    spec = nn.MlpSpec((6, 12, 12, 6))
    params = nn.init_params(spec, rng)
    x, y = rng.normal(size=(16, 6)), rng.normal(size=(16, 6))
    pred, cache = nn.forward(spec, params, x)
    grads, _ = nn.backward(spec, params, cache, nn.mse_grad(pred, y))
    fds = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + 1e-6
            up = nn.mse_loss(nn.forward(spec, params, x)[0], y)
            p[idx] = old - 1e-6
            down = nn.mse_loss(nn.forward(spec, params, x)[0], y)
            p[idx] = old
            g[idx] = (up - down) / 2e-6
        fds.append(g)
    a = np.concatenate([g.ravel() for g in grads])
    b = np.concatenate([g.ravel() for g in fds])
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def _hybrid_vs_fd(rng):
    spec = QcnnSpec(nn.MlpSpec((2, 3, 2)), QnnSpec(2), nn.MlpSpec((2, 3, 2)))
    params = QcnnParams(nn.init_params(spec.encoder, rng), rng.uniform(-1, 1, 4), nn.init_params(spec.decoder, rng))
    x = rng.normal(size=(5, 2))
    y = np.c_[rng.uniform(0.9, 1.1, 5), rng.uniform(-5, 5, 5)]
    _, grads, _ = hybrid_backward(spec, params, x, y)
    flat = params.flat()
    worst = 0.0
    for arr, g in zip(flat, grads.flat()):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + 1e-6
            up = nn.mse_loss(qcnn_forward(spec, QcnnParams.from_flat(spec, flat), x), y)
            arr[idx] = old - 1e-6
            down = nn.mse_loss(qcnn_forward(spec, QcnnParams.from_flat(spec, flat), x), y)
            arr[idx] = old
            worst = max(worst, abs((up - down) / 2e-6 - g[idx]))
    return worst


def test_gradient_oracles(verdict):
    rng = np.random.default_rng(20240)
    t0 = time.perf_counter()
    shift = _shift_vs_fd(rng)
    mlp = _mlp_vs_fd(rng)
    hybrid = _hybrid_vs_fd(rng)
    elapsed = time.perf_counter() - t0
    ok = shift <= 1e-6 and mlp <= 1e-5 and hybrid < 1e-4 and elapsed < 30
    verdict(2, "gradient oracles", ok,
            f"shift_max_abs={shift:.1e} mlp_rel={mlp:.1e} hybrid_max_abs={hybrid:.1e} time={elapsed:.1f}s")


# -- 3 ------------------------------------------------------------------------------------


def test_channel_analytics(verdict):
    p, gamma, flip = 0.23, 0.37, 0.11
    errs = {}
    z = expectations(CircuitSpec(1, [Gate.ry(0, 0.0)]), noise=NoiseModel(depolarizing=p))[0, 0]
    ref = oracles.simulate(1, [("ry", (0,))], [0.0], depol=p)[0][0]
    errs["depolarizing"] = max(abs(z - (1 - p)), abs(z - ref))
    z = expectations(CircuitSpec(1, [Gate.ry(0, np.pi)]), noise=NoiseModel(amplitude_damping=gamma))[0, 0]
    ref = oracles.simulate(1, [("ry", (0,))], [np.pi], damp=gamma)[0][0]
    errs["amplitude_damping"] = max(abs(z - (-1 + 2 * gamma)), abs(z - ref))
    circ = CircuitSpec(2, [Gate.ry(0, 0.8), Gate.cnot(0, 1), Gate.ry(1, -0.3)])
    clean = expectations(circ)[0]
    noisy = expectations(circ, noise=NoiseModel(measurement_flip=flip))[0]
    rho = run(circ, mixed=True)[0]
    dm = np.array([np.real(np.trace(oracles.on_qubit(oracles.Z, q, 2) @ rho)) for q in range(2)])
    errs["measurement_flip"] = float(np.max(np.abs(noisy - (1 - 2 * flip) * dm)))
    errs["measurement_flip"] = max(errs["measurement_flip"], float(np.max(np.abs(noisy - (1 - 2 * flip) * clean))))
    ok = all(e <= 1e-10 for e in errs.values())
    verdict(3, "channel closed forms", ok, " ".join(f"{k}={v:.1e}" for k, v in errs.items()))


# -- 4 ------------------------------------------------------------------------------------


def test_shot_convergence(verdict):
    t0 = time.perf_counter()
    cfg = ExperimentConfig("shots_sweep", models=(bc.CIRCUIT,))
    recs = bc.run_experiment(cfg)
    fit = bc.summarize(recs, cfg)["derived"][bc.CIRCUIT]
    elapsed = time.perf_counter() - t0
    slope, ratio = fit["loglog_slope"], fit["ratio_1024_to_16384"]
    ok = abs(slope + 0.5) <= 0.1 and ratio <= 2.0 and elapsed < 60
    verdict(4, "shot convergence", ok, f"slope={slope:.3f} err1024/err16384={ratio:.2f} time={elapsed:.1f}s")


# -- 5 ------------------------------------------------------------------------------------


def test_directional_generalization(generalization, verdict):
    recs, elapsed = generalization
    sweep = "corruption=0.1"
    test = {m: median(recs, m, sweep) for m in ("nn", "qnn", "qcnn")}
    final = {m: median(recs, m, sweep, "train_mse") for m in ("nn", "qcnn")}
    std = {m: median(recs, m, sweep, "epoch_std") for m in ("nn", "qcnn")}
    checks = {
        "test qcnn<nn": test["qcnn"] < test["nn"],
        "test qnn<nn": test["qnn"] < test["nn"],
        "final_train qcnn<nn": final["qcnn"] < final["nn"],
        "epoch_std qcnn<nn": std["qcnn"] < std["nn"],
    }
    failed = [k for k, v in checks.items() if not v]
    n_seeds = len({r.seed for r in recs})
    verdict(5, "directional generalization (median of %d seeds)" % n_seeds, not failed and n_seeds >= 5,
            f"test nn={test['nn']:.3f} qnn={test['qnn']:.3f} qcnn={test['qcnn']:.3f}; "
            f"final_train nn={final['nn']:.3f} qcnn={final['qcnn']:.3f}; "
            f"epoch_std nn={std['nn']:.3f} qcnn={std['qcnn']:.3f}; time={elapsed / 60:.1f} min"
            + (f"; failed: {', '.join(failed)}" if failed else ""))


# -- 6 ------------------------------------------------------------------------------------


def test_robustness_trend(robustness, verdict):
    ratio = {m: median(robustness, m, "corruption=0.1") / median(robustness, m, "corruption=0.01")
             for m in ("nn", "qcnn")}
    ok = ratio["nn"] >= 1.5 and ratio["qcnn"] < ratio["nn"]
    verdict(6, "robustness trend", ok, f"test_mse(10%)/test_mse(1%) nn={ratio['nn']:.2f} qcnn={ratio['qcnn']:.2f}")


# -- 7 ------------------------------------------------------------------------------------


def test_training_size_trend(trainsize, verdict):
    nn512 = median(trainsize, "nn", "train_size=512")
    nn128 = median(trainsize, "nn", "train_size=128")
    qcnn128 = median(trainsize, "qcnn", "train_size=128")
    verdict(7, "training-size trend", nn512 > qcnn128,
            f"nn@512={nn512:.3f} nn@128={nn128:.3f} qcnn@128={qcnn128:.3f}")


# -- 8 ------------------------------------------------------------------------------------


def test_range_invariant(generalization, robustness, trainsize, verdict):
    recs = list(generalization[0]) + list(robustness) + list(trainsize)
    recs += bc.run_experiment(ExperimentConfig("shots_sweep", models=("qcnn",), shot_counts=(16, 1024)))
    recs += bc.run_experiment(ExperimentConfig("noise_sweep", noise_grid=(0.0, 0.1)))
    quantum = [r for r in recs if r.ok and r.model in QUANTUM]
    lo_v = min(r.extra["pred_v_min"] for r in quantum)
    hi_v = max(r.extra["pred_v_max"] for r in quantum)
    lo_d = min(r.extra["pred_delta_min"] for r in quantum)
    hi_d = max(r.extra["pred_delta_max"] for r in quantum)
    ok = 0.85 <= lo_v and hi_v <= 1.15 and -8 <= lo_d and hi_d <= 8 and len(quantum) > 0
    verdict(8, "prediction range", ok,
            f"{len(quantum)} quantum runs; v in [{lo_v:.4f}, {hi_v:.4f}], delta in [{lo_d:.3f}, {hi_d:.3f}]")


# -- 9 ------------------------------------------------------------------------------------

SMALL = (
    "pool_size = 300\nn_points = 64\nepochs = 2\nseeds = [0, 1]\nshots = 64\nepoch_logs = true\n"
    "train_sizes = [16, 32]\ndepths = [0, 2]\nhyper_budget = 3\nshot_counts = [16, 64]\n"
    "noise_grid = [0.0, 0.1]\nqubit_counts = [1, 2]\nextreme_points = 8\n"
)


def test_determinism(tmp_path, verdict):
    saved = (dict(bc._GRIDS), dict(bc._DATA), dict(bc._FITS))
    mismatched, n_files = [], 0
    try:
        for exp in bc.EXPERIMENTS:
            cfg = tmp_path / f"{exp}.toml"
            cfg.write_text(f'experiment = "{exp}"\n' + SMALL)
            outs = []
            for k in range(2):
                bc.clear_cache()
                out = tmp_path / f"{exp}_{k}"
                bc.main([exp, "--config", str(cfg), "--out", str(out)])
                outs.append(out)
            for p in sorted(outs[0].rglob("*")):
                if p.is_file():
                    n_files += 1
                    twin = outs[1] / p.relative_to(outs[0])
                    if not twin.exists() or twin.read_bytes() != p.read_bytes():
                        mismatched.append(str(p.relative_to(tmp_path)))
    finally:
        bc.clear_cache()
        bc._GRIDS.update(saved[0])
        bc._DATA.update(saved[1])
        bc._FITS.update(saved[2])
    verdict(9, "bitwise reruns", not mismatched and n_files > 0,
            f"{len(bc.EXPERIMENTS)} experiments, {n_files} files, {len(mismatched)} differ"
            + (f": {mismatched[:3]}" if mismatched else ""))
