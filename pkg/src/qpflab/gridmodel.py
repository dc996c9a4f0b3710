"""Grid description, AC power-flow equations and Newton-Raphson solver.

Conventions
-----------
* Bus loads are stored as *demand* (consumption is positive); the net
  injection entering the power-flow equations is ``-load``.
* Angles are radians inside the solver and degrees at every public boundary
  (``GridCase.delta_slack``, ``PowerFlowSolution.delta``).
* Only the slack bus and PQ buses are modelled.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

__all__ = [
    "GridError",
    "GridCase",
    "PowerFlowSolution",
    "build_grid",
    "load_grid",
    "builtin_grid",
    "power_injections",
    "pf_mismatch",
    "pf_jacobian",
    "solve_newton_raphson",
]

_DATA_DIR = Path(__file__).parent / "data"
_BUILTIN = {"feeder4": "feeder4.toml", "feeder33": "feeder33.toml"}

_TOP_FIELDS = {"name", "source", "base_mva", "base_kv", "bus", "line"}
_BUS_FIELDS = {"id", "type", "p", "q", "v", "angle"}
_LINE_FIELDS = {"from", "to", "r", "x"}


class GridError(ValueError):
    """Invalid grid description."""


@dataclass(frozen=True)
class GridCase:
    """Immutable network model.

    ``p_load``/``q_load`` hold per-unit demand for every bus (zero at the
    slack). ``g`` and ``b`` are the real and imaginary parts of the bus
    admittance matrix.
    """

    bus_ids: tuple[int, ...]
    slack_index: int
    p_load: np.ndarray
    q_load: np.ndarray
    g: np.ndarray
    b: np.ndarray
    v_slack: float = 1.0
    delta_slack: float = 0.0
    name: str = ""
    meta: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for arr in (self.p_load, self.q_load, self.g, self.b):
            arr.setflags(write=False)

    @property
    def n_buses(self) -> int:
        return len(self.bus_ids)

    @property
    def pq_indices(self) -> np.ndarray:
        return np.array([i for i in range(self.n_buses) if i != self.slack_index])

    @property
    def n_pq(self) -> int:
        return self.n_buses - 1

    @property
    def ybus(self) -> np.ndarray:
        return self.g + 1j * self.b

    def with_loads(self, p_pq, q_pq) -> "GridCase":
        """Return a copy whose PQ-bus demands are replaced by ``p_pq``/``q_pq``."""
        p_pq = np.asarray(p_pq, dtype=float)
        q_pq = np.asarray(q_pq, dtype=float)
        if p_pq.shape != (self.n_pq,) or q_pq.shape != (self.n_pq,):
            raise GridError(f"expected {self.n_pq} PQ-bus loads, got {p_pq.shape} / {q_pq.shape}")
        p = np.zeros(self.n_buses)
        q = np.zeros(self.n_buses)
        p[self.pq_indices] = p_pq
        q[self.pq_indices] = q_pq
        return replace(self, p_load=p, q_load=q)


@dataclass(frozen=True)
class PowerFlowSolution:
    v: np.ndarray
    delta: np.ndarray  # degrees
    iterations: int
    final_residual_norm: float
    converged: bool

    @property
    def delta_rad(self) -> np.ndarray:
        return np.deg2rad(self.delta)


def build_grid(case_spec: Mapping[str, Any]) -> GridCase:
    """Assemble a :class:`GridCase` from a parsed grid description.

    ``case_spec`` has the layout of the TOML grid files: a ``bus`` list with
    ``id``, ``type`` (``"slack"`` or ``"pq"``), ``p``, ``q`` (demand, pu) and
    optionally ``v``/``angle`` (degrees) for the slack, and a ``line`` list
    with ``from``, ``to``, ``r``, ``x`` (series impedance, pu).
    """
    unknown = set(case_spec) - _TOP_FIELDS
    if unknown:
        raise GridError(f"unknown top-level fields: {sorted(unknown)}")
    buses = list(case_spec.get("bus", []))
    lines = list(case_spec.get("line", []))
    if len(buses) < 2:
        raise GridError("a grid needs at least two buses")
    if not lines:
        raise GridError("a grid needs at least one line")

    index: dict[int, int] = {}
    slack = []
    p = np.zeros(len(buses))
    q = np.zeros(len(buses))
    v_slack, delta_slack = 1.0, 0.0
    for k, rec in enumerate(buses):
        unknown = set(rec) - _BUS_FIELDS
        if unknown:
            raise GridError(f"bus record {rec!r}: unknown fields {sorted(unknown)}")
        bid = int(rec["id"])
        if bid in index:
            raise GridError(f"duplicate bus id {bid}")
        index[bid] = k
        kind = str(rec.get("type", "pq")).lower()
        if kind == "slack":
            slack.append(k)
            v_slack = float(rec.get("v", 1.0))
            delta_slack = float(rec.get("angle", 0.0))
        elif kind == "pq":
            if "v" in rec or "angle" in rec:
                raise GridError(f"bus {bid}: v/angle are only valid on the slack bus")
            p[k] = float(rec.get("p", 0.0))
            q[k] = float(rec.get("q", 0.0))
        else:
            raise GridError(f"bus {bid}: unsupported bus type {kind!r}")
    if len(slack) != 1:
        raise GridError(f"exactly one slack bus required, found {len(slack)}")

    n = len(buses)
    y = np.zeros((n, n), dtype=complex)
    for rec in lines:
        unknown = set(rec) - _LINE_FIELDS
        if unknown:
            raise GridError(f"line record {rec!r}: unknown fields {sorted(unknown)}")
        try:
            i, j = index[int(rec["from"])], index[int(rec["to"])]
        except KeyError as exc:
            raise GridError(f"line {rec!r} references unknown bus {exc.args[0]}") from None
        if i == j:
            raise GridError(f"line {rec!r} connects a bus to itself")
        z = complex(float(rec.get("r", 0.0)), float(rec.get("x", 0.0)))
        if z == 0:
            raise GridError(f"line {rec!r} has zero impedance")
        ys = 1.0 / z
        y[i, i] += ys
        y[j, j] += ys
        y[i, j] -= ys
        y[j, i] -= ys

    return GridCase(
        bus_ids=tuple(int(r["id"]) for r in buses),
        slack_index=slack[0],
        p_load=p,
        q_load=q,
        g=y.real.copy(),
        b=y.imag.copy(),
        v_slack=v_slack,
        delta_slack=delta_slack,
        name=str(case_spec.get("name", "")),
        meta={k: case_spec[k] for k in ("source", "base_mva", "base_kv") if k in case_spec},
    )


def load_grid(path) -> GridCase:
    """Parse a TOML grid file (or a builtin name such as ``"feeder4"``)."""
    if str(path) in _BUILTIN:
        return builtin_grid(str(path))
    with open(path, "rb") as fh:
        return build_grid(tomllib.load(fh))


def builtin_grid(name: str) -> GridCase:
    try:
        fname = _BUILTIN[name]
    except KeyError:
        raise GridError(f"no builtin grid named {name!r}; choose from {sorted(_BUILTIN)}") from None
    return load_grid(_DATA_DIR / fname)


def _check_state(grid: GridCase, v, delta):
    v = np.asarray(v, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if v.shape != (grid.n_buses,) or delta.shape != (grid.n_buses,):
        raise GridError(
            f"state vectors must have length {grid.n_buses}, got {v.shape} and {delta.shape}"
        )
    return v, delta


def power_injections(grid: GridCase, v, delta) -> tuple[np.ndarray, np.ndarray]:
    """Net injections ``(p_i, q_i)`` implied by the voltages; ``delta`` in radians."""
    v, delta = _check_state(grid, v, delta)
    dd = delta[:, None] - delta[None, :]
    vv = v[:, None] * v[None, :]
    cos, sin = np.cos(dd), np.sin(dd)
    p = np.sum(vv * (grid.g * cos + grid.b * sin), axis=1)
    q = np.sum(vv * (grid.g * sin - grid.b * cos), axis=1)
    return p, q


def pf_mismatch(grid: GridCase, v, delta) -> np.ndarray:
    """Specified minus computed injections, ``[dp_pq..., dq_pq...]``.

    ``delta`` is in radians. The slack bus is excluded.
    """
    p, q = power_injections(grid, v, delta)
    pq = grid.pq_indices
    dp = -grid.p_load[pq] - p[pq]
    dq = -grid.q_load[pq] - q[pq]
    return np.concatenate([dp, dq])


def pf_jacobian(grid: GridCase, v, delta) -> np.ndarray:
    """Jacobian of the computed PQ injections w.r.t. ``[delta_pq, v_pq]``.

    Rows follow ``[p_pq, q_pq]``; this is the negative of the Jacobian of
    :func:`pf_mismatch`.
    """
    v, delta = _check_state(grid, v, delta)
    V = v * np.exp(1j * delta)
    Y = grid.ybus
    ibus = Y @ V
    vnorm = V / np.abs(V)
    # diag(V) conj(Y diag(Vn)) + diag(conj(I) Vn)
    ds_dvm = V[:, None] * np.conj(Y * vnorm[None, :])
    ds_dvm[np.diag_indices_from(ds_dvm)] += np.conj(ibus) * vnorm
    # j diag(V) conj(diag(I) - Y diag(V))
    ds_dva = -1j * V[:, None] * np.conj(Y * V[None, :])
    ds_dva[np.diag_indices_from(ds_dva)] += 1j * V * np.conj(ibus)
    pq = grid.pq_indices
    sub = np.ix_(pq, pq)
    return np.block([
        [ds_dva.real[sub], ds_dvm.real[sub]],
        [ds_dva.imag[sub], ds_dvm.imag[sub]],
    ])


def _polar_terms(g, b, v, delta, pq):
    """Injections and the PQ-block Jacobian from one set of trig evaluations.

    Rows of the Jacobian follow ``[p_pq, q_pq]`` and columns
    ``[delta_pq, v_pq]``, matching :func:`pf_jacobian`.
    """
    dd = delta[:, None] - delta[None, :]
    cos, sin = np.cos(dd), np.sin(dd)
    a = g * cos + b * sin  # feeds p
    c = g * sin - b * cos  # feeds q
    vv = v[:, None] * v[None, :]
    p = np.sum(vv * a, axis=1)
    q = np.sum(vv * c, axis=1)
    gd, bd = np.diag(g), np.diag(b)
    dp_dd = vv * c
    dq_dd = -vv * a
    dp_dv = v[:, None] * a
    dq_dv = v[:, None] * c
    i = np.arange(len(v))
    dp_dd[i, i] = -q - bd * v * v
    dq_dd[i, i] = p - gd * v * v
    dp_dv[i, i] = p / v + gd * v
    dq_dv[i, i] = q / v - bd * v
    m = len(pq)
    jac = np.empty((2 * m, 2 * m))
    rows, cols = pq[:, None], pq[None, :]
    jac[:m, :m] = dp_dd[rows, cols]
    jac[:m, m:] = dp_dv[rows, cols]
    jac[m:, :m] = dq_dd[rows, cols]
    jac[m:, m:] = dq_dv[rows, cols]
    return p, q, jac


def solve_newton_raphson(grid: GridCase, tol: float = 1e-8, max_iter: int = 50) -> PowerFlowSolution:
    """Full Newton-Raphson from a flat start.

    Stops when the infinity norm of the mismatch is ``<= tol``. A singular
    Jacobian or an exhausted iteration budget yields ``converged=False`` with
    the best iterate seen.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    n = grid.n_buses
    pq = grid.pq_indices
    m = len(pq)
    v = np.ones(n)
    delta = np.zeros(n)
    v[grid.slack_index] = grid.v_slack
    delta[grid.slack_index] = np.deg2rad(grid.delta_slack)

    g, b = grid.g, grid.b
    spec = -np.concatenate([grid.p_load[pq], grid.q_load[pq]])
    p, q, jac = _polar_terms(g, b, v, delta, pq)
    f = spec - np.concatenate([p[pq], q[pq]])
    norm = float(np.max(np.abs(f)))
    best = (norm, v.copy(), delta.copy(), 0)
    it = 0
    while norm > tol and it < max_iter:
        try:
            step = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError:
            break
        it += 1
        delta[pq] += step[:m]
        v[pq] += step[m:]
        p, q, jac = _polar_terms(g, b, v, delta, pq)
        f = spec - np.concatenate([p[pq], q[pq]])
        norm = float(np.max(np.abs(f)))
        if not np.isfinite(norm):
            break
        if norm < best[0]:
            best = (norm, v.copy(), delta.copy(), it)

    converged = bool(np.isfinite(norm) and norm <= tol)
    if converged:
        best = (norm, v, delta, it)
    norm, v, delta, _ = best
    deg = np.rad2deg(delta)
    deg[grid.slack_index] = grid.delta_slack
    return PowerFlowSolution(v=v, delta=deg, iterations=it, final_residual_norm=norm, converged=converged)
