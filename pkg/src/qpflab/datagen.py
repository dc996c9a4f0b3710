"""Load-scenario sampling, Newton-Raphson labelling and training-set corruption."""

from __future__ import annotations

import json
import logging
import warnings
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .gridmodel import GridCase, solve_newton_raphson

__all__ = [
    "SamplePool",
    "LabeledDataset",
    "DatasetError",
    "derive_seed",
    "generate_pool",
    "draw_and_label",
    "corrupt",
    "split_counts",
]

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")


class DatasetError(RuntimeError):
    pass


def derive_seed(seed: int, tag: str) -> int:
    """Stable child seed for a named random stream."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode())])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class SamplePool:
    """Unlabelled load scenarios for the PQ buses (per-unit demand)."""

    p: np.ndarray  # (n, m)
    q: np.ndarray  # (n, m)
    seed: int
    std_frac: float
    base_case: GridCase

    def __len__(self) -> int:
        return self.p.shape[0]


@dataclass(frozen=True)
class LabeledDataset:
    """Features ``x = (p_1..p_m, q_1..q_m)`` and labels ``y = (v_1..v_m, delta_1..delta_m)``.

    Angles in ``y`` are degrees. ``split`` tags each record with one of
    ``train``, ``validation`` or ``test``.
    """

    x: np.ndarray
    y: np.ndarray
    split: np.ndarray
    pool_index: np.ndarray
    provenance: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n_pq(self) -> int:
        return self.x.shape[1] // 2

    def mask(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise KeyError(split)
        return self.split == split

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        m = self.mask(split)
        return self.x[m], self.y[m]

    def columns(self) -> list[str]:
        m = self.n_pq
        return (
            [f"p_{i + 1}" for i in range(m)]
            + [f"q_{i + 1}" for i in range(m)]
            + [f"v_{i + 1}" for i in range(m)]
            + [f"delta_{i + 1}" for i in range(m)]
            + ["split"]
        )

    def to_csv(self, path) -> None:
        """Write the records plus a ``<name>.meta.json`` sidecar."""
        path = Path(path)
        lines = [",".join(self.columns())]
        for xi, yi, si in zip(self.x, self.y, self.split):
            lines.append(",".join([*(repr(float(v)) for v in xi), *(repr(float(v)) for v in yi), str(si)]))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        meta = dict(self.provenance, pool_index=[int(i) for i in self.pool_index])
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def from_csv(cls, path) -> "LabeledDataset":
        path = Path(path)
        rows = path.read_text(encoding="utf-8").splitlines()
        header = rows[0].split(",")
        if header[-1] != "split" or (len(header) - 1) % 4:
            raise DatasetError(f"unexpected header in {path}")
        m = (len(header) - 1) // 4
        body = [r.split(",") for r in rows[1:] if r]
        num = np.array([[float(v) for v in r[:-1]] for r in body])
        split = np.array([r[-1] for r in body])
        meta_path = path.with_suffix(".meta.json")
        meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
        pool_index = np.array(meta.pop("pool_index", range(len(body))), dtype=int)
        return cls(x=num[:, : 2 * m], y=num[:, 2 * m :], split=split, pool_index=pool_index, provenance=meta)


def generate_pool(grid: GridCase, n: int, std_frac: float = 0.30, seed: int = 0) -> SamplePool:
    """Draw ``n`` load scenarios around the base case.

    Apparent power per bus is Normal(s_base, std_frac * s_base), clamped at
    zero; the base power factor is kept, so ``p = s * pf`` and
    ``q = sqrt(s**2 - p**2)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= std_frac < 1:
        raise ValueError("std_frac must lie in [0, 1)")
    pq = grid.pq_indices
    p0, q0 = grid.p_load[pq], grid.q_load[pq]
    s0 = np.hypot(p0, q0)
    dead = s0 == 0
    if dead.any():
        warnings.warn(
            f"buses {[grid.bus_ids[i] for i in pq[dead]]} have zero base load; held fixed at zero",
            stacklevel=2,
        )
    pf = np.divide(p0, s0, out=np.zeros_like(s0), where=~dead)

    rng = np.random.default_rng(seed)
    s = rng.normal(loc=s0, scale=std_frac * s0, size=(n, len(pq)))
    s = np.maximum(s, 0.0)
    s[:, dead] = 0.0
    p = s * pf
    q = np.sqrt(np.maximum(s**2 - p**2, 0.0))
    return SamplePool(p=p, q=q, seed=seed, std_frac=std_frac, base_case=grid)


def split_counts(k: int) -> tuple[int, int, int]:
    """25/25/50 split; train and validation are floored, test takes the rest."""
    n_train = k // 4
    return n_train, n_train, k - 2 * n_train


def draw_and_label(
    pool: SamplePool,
    k: int,
    grid: GridCase | None = None,
    seed: int = 0,
    *,
    tol: float = 1e-8,
    max_iter: int = 50,
    exclude=(),
) -> LabeledDataset:
    """Sample ``k`` pool records without replacement and label them by NR.

    Records whose solve does not converge are skipped and replaced by the
    next candidate in the shuffled order. Indices in ``exclude`` are never
    drawn.
    """
    grid = pool.base_case if grid is None else grid
    excluded = set(int(i) for i in exclude)
    if k < 1 or k > len(pool) - len(excluded):
        raise DatasetError(f"cannot draw {k} records from a pool of {len(pool)}")
    rng = np.random.default_rng(seed)
    order = [int(i) for i in rng.permutation(len(pool)) if int(i) not in excluded]

    m = grid.n_pq
    pq = grid.pq_indices
    xs, ys, idx = [], [], []
    rejected = 0
    for i in order:
        if len(idx) == k:
            break
        sol = solve_newton_raphson(grid.with_loads(pool.p[i], pool.q[i]), tol=tol, max_iter=max_iter)
        if not sol.converged:
            rejected += 1
            continue
        xs.append(np.concatenate([pool.p[i], pool.q[i]]))
        ys.append(np.concatenate([sol.v[pq], sol.delta[pq]]))
        idx.append(i)
    if len(idx) < k:
        raise DatasetError(f"pool exhausted: only {len(idx)} of {k} samples converged")
    if rejected:
        log.info("discarded %d non-convergent samples", rejected)

    n_train, n_val, _ = split_counts(k)
    split = np.empty(k, dtype=object)
    perm = rng.permutation(k)
    split[perm[:n_train]] = "train"
    split[perm[n_train : n_train + n_val]] = "validation"
    split[perm[n_train + n_val :]] = "test"

    x = np.array(xs).reshape(k, 2 * m)
    y = np.array(ys).reshape(k, 2 * m)
    return LabeledDataset(
        x=x,
        y=y,
        split=split.astype(str),
        pool_index=np.array(idx, dtype=int),
        provenance={
            "grid": grid.name,
            "pool_seed": pool.seed,
            "pool_size": len(pool),
            "std_frac": pool.std_frac,
            "draw_seed": seed,
            "rejected": rejected,
            "nr_tol": tol,
            "corruption": [],
        },
    )


def corrupt(ds: LabeledDataset, level: float, seed: int = 0) -> LabeledDataset:
    """Perturb a random ``floor(level * n_train)`` training records.

    Every feature of a selected record receives ``+/- U[0, 1]`` and every label
    ``+/- U[0, 0.1]``, with independent fair signs. Validation and test
    records are returned untouched.
    """
    if not 0 <= level <= 1:
        raise ValueError("level must lie in [0, 1]")
    train = np.flatnonzero(ds.mask("train"))
    count = int(np.floor(level * len(train)))
    if count == 0:
        return ds
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(train, size=count, replace=False))
    x, y = ds.x.copy(), ds.y.copy()
    sx, sy = (count, x.shape[1]), (count, y.shape[1])
    x[chosen] += rng.choice((-1.0, 1.0), size=sx) * rng.uniform(0.0, 1.0, size=sx)
    y[chosen] += rng.choice((-1.0, 1.0), size=sy) * rng.uniform(0.0, 0.1, size=sy)
    prov = dict(ds.provenance)
    prov["corruption"] = list(prov.get("corruption", [])) + [
        {"level": level, "seed": seed, "records": [int(i) for i in chosen]}
    ]
    return replace(ds, x=x, y=y, provenance=prov)
