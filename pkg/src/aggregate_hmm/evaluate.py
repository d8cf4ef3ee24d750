"""Held-out likelihood metrics and parameter recovery distances."""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .inference import forward_log_likelihood
from .model import HmmParams, TrajectorySet
from .tree import FLOOR

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("iter", "delta_nll", "nll_learned", "nll_truth", "d", "T", "N", "M", "seed",
                 "nll_learned_per_step", "nll_learned_per_dim")


def nll(params: HmmParams, test: TrajectorySet) -> float:
    """Mean negative log-likelihood per test trajectory.

    Zero-probability paths are scored at ``log(1e-300)`` and logged.
    """
    if test.N == 0:
        raise ValueError("empty test set")
    ll = forward_log_likelihood(params, test.o)
    dead = ~np.isfinite(ll)
    if dead.any():
        log.warning("%d test paths have zero likelihood; floored at 1e-300", int(dead.sum()))
        ll = np.where(dead, np.log(FLOOR), ll)
    return float(-ll.mean())


def delta_nll(learned: HmmParams, truth: HmmParams, test: TrajectorySet) -> float:
    return nll(learned, test) - nll(truth, test)


def _block_arrays(params: HmmParams) -> Dict[str, np.ndarray]:
    out = {"pi": params.pi[None, :], "A": params.A}
    if params.is_discrete:
        out["B"] = params.emission.B
    else:
        out["mu"] = params.emission.means
    return out


def param_distance(a: HmmParams, b: HmmParams) -> Dict[str, float]:
    """Largest half-L1 row distance in each parameter block."""
    blocks_a, blocks_b = _block_arrays(a), _block_arrays(b)
    if blocks_a.keys() != blocks_b.keys():
        raise ValueError("parameters have different emission kinds")
    out = {}
    for name in blocks_a:
        xa, xb = blocks_a[name], blocks_b[name]
        if xa.shape != xb.shape:
            raise ValueError(f"block {name} shapes differ: {xa.shape} vs {xb.shape}")
        out[name] = float(0.5 * np.abs(xa - xb).sum(axis=1).max())
    return out


def permute_states(params: HmmParams, perm) -> HmmParams:
    """Relabel hidden states: new state ``i`` is old state ``perm[i]``."""
    perm = np.asarray(perm)
    em = params.emission
    if params.is_discrete:
        emission = type(em)(em.B[perm])
    else:
        emission = type(em)(em.means[perm], em.covs[perm])
    return params.replace(pi=params.pi[perm], A=params.A[np.ix_(perm, perm)], emission=emission)


def best_permutation(learned: HmmParams, truth: HmmParams, max_states: int = 8):
    """State relabeling of ``learned`` that minimizes the summed block distances.

    Exhaustive search, limited to ``max_states`` states.
    """
    d = learned.num_states
    if d > max_states:
        raise ValueError(f"exhaustive permutation search limited to {max_states} states")
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(d)):
        cost = sum(param_distance(permute_states(learned, perm), truth).values())
        if cost < best_cost:
            best, best_cost = perm, cost
    return best, param_distance(permute_states(learned, best), truth)


def recovery_report(learned: HmmParams, truth: HmmParams) -> Dict[str, object]:
    """Block distances before and after the best relabeling of ``learned``."""
    perm, aligned = best_permutation(learned, truth)
    return {"raw": param_distance(learned, truth), "aligned": aligned,
            "permutation": list(perm)}


@dataclass
class LearningCurve:
    """Test-set ΔNLL after each EM iteration.

    ``obs_dim`` is the per-step observation dimension (1 for symbols) and
    only feeds the per-dimension NLL column.
    """

    d: int
    T: int
    N: int
    M: int
    seed: int
    delta_nll: List[float] = field(default_factory=list)
    nll_learned: List[float] = field(default_factory=list)
    nll_truth: float = float("nan")
    obs_dim: int = 1

    def record(self, learned_nll: float) -> None:
        self.nll_learned.append(learned_nll)
        self.delta_nll.append(learned_nll - self.nll_truth)

    def rows(self):
        for i, (dn, nl) in enumerate(zip(self.delta_nll, self.nll_learned), start=1):
            yield (i, dn, nl, self.nll_truth, self.d, self.T, self.N, self.M, self.seed,
                   nl / self.T, nl / (self.T * self.obs_dim))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CURVE_COLUMNS)
            for row in self.rows():
                writer.writerow([_fmt(v) for v in row])

    @classmethod
    def read_csv(cls, path) -> "LearningCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        first = rows[0]
        T = int(first["T"])
        per_dim = float(first.get("nll_learned_per_dim") or 0.0)
        obs_dim = round(float(first["nll_learned"]) / (per_dim * T)) if per_dim else 1
        curve = cls(d=int(first["d"]), T=T, N=int(first["N"]),
                    M=int(first["M"]), seed=int(first["seed"]),
                    nll_truth=float(first["nll_truth"]), obs_dim=obs_dim)
        for row in rows:
            curve.nll_learned.append(float(row["nll_learned"]))
            curve.delta_nll.append(float(row["delta_nll"]))
        return curve


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(v)
    return f"{v:.10g}"
