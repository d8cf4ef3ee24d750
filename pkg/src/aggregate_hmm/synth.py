"""Synthetic ground truth, trajectory sampling and aggregation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from .learning import EmOptions
from .model import (AggregateSequence, DiscreteEmission, GaussianEmission,
                    HmmParams, TrajectorySet)


@dataclass(frozen=True)
class ExperimentSpec:
    """One synthetic experiment: ``N`` individuals split into ``N/M`` groups."""

    d: int
    T: int
    N: int
    M: int
    kind: str = "discrete"
    seed: int = 0
    em: EmOptions = field(default_factory=EmOptions)
    obs_dim: int = 1

    def __post_init__(self):
        if min(self.d, self.T, self.N, self.M) < 1:
            raise ValueError("d, T, N and M must all be positive")
        if self.N % self.M:
            raise ValueError(f"M={self.M} does not divide N={self.N}")
        if self.kind not in ("discrete", "gaussian"):
            raise ValueError(f"unknown emission kind {self.kind!r}")

    @property
    def K(self) -> int:
        return self.N // self.M


def noised_permuted_identity(d: int, rng: np.random.Generator) -> np.ndarray:
    """Row-permuted ``I + 0.05 sqrt(d) exp(U[-1, 1])`` with entrywise noise, rows normalized."""
    noise = 0.05 * np.sqrt(d) * np.exp(rng.uniform(-1.0, 1.0, size=(d, d)))
    mat = (np.eye(d) + noise)[rng.permutation(d)]
    return mat / mat.sum(axis=1, keepdims=True)


def gen_ground_truth(spec: ExperimentSpec) -> HmmParams:
    """Random ground-truth HMM for ``spec``.

    Discrete emissions are square (one symbol per state) and drawn like the
    transition matrix from an independent stream.  Gaussian means come from
    ``U[-5d, 5d]`` and each state has covariance ``sigma^2 I`` with
    ``sigma^2 ~ U[1, 5]``.
    """
    d = spec.d
    trans_seq, emit_seq = np.random.SeedSequence(spec.seed).spawn(2)
    rng = np.random.default_rng(trans_seq)
    pi = rng.dirichlet(np.ones(d))
    A = noised_permuted_identity(d, rng)
    erng = np.random.default_rng(emit_seq)
    if spec.kind == "discrete":
        emission = DiscreteEmission(noised_permuted_identity(d, erng))
    else:
        s = spec.obs_dim
        means = erng.uniform(-5.0 * d, 5.0 * d, size=(d, s))
        var = erng.uniform(1.0, 5.0, size=d)
        emission = GaussianEmission(means, var[:, None, None] * np.eye(s))
    return HmmParams(pi=pi, A=A, emission=emission, T=spec.T)


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One draw per row of ``probs``."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1]) * cdf[..., -1]
    idx = (u[..., None] >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sample_trajectories(params: HmmParams, N: int, T: int, seed) -> TrajectorySet:
    """Ancestral sampling of ``N`` independent length-``T`` paths."""
    rng = np.random.default_rng(seed)
    x = np.empty((N, T), dtype=np.int64)
    x[:, 0] = _categorical(rng, np.broadcast_to(params.pi, (N, params.num_states)))
    for t in range(1, T):
        x[:, t] = _categorical(rng, params.A[x[:, t - 1]])
    em = params.emission
    if params.is_discrete:
        o = _categorical(rng, em.B[x])
    else:
        chol = np.linalg.cholesky(em.covs)
        z = rng.standard_normal((N, T, em.dim))
        o = em.means[x] + np.einsum("ntij,ntj->nti", chol[x], z)
    return TrajectorySet(x=x, o=o)


def aggregate(traj: TrajectorySet, M: int) -> List[AggregateSequence]:
    """Split ``traj`` into consecutive groups of ``M`` and histogram each step."""
    if not traj.discrete:
        raise TypeError("aggregate() builds histograms of discrete symbols; "
                        "use group_samples() for real-valued observations")
    if M < 1 or traj.N % M:
        raise ValueError(f"M={M} does not divide N={traj.N}")
    s = int(traj.o.max()) + 1
    return aggregate_counts(traj, M, s)


def aggregate_counts(traj: TrajectorySet, M: int, num_symbols: int) -> List[AggregateSequence]:
    if M < 1 or traj.N % M:
        raise ValueError(f"M={M} does not divide N={traj.N}")
    K = traj.N // M
    onehot = np.eye(num_symbols)[traj.o]  # (N, T, s)
    counts = onehot.reshape(K, M, traj.T, num_symbols).sum(axis=1)
    return [AggregateSequence(M=M, y=c / M) for c in counts]


def group_samples(traj: TrajectorySet, M: int) -> np.ndarray:
    """Real-valued observations grouped into ``(K, M, T, s)`` populations."""
    if traj.discrete:
        raise TypeError("group_samples() needs real-valued observations")
    if M < 1 or traj.N % M:
        raise ValueError(f"M={M} does not divide N={traj.N}")
    o = traj.o if traj.o.ndim == 3 else traj.o[..., None]
    return o.reshape(traj.N // M, M, traj.T, o.shape[-1])
