"""Collective forward-backward inference for aggregate HMMs.

The chain ``X_1 - ... - X_T`` with one observation leaf per step is the tree
that Sinkhorn belief propagation runs on.  Discrete models attach the
emission matrix to every observation edge and pin the leaf to the observed
histogram.  Gaussian models treat the ``M`` recorded samples at a step as the
states of the observation leaf: the edge potential is the per-sample
likelihood table and the pinned histogram is uniform, ``1/M`` per sample.
Both cases run through :func:`collective_forward_backward`, vectorized over a
batch of ``K`` independent sequences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.linalg import solve_triangular

from .model import (AggregateSequence, GaussianEmission, HmmParams, MarginalSet,
                    TrajectorySet)
from .tree import FLOOR, ConvergenceError, TreeMarginals, TreeModel

COV_JITTER = 1e-9


def _norm(v: np.ndarray) -> np.ndarray:
    v = np.maximum(v, FLOOR)
    return v / v.sum(axis=-1, keepdims=True)


@dataclass
class CfbMessages:
    """Messages of the collective forward-backward pass, batched over sequences.

    ``alpha``, ``beta`` and ``gamma`` have shape ``(K, T, d)``; ``xi`` has shape
    ``(K, T, S)`` where ``S`` is the symbol count or the per-step sample count.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    xi: np.ndarray

    def copy(self) -> "CfbMessages":
        return CfbMessages(self.alpha.copy(), self.beta.copy(),
                           self.gamma.copy(), self.xi.copy())

    def distance(self, other: "CfbMessages") -> float:
        return max(float(np.max(np.abs(a - b), initial=0.0)) for a, b in
                   ((self.alpha, other.alpha), (self.beta, other.beta),
                    (self.gamma, other.gamma), (self.xi, other.xi)))


@dataclass
class BatchMarginals:
    """Marginals for ``K`` sequences at once.

    ``obs`` is the joint over hidden state and leaf state, shape ``(K, T, d, S)``.
    """

    node: np.ndarray
    edge: np.ndarray
    obs: np.ndarray
    messages: CfbMessages
    residual: float
    passes: int

    @property
    def K(self) -> int:
        return self.node.shape[0]


def collective_forward_backward(pi, A, lik, y, tol: float = 1e-9,
                                max_passes: int = 500,
                                init: Optional[CfbMessages] = None) -> BatchMarginals:
    """Run collective forward-backward on a batch of chains.

    Parameters
    ----------
    pi, A : ndarray
        Initial distribution ``(d,)`` and transition matrix ``(d, d)``.
    lik : ndarray
        Observation edge potentials broadcastable to ``(K, T, d, S)``.
    y : ndarray
        Pinned leaf histograms, shape ``(K, T, S)``.
    tol : float
        Stop once no message moves by more than ``tol`` over a full
        forward and backward pass.
    max_passes : int
        Maximum number of forward/backward cycles.
    init : CfbMessages, optional
        Messages to start from, e.g. the previous E-step's.  The fixed point
        is unique, so this only changes how many passes are needed.

    Raises
    ------
    ConvergenceError
        When ``max_passes`` cycles do not reach ``tol``.
    """
    pi = np.asarray(pi, dtype=float)
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    K, T, S = y.shape
    d = pi.shape[0]
    lik = np.broadcast_to(np.asarray(lik, dtype=float), (K, T, d, S))
    At = A.T

    alpha = np.empty((K, T, d))
    alpha[:, 0] = _norm(pi)
    for t in range(1, T):
        alpha[:, t] = _norm(alpha[:, t - 1] @ A)
    beta = np.full((K, T, d), 1.0 / d)
    gamma = np.full((K, T, d), 1.0 / d)
    xi = np.empty((K, T, S))

    def update_xi(t):
        ab = alpha[:, t] * beta[:, t]
        xi[:, t] = _norm((ab[:, None, :] @ lik[:, t])[:, 0, :])

    def update_gamma(t):
        ratio = y[:, t] / xi[:, t]
        gamma[:, t] = _norm((lik[:, t] @ ratio[:, :, None])[:, :, 0])

    if init is not None and init.alpha.shape == (K, T, d) and init.xi.shape == (K, T, S):
        alpha[:, 1:], beta[:, :-1], gamma[:] = init.alpha[:, 1:], init.beta[:, :-1], init.gamma
    for t in range(T):
        update_xi(t)

    msgs = CfbMessages(alpha, beta, gamma, xi)
    residual, passes = np.inf, 0
    while residual > tol:
        if passes >= max_passes:
            raise ConvergenceError(
                f"collective forward-backward did not converge in {max_passes} passes "
                f"(residual {residual:.3g})", residual, passes)
        before = msgs.copy()
        for t in range(1, T):
            update_gamma(t - 1)
            alpha[:, t] = _norm((alpha[:, t - 1] * gamma[:, t - 1]) @ A)
            update_xi(t)
        # repeats the first backward step; needed when T == 1
        update_gamma(T - 1)
        for t in range(T - 2, -1, -1):
            update_gamma(t + 1)
            beta[:, t] = _norm((beta[:, t + 1] * gamma[:, t + 1]) @ At)
            update_xi(t)
        update_gamma(0)
        passes += 1
        residual = msgs.distance(before)

    node = alpha * beta * gamma
    node /= node.sum(axis=-1, keepdims=True)
    left = alpha[:, :-1] * gamma[:, :-1]
    right = beta[:, 1:] * gamma[:, 1:]
    edge = left[..., :, None] * A * right[..., None, :]
    edge /= edge.sum(axis=(-2, -1), keepdims=True)
    # each observed column is scaled to its histogram entry so the leaf
    # constraint holds to rounding rather than to the message residual
    obs = lik * (alpha * beta)[..., :, None]
    column = obs.sum(axis=-2, keepdims=True)
    obs = np.divide(obs * y[..., None, :], column, out=np.zeros_like(obs), where=column > 0)
    return BatchMarginals(node=node, edge=edge, obs=obs, messages=msgs,
                          residual=float(residual), passes=passes)


def _as_histograms(obs) -> np.ndarray:
    if isinstance(obs, AggregateSequence):
        return obs.y[None]
    if isinstance(obs, np.ndarray):
        return obs if obs.ndim == 3 else obs[None]
    return np.stack([seq.y for seq in obs])


def cfb_discrete_batch(params: HmmParams, y, tol: float = 1e-9,
                       max_passes: int = 500, init: Optional[CfbMessages] = None
                       ) -> BatchMarginals:
    """Collective forward-backward for histograms ``y`` of shape ``(K, T, s)``."""
    if not params.is_discrete:
        raise TypeError("cfb_discrete needs a discrete emission model")
    y = _as_histograms(y)
    B = params.emission.B
    if y.shape[1] != params.T:
        raise ValueError(f"observations have length {y.shape[1]}, model horizon is {params.T}")
    if y.shape[2] != B.shape[1]:
        raise ValueError(f"histograms have {y.shape[2]} symbols, emission has {B.shape[1]}")
    return collective_forward_backward(params.pi, params.A, B[None, None], y, tol, max_passes,
                                       init)


def cfb_discrete(params: HmmParams, obs: AggregateSequence, tol: float = 1e-9,
                 max_passes: int = 500) -> MarginalSet:
    """Marginals of one aggregate sequence under a discrete-emission HMM."""
    out = cfb_discrete_batch(params, obs, tol, max_passes)
    return MarginalSet(node=out.node[0], edge=out.edge[0], obs=out.obs[0],
                       residual=out.residual, passes=out.passes)


def gaussian_log_likelihood(emission: GaussianEmission, o: np.ndarray) -> np.ndarray:
    """Log densities ``log N(o; mu_x, Sigma_x)`` with shape ``o.shape[:-1] + (d,)``.

    Covariances get ``1e-9 I`` added before the Cholesky factorization.
    """
    o = np.asarray(o, dtype=float)
    lead = o.shape[:-1]
    flat = o.reshape(-1, o.shape[-1])
    s = flat.shape[1]
    d = emission.means.shape[0]
    out = np.empty((flat.shape[0], d))
    for x in range(d):
        cov = emission.covs[x] + COV_JITTER * np.eye(s)
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"covariance of state {x} is not positive definite") from exc
        z = solve_triangular(L, (flat - emission.means[x]).T, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        out[:, x] = -0.5 * (np.sum(z * z, axis=0) + logdet + s * np.log(2 * np.pi))
    return out.reshape(lead + (d,))


def _as_sample_batch(observations) -> np.ndarray:
    """Coerce observations to ``(K, M, T, s)``."""
    if isinstance(observations, TrajectorySet):
        o = observations.o
        if observations.discrete:
            raise TypeError("continuous inference needs real-valued observations")
        return o[None] if o.ndim == 3 else o[None, ..., None]
    o = np.asarray(observations, dtype=float)
    if o.ndim == 3:
        o = o[None]
    if o.ndim != 4:
        raise ValueError(f"expected (K, M, T, s) observations, got shape {o.shape}")
    return o


@dataclass
class ContinuousBatch:
    """Output of :func:`cfb_continuous_batch`.

    ``loglik`` holds ``log p(o_t^(m) | x)`` with shape ``(K, T, d, M)``;
    ``weights`` holds per-sample posteriors normalized over states, shape
    ``(K, T, M, d)``.
    """

    marginals: BatchMarginals
    loglik: np.ndarray
    weights: np.ndarray


def cfb_continuous_batch(params: HmmParams, observations, tol: float = 1e-9,
                         max_passes: int = 500, loglik: Optional[np.ndarray] = None,
                         init: Optional[CfbMessages] = None) -> ContinuousBatch:
    """Collective forward-backward for ``K`` groups of ``M`` real-valued paths."""
    if params.is_discrete:
        raise TypeError("cfb_continuous needs a Gaussian emission model")
    o = _as_sample_batch(observations)
    K, M, T, s = o.shape
    if T != params.T:
        raise ValueError(f"observations have length {T}, model horizon is {params.T}")
    if s != params.emission.dim:
        raise ValueError(f"observations have dimension {s}, emission has {params.emission.dim}")
    if loglik is None:
        loglik = np.moveaxis(gaussian_log_likelihood(params.emission, o), 1, 3)
    # per-sample shifts cancel between the potential and the message it returns
    shift = loglik.max(axis=2, keepdims=True)
    lik = np.exp(loglik - shift)
    y = np.full((K, T, M), 1.0 / M)
    marg = collective_forward_backward(params.pi, params.A, lik, y, tol, max_passes, init)
    weights = np.moveaxis(marg.obs, 2, 3)
    weights = weights / weights.sum(axis=-1, keepdims=True)
    return ContinuousBatch(marginals=marg, loglik=loglik, weights=weights)


def cfb_continuous(params: HmmParams, observations, tol: float = 1e-9,
                   max_passes: int = 500) -> MarginalSet:
    """Marginals for ``M`` real-valued paths observed as one population.

    ``observations`` is a :class:`TrajectorySet` or an array ``(M, T, s)``.
    """
    out = cfb_continuous_batch(params, observations, tol, max_passes)
    m = out.marginals
    return MarginalSet(node=m.node[0], edge=m.edge[0], weights=out.weights[0],
                       residual=m.residual, passes=m.passes)


def emission_log_likelihood(params: HmmParams, o) -> np.ndarray:
    """``log p(o_t | x)`` for a batch of paths, shape ``(N, T, d)``."""
    o = np.asarray(o)
    if params.is_discrete:
        o = np.atleast_2d(o).astype(np.int64)
        with np.errstate(divide="ignore"):
            logB = np.log(params.emission.B)
        return np.moveaxis(logB[:, o], 0, -1)
    o = np.asarray(o, dtype=float)
    if o.ndim == 1:
        o = o[None, :, None]
    elif o.ndim == 2:
        o = o[None]
    return gaussian_log_likelihood(params.emission, o)


def forward_log_likelihood(params: HmmParams, o) -> np.ndarray:
    """Scaled forward recursion: ``log p(o_1..o_T)`` for every path in ``o``.

    Paths of zero probability yield ``-inf``.
    """
    ll = emission_log_likelihood(params, o)
    N, T, d = ll.shape
    shift = ll.max(axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    e = np.exp(ll - shift)
    total = shift[:, :, 0].sum(axis=1)
    dead = np.zeros(N, dtype=bool)
    alpha = params.pi[None, :] * e[:, 0]
    for t in range(T):
        if t > 0:
            alpha = (alpha @ params.A) * e[:, t]
        c = alpha.sum(axis=1)
        dead |= c <= 0
        c = np.where(c > 0, c, 1.0)
        total += np.log(c)
        alpha = alpha / c[:, None]
    total[dead] = -np.inf
    return total


def standard_forward(params: HmmParams, path) -> float:
    """Log-likelihood of one observation path."""
    path = np.asarray(path)
    if params.is_discrete:
        return float(forward_log_likelihood(params, path[None])[0])
    if path.ndim == 1:
        path = path[:, None]
    return float(forward_log_likelihood(params, path[None])[0])


def hmm_tree(params: HmmParams, obs: Union[AggregateSequence, np.ndarray]) -> TreeModel:
    """Expand an HMM and its observations into the equivalent 2T-node tree.

    Nodes ``0..T-1`` are hidden states and ``T..2T-1`` observation leaves.  The
    initial distribution is folded into the first observation edge.  For a
    Gaussian model ``obs`` is an array ``(M, T, s)`` and each leaf ranges over
    the ``M`` samples.
    """
    T, d = params.T, params.num_states
    if params.is_discrete:
        y = obs.y if isinstance(obs, AggregateSequence) else np.asarray(obs)
        tables = [params.emission.B] * T
    else:
        o = np.asarray(obs, dtype=float)
        M = o.shape[0]
        ll = np.moveaxis(gaussian_log_likelihood(params.emission, o), 0, -1)  # (T, d, M)
        tables = list(np.exp(ll - ll.max(axis=1, keepdims=True)))
        y = np.full((T, M), 1.0 / M)
    S = tables[0].shape[1]
    edges = {}
    for t in range(T - 1):
        edges[(t, t + 1)] = params.A
    for t in range(T):
        table = tables[t] * params.pi[:, None] if t == 0 else tables[t]
        edges[(t, T + t)] = table
    return TreeModel(cardinality=(d,) * T + (S,) * T, edges=edges,
                     observed={T + t: y[t] for t in range(T)})


def tree_to_marginal_set(tree_marg: TreeMarginals, T: int) -> MarginalSet:
    node = np.stack([tree_marg.node[t] for t in range(T)])
    edge = np.stack([tree_marg.edge[(t, t + 1)] for t in range(T - 1)]) if T > 1 \
        else np.empty((0,) + node.shape[1:] * 2)
    obs = np.stack([tree_marg.edge[(t, T + t)] for t in range(T)])
    return MarginalSet(node=node, edge=edge, obs=obs,
                       residual=tree_marg.residual, passes=tree_marg.passes)
