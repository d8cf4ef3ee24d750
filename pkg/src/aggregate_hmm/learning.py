"""Approximate EM for aggregate HMMs and a reference Baum-Welch.

Each EM iteration runs collective forward-backward under the current
parameters, then maximizes the negative Bethe free energy over the
parameters in closed form.  Both steps are coordinate ascent on the same
objective, so the recorded ``-F_Bethe`` never decreases.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.special import xlogy

from .inference import (BatchMarginals, ContinuousBatch, _as_sample_batch,
                        cfb_continuous_batch, cfb_discrete_batch,
                        gaussian_log_likelihood)
from .model import (AggregateSequence, DiscreteEmission, GaussianEmission,
                    HmmParams, MarginalSet, TrajectorySet, stack_histograms)
from .tree import FLOOR, ConvergenceError

log = logging.getLogger(__name__)

FREEZE_GROUPS = frozenset({"pi", "A", "B", "mu", "cov"})
COV_REG = 1e-6
MIN_COV_DET = 1e-300


@dataclass(frozen=True)
class EmOptions:
    tol: float = 1e-6
    max_iters: int = 200
    estimate_cov: bool = False
    freeze: frozenset = frozenset()
    seed: int = 0
    inference_tol: float = 1e-10
    inference_max_passes: int = 2000

    def __post_init__(self):
        freeze = frozenset(self.freeze)
        unknown = freeze - FREEZE_GROUPS
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        object.__setattr__(self, "freeze", freeze)

    @classmethod
    def from_dict(cls, data: dict) -> "EmOptions":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if "freeze" in known:
            known["freeze"] = frozenset(known["freeze"])
        return cls(**known)

    def to_dict(self) -> dict:
        return {"tol": self.tol, "max_iters": self.max_iters,
                "estimate_cov": self.estimate_cov, "freeze": sorted(self.freeze),
                "seed": self.seed, "inference_tol": self.inference_tol,
                "inference_max_passes": self.inference_max_passes}


@dataclass
class EmIteration:
    iteration: int
    neg_bethe: Optional[float]
    neg_bethe_estep: Optional[float]
    param_hash: str
    residual: float
    wall_time: float
    param_change: float
    flags: tuple = ()
    log_likelihood: Optional[float] = None


@dataclass
class EmTrace:
    records: List[EmIteration] = field(default_factory=list)
    converged: bool = False

    def __len__(self):
        return len(self.records)

    @property
    def neg_bethe(self) -> np.ndarray:
        return np.array([r.neg_bethe for r in self.records], dtype=float)

    @property
    def log_likelihood(self) -> np.ndarray:
        return np.array([r.log_likelihood for r in self.records], dtype=float)


class EStepError(RuntimeError):
    """The E-step failed; carries the trace and parameters reached so far."""

    def __init__(self, message, iteration, residual, trace, params):
        super().__init__(message)
        self.iteration = iteration
        self.residual = residual
        self.trace = trace
        self.params = params


def params_hash(params: HmmParams) -> str:
    blob = json.dumps(params.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def param_change(a: HmmParams, b: HmmParams) -> float:
    diffs = [np.abs(a.pi - b.pi).max(), np.abs(a.A - b.A).max()]
    if a.is_discrete:
        diffs.append(np.abs(a.emission.B - b.emission.B).max())
    else:
        diffs.append(np.abs(a.emission.means - b.emission.means).max())
        diffs.append(np.abs(a.emission.covs - b.emission.covs).max())
    return float(max(diffs))


def _degree_weights(T: int) -> np.ndarray:
    """``d_t - 1`` for each hidden node of the chain with observation leaves."""
    if T == 1:
        return np.zeros(1)
    w = np.full(T, 2.0)
    w[0] = w[-1] = 1.0
    return w


def _chain_bethe(pi, A, node, edge, obs, log_potential) -> float:
    """Bethe free energy summed over a batch of expanded HMM trees.

    ``log_potential`` is the log observation-edge table, broadcastable to
    ``obs``; the initial distribution sits on the first observation edge.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        logA = np.log(A)
        logpi = np.log(pi)
        energy = np.sum(xlogy(edge, edge)) - np.sum(np.where(edge > 0, edge * logA, 0.0))
        energy += np.sum(xlogy(obs, obs)) - np.sum(np.where(obs > 0, obs * log_potential, 0.0))
        first = obs[:, 0].sum(axis=-1)
        energy -= np.sum(np.where(first > 0, first * logpi, 0.0))
    energy -= np.sum(_degree_weights(node.shape[1])[None, :, None] * xlogy(node, node))
    return float(energy)


def neg_bethe_discrete(params: HmmParams, marg: BatchMarginals) -> float:
    """``-F_Bethe`` of discrete marginals, summed over the batch."""
    with np.errstate(divide="ignore"):
        logB = np.log(params.emission.B)
    return -_chain_bethe(params.pi, params.A, marg.node, marg.edge, marg.obs, logB)


def neg_bethe_continuous(params: HmmParams, batch: ContinuousBatch,
                         loglik: Optional[np.ndarray] = None) -> float:
    """``-F_Bethe`` with Gaussian observation edges, summed over the batch.

    ``loglik`` overrides the stored likelihood table, which is how a new set
    of emission parameters is scored against fixed marginals.
    """
    m = batch.marginals
    table = batch.loglik if loglik is None else loglik
    return -_chain_bethe(params.pi, params.A, m.node, m.edge, m.obs, table)


def _ratio_rows(counts, occupancy, fallback, name, flags):
    """Count ratios with rows renormalized; empty rows keep ``fallback``."""
    out = np.empty_like(counts)
    for x in range(counts.shape[0]):
        if occupancy[x] > FLOOR and counts[x].sum() > FLOOR:
            row = counts[x] / occupancy[x]
            out[x] = row / row.sum()
        else:
            flags.append(f"{name}[{x}] kept previous row")
            out[x] = fallback[x] if fallback is not None else 1.0 / counts.shape[1]
    return out


def _pooled_initial(node: np.ndarray) -> np.ndarray:
    pi = node[:, 0].mean(axis=0)
    return pi / pi.sum()


def _stack_marginals(marginals):
    if isinstance(marginals, BatchMarginals):
        return marginals.node, marginals.edge, marginals.obs
    if isinstance(marginals, MarginalSet):
        marginals = [marginals]
    node = np.stack([m.node for m in marginals])
    edge = np.stack([m.edge for m in marginals])
    obs = np.stack([m.obs for m in marginals])
    return node, edge, obs


def _m_step_discrete(node, edge, obs, previous: Optional[HmmParams], freeze=frozenset()):
    flags: list = []
    K, T, d = node.shape
    prev_A = previous.A if previous is not None else None
    prev_B = previous.emission.B if previous is not None else None

    pi = previous.pi if "pi" in freeze else _pooled_initial(node)
    if "A" in freeze:
        A = previous.A
    else:
        A = _ratio_rows(edge.sum(axis=(0, 1)), node[:, :-1].sum(axis=(0, 1)),
                        prev_A, "A", flags)
    if "B" in freeze:
        B = previous.emission.B
    else:
        B = _ratio_rows(obs.sum(axis=(0, 1)), node.sum(axis=(0, 1)), prev_B, "B", flags)
    return HmmParams(pi=pi, A=A, emission=DiscreteEmission(B), T=T), flags


def m_step_discrete(marginals, previous: Optional[HmmParams] = None,
                    freeze=frozenset()) -> HmmParams:
    """Closed-form maximizer of ``-F_Bethe`` for discrete emissions.

    ``marginals`` is one :class:`MarginalSet`, a list of them (pooled as an
    ensemble) or a :class:`BatchMarginals`.  Rows with no occupancy keep the
    corresponding row of ``previous`` (uniform when there is none).
    """
    params, flags = _m_step_discrete(*_stack_marginals(marginals), previous, freeze)
    for flag in flags:
        log.warning(flag)
    return params


def _m_step_gaussian(batch: ContinuousBatch, o: np.ndarray, previous: HmmParams,
                     freeze=frozenset(), estimate_cov=False):
    flags: list = []
    m = batch.marginals
    K, T, d = m.node.shape
    M = o.shape[1]
    s = o.shape[-1]
    pi = previous.pi if "pi" in freeze else _pooled_initial(m.node)
    if "A" in freeze:
        A = previous.A
    else:
        A = _ratio_rows(m.edge.sum(axis=(0, 1)), m.node[:, :-1].sum(axis=(0, 1)),
                        previous.A, "A", flags)

    w = batch.weights  # (K, T, M, d)
    occupancy = M * m.node.sum(axis=(0, 1))
    means = previous.emission.means.copy()
    covs = previous.emission.covs.copy()
    weighted = np.einsum("ktmx,kmts->xs", w, o)
    for x in range(d):
        if occupancy[x] <= FLOOR:
            flags.append(f"mu[{x}] kept previous mean")
            continue
        if "mu" not in freeze:
            means[x] = weighted[x] / occupancy[x]
        if estimate_cov and "cov" not in freeze:
            diff = o - means[x]  # (K, M, T, s)
            scatter = np.einsum("ktm,kmts,kmtu->su", w[..., x], diff, diff) / occupancy[x]
            scatter = 0.5 * (scatter + scatter.T)
            reg = COV_REG
            cov = scatter + reg * np.eye(s)
            while np.linalg.det(cov) < MIN_COV_DET:
                reg *= 10.0
                cov = scatter + reg * np.eye(s)
            if reg > COV_REG:
                flags.append(f"cov[{x}] collapsed, regularization raised to {reg:.1e}")
            covs[x] = cov
    params = HmmParams(pi=pi, A=A, emission=GaussianEmission(means, covs), T=T)
    return params, flags


def m_step_gaussian(batch: ContinuousBatch, observations, previous: HmmParams,
                    freeze=frozenset(), estimate_cov: bool = False) -> HmmParams:
    """Closed-form maximizer of ``-F_Bethe`` for Gaussian emissions."""
    params, flags = _m_step_gaussian(batch, _as_sample_batch(observations), previous,
                                     frozenset(freeze), estimate_cov)
    for flag in flags:
        log.warning(flag)
    return params


def _em_loop(init: HmmParams, opts: EmOptions, e_step, m_step, score, callback):
    params = init
    trace = EmTrace()
    for it in range(1, opts.max_iters + 1):
        start = time.perf_counter()
        try:
            marg = e_step(params)
        except ConvergenceError as exc:
            raise EStepError(f"E-step failed at iteration {it}: {exc}", it,
                             exc.residual, trace, params) from exc
        before = score(params, marg)
        new, flags = m_step(marg, params)
        after = score(new, marg)
        change = param_change(params, new)
        residual = marg.marginals.residual if isinstance(marg, ContinuousBatch) else marg.residual
        trace.records.append(EmIteration(
            iteration=it, neg_bethe=after, neg_bethe_estep=before,
            param_hash=params_hash(new), residual=residual,
            wall_time=time.perf_counter() - start, param_change=change,
            flags=tuple(flags)))
        params = new
        if callback is not None:
            callback(it, params)
        if change <= opts.tol:
            trace.converged = True
            break
    return params, trace


def em_fit_ensemble(obs_list: Sequence[AggregateSequence], init: HmmParams,
                    opts: EmOptions = EmOptions(),
                    callback: Optional[Callable[[int, HmmParams], None]] = None):
    """Learn one discrete HMM from ``K`` aggregate sequences.

    The E-step runs collective forward-backward on every sequence; the M-step
    pools node, edge and observation marginals across sequences.

    Returns
    -------
    (HmmParams, EmTrace)
    """
    if not init.is_discrete:
        raise TypeError("em_fit_ensemble needs a discrete emission model")
    y = stack_histograms(obs_list) if not isinstance(obs_list, np.ndarray) else obs_list

    last = {}

    def e_step(params):
        marg = cfb_discrete_batch(params, y, opts.inference_tol, opts.inference_max_passes,
                                  last.get("messages"))
        last["messages"] = marg.messages
        return marg

    def m_step(marg, params):
        return _m_step_discrete(marg.node, marg.edge, marg.obs, params, opts.freeze)

    return _em_loop(init, opts, e_step, m_step, neg_bethe_discrete, callback)


def em_fit_discrete(obs: AggregateSequence, init: HmmParams,
                    opts: EmOptions = EmOptions(), callback=None):
    """Learn a discrete HMM from a single aggregate sequence."""
    return em_fit_ensemble([obs], init, opts, callback)


def em_fit_gaussian(observations, init: HmmParams, opts: EmOptions = EmOptions(),
                    callback=None):
    """Learn a Gaussian-emission HMM from aggregate real-valued observations.

    ``observations`` is ``(M, T, s)`` for a single population or
    ``(K, M, T, s)`` for an ensemble of ``K`` populations of size ``M``.
    Covariances are only re-estimated when ``opts.estimate_cov`` is set.
    """
    if init.is_discrete:
        raise TypeError("em_fit_gaussian needs a Gaussian emission model")
    o = _as_sample_batch(observations)

    last = {}

    def e_step(params):
        batch = cfb_continuous_batch(params, o, opts.inference_tol, opts.inference_max_passes,
                                     init=last.get("messages"))
        last["messages"] = batch.marginals.messages
        return batch

    def m_step(batch, params):
        return _m_step_gaussian(batch, o, params, opts.freeze, opts.estimate_cov)

    def score(params, batch):
        loglik = np.moveaxis(gaussian_log_likelihood(params.emission, o), 1, 3)
        return neg_bethe_continuous(params, batch, loglik)

    return _em_loop(init, opts, e_step, m_step, score, callback)


def forward_backward_posteriors(params: HmmParams, o: np.ndarray):
    """Classic scaled forward-backward over ``N`` discrete paths.

    Returns state posteriors ``(N, T, d)``, pairwise posteriors
    ``(N, T-1, d, d)``, per-path log-likelihoods and a mask of paths whose
    probability underflowed to zero.
    """
    o = np.atleast_2d(o)
    N, T = o.shape
    d = params.num_states
    A = params.A
    b = np.moveaxis(params.emission.B[:, o], 0, -1)  # (N, T, d)
    alpha = np.empty((N, T, d))
    c = np.empty((N, T))
    a = params.pi * b[:, 0]
    for t in range(T):
        if t > 0:
            a = (alpha[:, t - 1] @ A) * b[:, t]
        c[:, t] = a.sum(axis=1)
        alpha[:, t] = a / np.maximum(c[:, t], FLOOR)[:, None]
    zero = np.any(c <= 0, axis=1)
    c = np.maximum(c, FLOOR)
    beta = np.empty((N, T, d))
    beta[:, -1] = 1.0
    for t in range(T - 2, -1, -1):
        beta[:, t] = ((b[:, t + 1] * beta[:, t + 1]) @ A.T) / c[:, t + 1][:, None]
    post = alpha * beta
    pair = (alpha[:, :-1, :, None] * A[None, None]
            * (b[:, 1:] * beta[:, 1:])[:, :, None, :] / c[:, 1:, None, None])
    return post, pair, np.log(c).sum(axis=1), zero


def baum_welch_reference(paths: TrajectorySet, init: HmmParams,
                         opts: EmOptions = EmOptions(), callback=None):
    """Standard multi-sequence Baum-Welch on individual discrete paths.

    The trace records the data log-likelihood under the parameters used in
    each E-step.
    """
    if not paths.discrete or not init.is_discrete:
        raise TypeError("baum_welch_reference works on discrete observations")
    o = paths.o
    s = init.emission.num_symbols
    params = init
    trace = EmTrace()
    onehot = np.eye(s)[o]  # (N, T, s)
    for it in range(1, opts.max_iters + 1):
        start = time.perf_counter()
        post, pair, loglik, zero = forward_backward_posteriors(params, o)
        flags = []
        if zero.any():
            flags.append(f"{int(zero.sum())} paths have zero probability; floored at 1e-300")
        pi = params.pi if "pi" in opts.freeze else post[:, 0].mean(axis=0)
        pi = pi / pi.sum()
        A = params.A if "A" in opts.freeze else _ratio_rows(
            pair.sum(axis=(0, 1)), post[:, :-1].sum(axis=(0, 1)), params.A, "A", flags)
        B = params.emission.B if "B" in opts.freeze else _ratio_rows(
            np.einsum("ntx,nts->xs", post, onehot), post.sum(axis=(0, 1)),
            params.emission.B, "B", flags)
        new = HmmParams(pi=pi, A=A, emission=DiscreteEmission(B), T=params.T)
        change = param_change(params, new)
        trace.records.append(EmIteration(
            iteration=it, neg_bethe=None, neg_bethe_estep=None,
            param_hash=params_hash(new), residual=0.0,
            wall_time=time.perf_counter() - start, param_change=change,
            flags=tuple(flags), log_likelihood=float(loglik.sum())))
        params = new
        if callback is not None:
            callback(it, params)
        if change <= opts.tol:
            trace.converged = True
            break
    return params, trace
