"""Acceptance criteria, one test each.

Every test records a ``PASS``/``FAIL`` line that is repeated in the pytest
terminal summary.  Run with ``pytest tests/test_acceptance.py -s`` to see
the lines as they are produced.
"""
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager

import numpy as np
import pytest

from aggregate_hmm.experiments import GridConfig, run_grid_flow, run_job
from aggregate_hmm.inference import (cfb_continuous_batch, cfb_discrete, cfb_discrete_batch,
                                     gaussian_log_likelihood, hmm_tree)
from aggregate_hmm.learning import (EmOptions, baum_welch_reference, em_fit_discrete,
                                    em_fit_ensemble, em_fit_gaussian, m_step_discrete,
                                    m_step_gaussian, neg_bethe_continuous, neg_bethe_discrete)
from aggregate_hmm.model import (AggregateSequence, DiscreteEmission, GaussianEmission,
                                 HmmParams)
from aggregate_hmm.synth import ExperimentSpec, aggregate_counts, sample_trajectories
from aggregate_hmm.tree import TreeModel, run_sbp
from conftest import enumerate_posteriors, random_discrete, random_gaussian, random_tree_edges

pytestmark = pytest.mark.slow

TRUE_ARCS = {(0, 1), (1, 3), (3, 2), (2, 0)}


@contextmanager
def criterion(record, number, title, budget=None):
    """Time the block, then record PASS or FAIL with any detail it left."""
    detail = {}
    start = time.perf_counter()
    try:
        yield detail
        elapsed = time.perf_counter() - start
        if budget is not None:
            assert elapsed < budget, f"took {elapsed:.1f} s, budget {budget} s"
    except BaseException as exc:
        message = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        record(f"FAIL {number}. {title} [{time.perf_counter() - start:.1f} s] {message}")
        raise
    extra = "; ".join(f"{k}={v}" for k, v in detail.items())
    record(f"PASS {number}. {title} [{elapsed:.1f} s] {extra}".rstrip())


def max_param_diff(a, b):
    return max(np.abs(a.pi - b.pi).max(), np.abs(a.A - b.A).max(),
               np.abs(a.emission.B - b.emission.B).max())


def test_baum_welch_reduction(record_criterion):
    rng = np.random.default_rng(101)
    # a negative tolerance disables early stopping so both run all 20 steps
    opts = EmOptions(max_iters=20, tol=-1.0)
    with criterion(record_criterion, 1, "Baum-Welch reduction at M=1", budget=10) as detail:
        worst = 0.0
        for _ in range(20):
            d, T = int(rng.integers(1, 5)), int(rng.integers(1, 7))
            truth, init = random_discrete(rng, d, 3, T), random_discrete(rng, d, 3, T)
            traj = sample_trajectories(truth, 25, T, rng)
            reference = []
            baum_welch_reference(traj.subset([0]), init, opts, lambda it, p: reference.append(p))
            single = []
            em_fit_discrete(aggregate_counts(traj.subset([0]), 1, 3)[0], init, opts,
                            lambda it, p: single.append(p))
            pooled, pooled_ref = [], []
            em_fit_ensemble(aggregate_counts(traj, 1, 3), init, opts,
                            lambda it, p: pooled.append(p))
            baum_welch_reference(traj, init, opts, lambda it, p: pooled_ref.append(p))
            for ours, ref in ((single, reference), (pooled, pooled_ref)):
                assert len(ours) == len(ref) == 20
                for a, b in zip(ours, ref):
                    worst = max(worst, max_param_diff(a, b))
        detail["max_diff"] = f"{worst:.2e}"
        assert worst <= 1e-10


def test_delta_observations_are_exact(record_criterion):
    rng = np.random.default_rng(202)
    with criterion(record_criterion, 2, "SBP/CFB exact at delta observations", budget=30) as detail:
        worst = 0.0
        for _ in range(50):
            params = random_discrete(rng, 3, 3, 4)
            path = rng.integers(3, size=4)
            seq = AggregateSequence(1, np.eye(3)[path])
            node, _, _ = enumerate_posteriors(params, path)
            tree = run_sbp(hmm_tree(params, seq))
            chain = cfb_discrete(params, seq)
            for t in range(4):
                worst = max(worst, np.abs(tree.node[t] - node[t]).max(),
                            np.abs(chain.node[t] - node[t]).max())
        detail["max_diff"] = f"{worst:.2e}"
        assert worst <= 1e-8


def _chain_violations(marg, y):
    obs = np.abs(marg.obs.sum(axis=-2) - y).max()
    cons = np.abs(marg.obs.sum(axis=-1) - marg.node).max()
    norm = max(np.abs(marg.node.sum(axis=-1) - 1).max(),
               np.abs(marg.obs.sum(axis=(-2, -1)) - 1).max())
    if marg.edge.shape[1]:
        cons = max(cons, np.abs(marg.edge.sum(axis=-1) - marg.node[:, :-1]).max(),
                   np.abs(marg.edge.sum(axis=-2) - marg.node[:, 1:]).max())
        norm = max(norm, np.abs(marg.edge.sum(axis=(-2, -1)) - 1).max())
    return obs, cons, norm


def _tree_violations(model, marg):
    obs = max((np.abs(marg.node[i] - y).max() for i, y in model.observed.items()), default=0.0)
    cons = max(max(np.abs(n.sum(axis=1) - marg.node[i]).max(),
                   np.abs(n.sum(axis=0) - marg.node[j]).max())
               for (i, j), n in marg.edge.items())
    norm = max([abs(n.sum() - 1) for n in marg.node.values()]
               + [abs(n.sum() - 1) for n in marg.edge.values()])
    return obs, cons, norm


def test_constraints_hold_at_fixed_points(record_criterion):
    rng = np.random.default_rng(303)
    with criterion(record_criterion, 3, "constraint satisfaction at fixed points") as detail:
        worst = np.zeros(3)
        for _ in range(60):
            d, s, T, K = (int(v) for v in rng.integers(1, 5, size=4))
            M = int(rng.choice([1, 5, 20, 200]))
            params = random_discrete(rng, d, s, T)
            y = np.stack([[rng.multinomial(M, rng.dirichlet(np.ones(s))) / M
                           for _ in range(T)] for _ in range(K)])
            marg = cfb_discrete_batch(params, y)
            worst = np.maximum(worst, _chain_violations(marg, y))
            seq = AggregateSequence(M, y[0])
            model = hmm_tree(params, seq)
            worst = np.maximum(worst, _tree_violations(model, run_sbp(model)))
        for _ in range(30):
            J = int(rng.integers(2, 8))
            card = tuple(int(c) for c in rng.integers(2, 4, size=J))
            edges = random_tree_edges(rng, J, card)
            degree = np.bincount(np.array(list(edges)).ravel(), minlength=J)
            leaves = [i for i in range(J) if degree[i] == 1]
            observed = {i: rng.dirichlet(np.ones(card[i])) for i in leaves[:-1] or leaves[:1]}
            model = TreeModel(card, edges, observed)
            worst = np.maximum(worst, _tree_violations(model, run_sbp(model)))
        for _ in range(10):
            params = random_gaussian(rng, 3, 2, 4)
            o = rng.normal(scale=3, size=(2, 5, 4, 2))
            marg = cfb_continuous_batch(params, o).marginals
            worst = np.maximum(worst, _chain_violations(marg, np.full((2, 4, 5), 0.2)))
        detail.update(observation=f"{worst[0]:.1e}", consistency=f"{worst[1]:.1e}",
                      normalization=f"{worst[2]:.1e}")
        # leaf marginals are set by an exact rescaling; rounding is all that remains
        assert worst[0] <= 1e-15
        assert worst[1] <= 1e-8
        assert worst[2] <= 1e-12


def test_surrogate_is_monotone(record_criterion):
    rng = np.random.default_rng(404)
    with criterion(record_criterion, 4, "-F_Bethe non-decreasing over EM") as detail:
        worst, runs = 0.0, 0
        for M in (1, 2, 10, 50):
            for freeze in (frozenset(), frozenset({"B"}), frozenset({"pi", "A"})):
                truth, init = random_discrete(rng, 3, 4, 5), random_discrete(rng, 3, 4, 5)
                seqs = aggregate_counts(sample_trajectories(truth, 100, 5, rng), M, 4)
                _, trace = em_fit_ensemble(seqs, init, EmOptions(max_iters=40, freeze=freeze))
                worst = min(worst, np.diff(trace.neg_bethe).min(initial=0.0))
                runs += 1
        for M in (1, 5, 20):
            for estimate_cov in (False, True):
                truth, init = random_gaussian(rng, 3, 2, 4), random_gaussian(rng, 3, 2, 4)
                o = sample_trajectories(truth, 60, 4, rng).o.reshape(60 // M, M, 4, 2)
                _, trace = em_fit_gaussian(o, init, EmOptions(max_iters=30,
                                                              estimate_cov=estimate_cov))
                worst = min(worst, np.diff(trace.neg_bethe).min(initial=0.0))
                runs += 1
        detail.update(runs=runs, largest_drop=f"{abs(worst):.1e}")
        assert worst >= -1e-9


def _well_conditioned(rng, d, s, T, K=2, alpha=20.0):
    params = HmmParams(rng.dirichlet(np.full(d, alpha)), rng.dirichlet(np.full(d, alpha), d),
                       DiscreteEmission(rng.dirichlet(np.full(s, alpha), d)), T)
    y = rng.dirichlet(np.full(s, alpha), size=(K, T))
    return cfb_discrete_batch(params, y, tol=1e-12, max_passes=10000)


def _central_difference(score, base, idx, h):
    up, down = base.copy(), base.copy()
    up[idx] += h
    down[idx] -= h
    return (score(up) - score(down)) / (2 * h)


def test_m_step_is_stationary(record_criterion):
    rng = np.random.default_rng(505)
    h = 1e-5
    with criterion(record_criterion, 5, "M-step stationarity by central differences",
                   budget=10) as detail:
        worst = 0.0
        for _ in range(10):
            marg = _well_conditioned(rng, 3, 3, 4)
            best = m_step_discrete(marg)
            blocks = {
                "pi": (best.pi[None], lambda a: best.replace(pi=a[0])),
                "A": (best.A, lambda a: best.replace(A=a)),
                "B": (best.emission.B, lambda a: best.replace(emission=DiscreteEmission(a))),
            }
            for base, rebuild in blocks.values():
                grad = np.zeros_like(base)
                for idx in np.ndindex(base.shape):
                    grad[idx] = _central_difference(
                        lambda a: neg_bethe_discrete(rebuild(a), marg), base, idx, h)
                # only directions inside the simplex count
                tangent = grad - grad.mean(axis=1, keepdims=True)
                worst = max(worst, np.abs(tangent).max())

            params = random_gaussian(rng, 2, 2, 3)
            o = rng.normal(scale=3, size=(2, 4, 3, 2))
            batch = cfb_continuous_batch(params, o, tol=1e-12, max_passes=10000)
            best = m_step_gaussian(batch, o, params, estimate_cov=True)
            means, covs = best.emission.means, best.emission.covs

            def score(m, c):
                emission = GaussianEmission(m, c)
                ll = np.moveaxis(gaussian_log_likelihood(emission, o), 1, 3)
                return neg_bethe_continuous(best.replace(emission=emission), batch, ll)

            for idx in np.ndindex(means.shape):
                worst = max(worst, abs(_central_difference(lambda m: score(m, covs),
                                                           means, idx, h)))
            for x, a, b in ((x, a, b) for x in range(2) for a in range(2) for b in range(a, 2)):
                def sym(c, x=x, a=a, b=b):
                    # move the symmetric pair together
                    c = c.copy()
                    c[x, b, a] = c[x, a, b]
                    return score(means, c)
                worst = max(worst, abs(_central_difference(sym, covs, (x, a, b), h)))
        detail["max_gradient"] = f"{worst:.1e}"
        assert worst <= 1e-5


def _final_and_first(spec):
    curve = run_job(spec)[0]
    return curve.delta_nll[0], curve.delta_nll[-1]


def _mean_curves(kind, d, N, Ms, seeds=range(10)):
    em = EmOptions(max_iters=50, tol=1e-6)
    specs = [ExperimentSpec(d=d, T=5, N=N, M=M, kind=kind, seed=s, em=em)
             for M in Ms for s in seeds]
    with ProcessPoolExecutor() as pool:
        results = np.array(list(pool.map(_final_and_first, specs)))
    results = results.reshape(len(Ms), len(seeds), 2).mean(axis=1)
    return {M: (first, last) for M, (first, last) in zip(Ms, results)}


def _check_trend(curves):
    Ms = sorted(curves)
    for M in Ms:
        first, last = curves[M]
        assert last < first, f"M={M}: mean ΔNLL rose from {first:.4f} to {last:.4f}"
    finals = [curves[M][1] for M in Ms]
    assert all(b >= a for a, b in zip(finals, finals[1:])), f"finals {finals}"


def _describe(curves, d=None):
    prefix = f"d={d} " if d is not None else ""
    return {f"{prefix}M={M}": f"{first:.3f}->{last:.3f}" for M, (first, last) in curves.items()}


def test_discrete_learning_trend(record_criterion):
    with criterion(record_criterion, 6, "discrete learning-curve trend", budget=300) as detail:
        curves = _mean_curves("discrete", 3, 1000, (1, 10, 100))
        detail.update(_describe(curves))
        _check_trend(curves)


def test_gaussian_learning_trend(record_criterion):
    with criterion(record_criterion, 7, "Gaussian learning-curve trend", budget=300) as detail:
        for d in (5, 10):
            curves = _mean_curves("gaussian", d, 1000, (1, 10, 100))
            detail.update(_describe(curves, d))
            _check_trend(curves)


def test_more_data_helps(record_criterion):
    with criterion(record_criterion, 8, "more training data lowers final ΔNLL", budget=300) as detail:
        finals = {N: _mean_curves("gaussian", 5, N, (10,))[10][1] for N in (200, 2000)}
        detail.update({f"N={N}": f"{v:.3f}" for N, v in finals.items()})
        assert finals[2000] <= finals[200]


def test_grid_flow_recovers_cycle(record_criterion):
    with criterion(record_criterion, 9, "grid-flow recovers the planted cycle") as detail:
        slowest = 0.0
        for seed in range(5):
            start = time.perf_counter()
            arcs, _, _ = run_grid_flow(GridConfig(), seed)
            slowest = max(slowest, time.perf_counter() - start)
            assert {(i, j) for i, j, _ in arcs} == TRUE_ARCS, f"seed {seed}: {arcs}"
        detail.update(seeds=5, slowest=f"{slowest:.2f} s")
        assert slowest < 5
