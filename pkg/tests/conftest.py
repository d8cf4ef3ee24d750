import itertools

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from aggregate_hmm.inference import COV_JITTER
from aggregate_hmm.model import DiscreteEmission, GaussianEmission, HmmParams


def dirichlet_rows(rng, rows, cols, alpha=1.0):
    return rng.dirichlet(np.full(cols, alpha), size=rows)


def random_discrete(rng, d, s, T):
    return HmmParams(pi=rng.dirichlet(np.ones(d)), A=dirichlet_rows(rng, d, d),
                     emission=DiscreteEmission(dirichlet_rows(rng, d, s)), T=T)


def random_gaussian(rng, d, s, T, spread=3.0):
    means = rng.uniform(-spread, spread, size=(d, s))
    covs = np.empty((d, s, s))
    for x in range(d):
        L = rng.normal(size=(s, s)) * 0.3
        covs[x] = L @ L.T + np.eye(s) * rng.uniform(0.5, 2.0)
    return HmmParams(pi=rng.dirichlet(np.ones(d)), A=dirichlet_rows(rng, d, d),
                     emission=GaussianEmission(means, covs), T=T)


def emission_table(params, path):
    """``p(o_t | x)`` for one path as a ``(T, d)`` array, computed directly."""
    em = params.emission
    if params.is_discrete:
        return em.B[:, np.asarray(path)].T
    path = np.asarray(path, dtype=float).reshape(params.T, -1)
    # same diagonal jitter the library adds before factorizing
    covs = em.covs + COV_JITTER * np.eye(em.dim)
    return np.array([[multivariate_normal(em.means[x], covs[x]).pdf(o)
                      for x in range(params.num_states)] for o in path])


def enumerate_posteriors(params, path):
    """Exact ``p(x_t | o)``, ``p(x_t, x_{t+1} | o)`` and ``p(o)`` by summing all paths."""
    d, T = params.num_states, params.T
    lik = emission_table(params, path)
    node = np.zeros((T, d))
    edge = np.zeros((max(T - 1, 0), d, d))
    Z = 0.0
    for xs in itertools.product(range(d), repeat=T):
        p = params.pi[xs[0]] * lik[0, xs[0]]
        for t in range(1, T):
            p *= params.A[xs[t - 1], xs[t]] * lik[t, xs[t]]
        Z += p
        for t in range(T):
            node[t, xs[t]] += p
        for t in range(T - 1):
            edge[t, xs[t], xs[t + 1]] += p
    return node / Z, edge / Z, Z


def enumerate_tree(cardinality, edges, evidence=None):
    """Exact node and edge marginals of a pairwise tree model by full enumeration.

    ``evidence`` clamps nodes to a single state.
    """
    evidence = evidence or {}
    J = len(cardinality)
    node = [np.zeros(c) for c in cardinality]
    edge = {k: np.zeros(v.shape) for k, v in edges.items()}
    Z = 0.0
    for xs in itertools.product(*[range(c) for c in cardinality]):
        if any(xs[i] != v for i, v in evidence.items()):
            continue
        p = 1.0
        for (i, j), psi in edges.items():
            p *= psi[xs[i], xs[j]]
        Z += p
        for i in range(J):
            node[i][xs[i]] += p
        for (i, j) in edges:
            edge[(i, j)][xs[i], xs[j]] += p
    return [n / Z for n in node], {k: v / Z for k, v in edge.items()}, Z


def random_tree_edges(rng, J, card):
    """Random labelled tree: node ``k`` attaches to a random earlier node."""
    edges = {}
    for k in range(1, J):
        parent = int(rng.integers(k))
        edges[(parent, k)] = rng.uniform(0.2, 2.0, size=(card[parent], card[k]))
    return edges


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_acceptance_lines = []


@pytest.fixture
def record_criterion():
    """Collects one status line per acceptance criterion for the run summary."""
    def record(line):
        print(line)
        _acceptance_lines.append(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
