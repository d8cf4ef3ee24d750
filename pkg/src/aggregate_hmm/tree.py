"""Belief propagation and Sinkhorn belief propagation on trees.

Messages live in the linear domain and are renormalized to sum one after
every update.  Observed nodes must be leaves; the message leaving an observed
leaf is the scaling update that pins the leaf marginal to its histogram.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import xlogy

FLOOR = 1e-300

Edge = Tuple[int, int]


class NotATreeError(ValueError):
    pass


class ConstraintViolation(ValueError):
    pass


class ConvergenceError(RuntimeError):
    """Message passing did not reach the tolerance in the allotted passes."""

    def __init__(self, message, residual, passes):
        super().__init__(message)
        self.residual = residual
        self.passes = passes


def _normalize(v: np.ndarray) -> np.ndarray:
    v = np.maximum(v, FLOOR)
    return v / v.sum()


@dataclass(frozen=True)
class TreeModel:
    """Pairwise model on a tree.

    ``edges`` maps ``(i, j)`` to a strictly positive table ``psi[x_i, x_j]``;
    ``observed`` maps observed leaves to their normalized histograms.
    """

    cardinality: Tuple[int, ...]
    edges: Dict[Edge, np.ndarray]
    observed: Dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        card = tuple(int(c) for c in self.cardinality)
        object.__setattr__(self, "cardinality", card)
        J = len(card)
        edges = {}
        for (i, j), psi in self.edges.items():
            psi = np.array(psi, dtype=float)
            if i == j or not (0 <= i < J and 0 <= j < J):
                raise NotATreeError(f"invalid edge ({i}, {j})")
            if (j, i) in edges or (i, j) in edges:
                raise NotATreeError(f"duplicate edge ({i}, {j})")
            if psi.shape != (card[i], card[j]):
                raise ValueError(f"potential on ({i}, {j}) has shape {psi.shape}, "
                                 f"expected {(card[i], card[j])}")
            if not np.all(psi > 0):
                raise ValueError(f"potential on ({i}, {j}) must be strictly positive")
            psi.setflags(write=False)
            edges[(i, j)] = psi
        object.__setattr__(self, "edges", edges)

        nbrs = [[] for _ in range(J)]
        for i, j in edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        object.__setattr__(self, "_nbrs", tuple(tuple(sorted(n)) for n in nbrs))
        if J == 0 or len(edges) != J - 1 or not self._connected():
            raise NotATreeError(f"{J} nodes and {len(edges)} edges do not form a tree")

        observed = {}
        for i, y in self.observed.items():
            y = np.array(y, dtype=float)
            if y.shape != (card[i],):
                raise ValueError(f"histogram for node {i} has shape {y.shape}")
            if len(self._nbrs[i]) != 1:
                raise ValueError(f"observed node {i} is not a leaf")
            y.setflags(write=False)
            observed[int(i)] = y
        object.__setattr__(self, "observed", observed)

    @property
    def num_nodes(self) -> int:
        return len(self.cardinality)

    def neighbors(self, i: int) -> Tuple[int, ...]:
        return self._nbrs[i]

    def degree(self, i: int) -> int:
        return len(self._nbrs[i])

    def potential(self, i: int, j: int) -> np.ndarray:
        """Table indexed ``[x_i, x_j]`` whichever way the edge was stored."""
        if (i, j) in self.edges:
            return self.edges[(i, j)]
        return self.edges[(j, i)].T

    def path(self, src: int, dst: int) -> list:
        parent = {src: None}
        queue = deque([src])
        while queue:
            u = queue.popleft()
            if u == dst:
                break
            for v in self._nbrs[u]:
                if v not in parent:
                    parent[v] = u
                    queue.append(v)
        out = [dst]
        while out[-1] != src:
            out.append(parent[out[-1]])
        return out[::-1]

    def _connected(self) -> bool:
        seen = {0}
        queue = deque([0])
        while queue:
            for v in self._nbrs[queue.popleft()]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return len(seen) == len(self.cardinality)

    def _bfs_order(self, root: int = 0):
        order, parent = [root], {root: None}
        for u in order:
            for v in self._nbrs[u]:
                if v not in parent:
                    parent[v] = u
                    order.append(v)
        return order, parent


@dataclass
class TreeMarginals:
    node: Dict[int, np.ndarray]
    edge: Dict[Edge, np.ndarray]
    residual: float = 0.0
    passes: int = 0


MessageSet = Dict[Edge, np.ndarray]


class _Passer:
    def __init__(self, model: TreeModel, scaling: bool):
        self.model = model
        self.scaling = scaling
        self.msgs: MessageSet = {}
        for i in range(model.num_nodes):
            for j in model.neighbors(i):
                c = model.cardinality[j]
                self.msgs[(i, j)] = np.full(c, 1.0 / c)

    def incoming(self, i: int, exclude: Optional[int] = None) -> np.ndarray:
        prod = np.ones(self.model.cardinality[i])
        for k in self.model.neighbors(i):
            if k != exclude:
                prod = prod * self.msgs[(k, i)]
        return prod

    def leaf_factor(self, i: int, j: int) -> np.ndarray:
        # observed leaf i: its histogram divided by the message it receives
        return self.model.observed[i] / np.maximum(self.msgs[(j, i)], FLOOR)

    def update(self, i: int, j: int) -> None:
        if self.scaling and i in self.model.observed:
            f = self.leaf_factor(i, j)
        else:
            f = self.incoming(i, exclude=j)
        self.msgs[(i, j)] = _normalize(self.model.potential(i, j).T @ f)

    def sweep(self) -> None:
        order, parent = self.model._bfs_order()
        for v in reversed(order[1:]):
            self.update(v, parent[v])
        for v in order[1:]:
            self.update(parent[v], v)

    def snapshot(self) -> MessageSet:
        return {k: v.copy() for k, v in self.msgs.items()}

    def change(self, before: MessageSet) -> float:
        if not self.msgs:
            return 0.0
        return max(float(np.max(np.abs(self.msgs[k] - before[k]))) for k in self.msgs)

    def marginals(self) -> TreeMarginals:
        model = self.model
        node = {}
        for i in range(model.num_nodes):
            if self.scaling and i in model.observed:
                node[i] = model.observed[i].copy()
            else:
                p = self.incoming(i)
                node[i] = p / p.sum()
        edge = {}
        for (i, j) in model.edges:
            fi = self.leaf_factor(i, j) if self.scaling and i in model.observed \
                else self.incoming(i, exclude=j)
            fj = self.leaf_factor(j, i) if self.scaling and j in model.observed \
                else self.incoming(j, exclude=i)
            n = model.edges[(i, j)] * fi[:, None] * fj[None, :]
            edge[(i, j)] = n / n.sum()
        return TreeMarginals(node=node, edge=edge)


def run_bp(model: TreeModel, max_sweeps: int = 2) -> Tuple[MessageSet, Dict[int, np.ndarray]]:
    """Exact marginals of an unobserved tree by collect/distribute sweeps.

    One sweep is exact on a tree; further sweeps only confirm the messages no
    longer move.  Evidence must be folded into the potentials by the caller.
    """
    if model.observed:
        raise ValueError("run_bp takes a model without observations; use run_sbp")
    passer = _Passer(model, scaling=False)
    for _ in range(max(1, max_sweeps)):
        before = passer.snapshot()
        passer.sweep()
        if passer.change(before) == 0.0:
            break
    return passer.msgs, passer.marginals().node


def run_sbp(model: TreeModel, schedule: Optional[Sequence[int]] = None,
            tol: float = 1e-9, max_passes: int = 500) -> TreeMarginals:
    """Sinkhorn belief propagation.

    Cycles through ``schedule`` (observed leaves in ascending order by
    default).  At each leaf the outgoing message is rescaled so the leaf
    marginal matches its histogram, then the messages along the path to the
    next scheduled leaf are refreshed.  Stops once the largest message change
    over a full cycle is at most ``tol``.

    Raises
    ------
    ConvergenceError
        If ``max_passes`` cycles do not reach ``tol``.
    """
    observed = sorted(model.observed)
    if schedule is None:
        schedule = observed
    schedule = list(schedule)
    missing = set(observed) - set(schedule)
    if missing:
        raise ValueError(f"schedule never visits observed nodes {sorted(missing)}")
    if any(i not in model.observed for i in schedule):
        raise ValueError("schedule may only contain observed leaves")

    passer = _Passer(model, scaling=True)
    # messages out of unobserved subtrees never change after this sweep
    passer.sweep()
    residual, passes = 0.0, 0
    if schedule:
        paths = [model.path(i, schedule[(k + 1) % len(schedule)])
                 for k, i in enumerate(schedule)]
        residual = np.inf
        while residual > tol:
            if passes >= max_passes:
                raise ConvergenceError(
                    f"SBP did not converge in {max_passes} passes (residual {residual:.3g})",
                    residual, passes)
            before = passer.snapshot()
            for i, path in zip(schedule, paths):
                passer.update(i, model.neighbors(i)[0])
                for a in range(1, len(path) - 1):
                    passer.update(path[a], path[a + 1])
            passes += 1
            residual = passer.change(before)
        # refresh messages pointing into unobserved subtrees
        passer.sweep()
    out = passer.marginals()
    out.residual, out.passes = float(residual), passes
    return out


def bethe_free_energy(model: TreeModel, marginals: TreeMarginals, atol: float = 1e-6) -> float:
    """Bethe free energy of consistent marginals on ``model``.

    Raises
    ------
    ConstraintViolation
        If node marginals are not normalized or edge marginals disagree with
        node marginals by more than ``atol``.
    """
    for i in range(model.num_nodes):
        total = marginals.node[i].sum()
        if abs(total - 1.0) > atol:
            raise ConstraintViolation(f"node {i} marginal sums to {total:.12g}")
    energy = 0.0
    for (i, j), psi in model.edges.items():
        n = marginals.edge[(i, j)]
        for axis, node in ((1, i), (0, j)):
            gap = np.max(np.abs(n.sum(axis=axis) - marginals.node[node]))
            if gap > atol:
                raise ConstraintViolation(
                    f"edge ({i}, {j}) disagrees with node {node} by {gap:.3g}")
        energy += float(np.sum(xlogy(n, n) - n * np.log(psi)))
    for i in range(model.num_nodes):
        n = marginals.node[i]
        energy -= (model.degree(i) - 1) * float(np.sum(xlogy(n, n)))
    return energy
