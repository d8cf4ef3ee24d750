"""Domain types for aggregate HMMs.

Parameters, aggregate observation sequences, inferred marginals and sampled
trajectories, together with validation, seeded initialization and the JSON
file formats used by the command line tool.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

PROB_ATOL = 1e-12
SYMMETRY_ATOL = 1e-10
HISTOGRAM_ATOL = 1e-9


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DiscreteEmission:
    """Row-stochastic emission matrix ``B[x, o] = p(o | x)``."""

    B: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "B", _frozen(np.atleast_2d(self.B)))

    kind = "discrete"

    @property
    def num_symbols(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class GaussianEmission:
    """One Gaussian density per hidden state.

    ``means`` has shape ``(d, s)`` and ``covs`` has shape ``(d, s, s)``.
    """

    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covs, dtype=float)
        if covs.ndim == 1:
            covs = covs[:, None, None]
        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "covs", _frozen(covs))

    kind = "gaussian"

    @property
    def dim(self) -> int:
        return self.means.shape[1]


Emission = Union[DiscreteEmission, GaussianEmission]


@dataclass(frozen=True)
class HmmParams:
    """Time-homogeneous HMM of horizon ``T``."""

    pi: np.ndarray
    A: np.ndarray
    emission: Emission
    T: int = 1

    def __post_init__(self):
        object.__setattr__(self, "pi", _frozen(np.atleast_1d(self.pi)))
        object.__setattr__(self, "A", _frozen(np.atleast_2d(self.A)))
        object.__setattr__(self, "T", int(self.T))

    @property
    def num_states(self) -> int:
        return self.pi.shape[0]

    @property
    def is_discrete(self) -> bool:
        return isinstance(self.emission, DiscreteEmission)

    def replace(self, **changes) -> "HmmParams":
        kwargs = dict(pi=self.pi, A=self.A, emission=self.emission, T=self.T)
        kwargs.update(changes)
        return HmmParams(**kwargs)

    def to_dict(self) -> dict:
        out = {"d": self.num_states, "T": self.T, "pi": self.pi.tolist(),
               "A": self.A.tolist()}
        if self.is_discrete:
            out["emission"] = {"kind": "discrete", "B": self.emission.B.tolist()}
        else:
            out["emission"] = {"kind": "gaussian",
                               "means": self.emission.means.tolist(),
                               "covs": self.emission.covs.tolist()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "HmmParams":
        em = data["emission"]
        if em["kind"] == "discrete":
            emission = DiscreteEmission(em["B"])
        elif em["kind"] == "gaussian":
            emission = GaussianEmission(em["means"], em["covs"])
        else:
            raise ValueError(f"unknown emission kind {em['kind']!r}")
        params = cls(pi=data["pi"], A=data["A"], emission=emission, T=data["T"])
        if "d" in data and int(data["d"]) != params.num_states:
            raise ValueError(f"d={data['d']} but pi has {params.num_states} entries")
        return params


@dataclass(frozen=True)
class AggregateSequence:
    """Normalized per-time histograms ``y[t, o]`` of a population of size ``M``."""

    M: int
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "y", _frozen(np.atleast_2d(self.y)))

    @classmethod
    def from_counts(cls, counts) -> "AggregateSequence":
        counts = np.atleast_2d(np.asarray(counts, dtype=float))
        totals = counts.sum(axis=1)
        if not np.allclose(totals, totals[0]):
            raise ValueError("every time step must count the same population")
        M = int(round(totals[0]))
        if M <= 0:
            raise ValueError("population must be positive")
        return cls(M=M, y=counts / M)

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def num_symbols(self) -> int:
        return self.y.shape[1]

    def to_dict(self) -> dict:
        return {"M": self.M, "y": self.y.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "AggregateSequence":
        return cls(M=data["M"], y=data["y"])


@dataclass(frozen=True)
class MarginalSet:
    """Inferred marginals of one aggregate sequence.

    ``node[t]`` is ``n_t``, ``edge[t]`` is ``n_{t,t+1}``.  Discrete models fill
    ``obs[t]`` (the joint ``n_{t,t}`` over hidden state and symbol); continuous
    models fill ``weights[t, m]``, the per-sample state posterior normalized
    over states.
    """

    node: np.ndarray
    edge: np.ndarray
    obs: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    residual: float = 0.0
    passes: int = 0

    def __post_init__(self):
        object.__setattr__(self, "node", _frozen(self.node))
        object.__setattr__(self, "edge", _frozen(self.edge))
        if self.obs is not None:
            object.__setattr__(self, "obs", _frozen(self.obs))
        if self.weights is not None:
            object.__setattr__(self, "weights", _frozen(self.weights))

    @property
    def T(self) -> int:
        return self.node.shape[0]

    def to_dict(self) -> dict:
        out = {"node": self.node.tolist(), "edge": self.edge.tolist(),
               "residual": self.residual, "passes": self.passes}
        if self.obs is not None:
            out["obs"] = self.obs.tolist()
        if self.weights is not None:
            out["weights"] = self.weights.tolist()
        return out


@dataclass(frozen=True)
class TrajectorySet:
    """Sampled individual paths.

    ``x`` holds hidden states with shape ``(N, T)``.  ``o`` holds symbol indices
    with shape ``(N, T)`` or real vectors with shape ``(N, T, s)``.
    """

    x: np.ndarray
    o: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=np.int64))
        o = np.asarray(self.o)
        o = o.astype(np.int64) if np.issubdtype(o.dtype, np.integer) else o.astype(float)
        if o.ndim == 1:
            o = o[None, :]
        if x.shape != o.shape[:2]:
            raise ValueError(f"hidden paths {x.shape} and observations {o.shape[:2]} disagree")
        object.__setattr__(self, "x", _frozen(x, np.int64))
        object.__setattr__(self, "o", _frozen(o, o.dtype))

    @property
    def discrete(self) -> bool:
        return np.issubdtype(self.o.dtype, np.integer)

    @property
    def N(self) -> int:
        return self.x.shape[0]

    @property
    def T(self) -> int:
        return self.x.shape[1]

    def subset(self, index) -> "TrajectorySet":
        return TrajectorySet(self.x[index], self.o[index])

    def to_jsonl(self) -> str:
        lines = []
        for x, o in zip(self.x, self.o):
            lines.append(json.dumps({"x": x.tolist(), "o": o.tolist()}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "TrajectorySet":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not rows:
            raise ValueError("trajectory file is empty")
        x = [r["x"] for r in rows]
        o = [r["o"] for r in rows]
        arr = np.asarray(o)
        if all(isinstance(v, int) for r in o for v in r):
            arr = arr.astype(np.int64)
        return cls(x=x, o=arr)


class Violation(NamedTuple):
    field: str
    message: str

    def __str__(self):
        return f"{self.field}: {self.message}"


def _check_stochastic(name: str, arr: np.ndarray, out: list) -> None:
    if not np.all(np.isfinite(arr)):
        out.append(Violation(name, "contains non-finite entries"))
        return
    if arr.size and arr.min() < 0:
        out.append(Violation(name, f"has negative entry {arr.min():.6g}"))
    sums = arr.sum(axis=-1)
    for idx in np.ndindex(sums.shape):
        if abs(sums[idx] - 1.0) > PROB_ATOL:
            where = f"{name}[{idx[0]}]" if idx else name
            label = where.replace("pi", "π", 1)
            out.append(Violation(where, f"{label} sums to {sums[idx]:.12g}"))


def validate(params: HmmParams) -> list[Violation]:
    """Return every invariant violation in ``params`` (empty when valid)."""
    out: list[Violation] = []
    d = params.pi.shape[0]
    if params.T < 1:
        out.append(Violation("T", f"horizon must be positive, got {params.T}"))
    if params.pi.ndim != 1 or d < 1:
        out.append(Violation("pi", f"pi must be a non-empty vector, got shape {params.pi.shape}"))
        return out
    _check_stochastic("pi", params.pi, out)
    if params.A.shape != (d, d):
        out.append(Violation("A", f"A has shape {params.A.shape}, expected {(d, d)}"))
    else:
        _check_stochastic("A", params.A, out)

    em = params.emission
    if isinstance(em, DiscreteEmission):
        if em.B.ndim != 2 or em.B.shape[0] != d or em.B.shape[1] < 1:
            out.append(Violation("B", f"B has shape {em.B.shape}, expected ({d}, s)"))
        else:
            _check_stochastic("B", em.B, out)
    else:
        s = em.means.shape[1] if em.means.ndim == 2 else 0
        if em.means.shape != (d, s) or s < 1:
            out.append(Violation("means", f"means has shape {em.means.shape}, expected ({d}, s)"))
        if em.covs.shape != (d, s, s):
            out.append(Violation("covs", f"covs has shape {em.covs.shape}, expected {(d, s, s)}"))
            return out
        if not np.all(np.isfinite(em.means)):
            out.append(Violation("means", "contains non-finite entries"))
        for x, cov in enumerate(em.covs):
            if not np.all(np.isfinite(cov)):
                out.append(Violation(f"covs[{x}]", f"Σ[{x}] has non-finite entries"))
                continue
            asym = np.max(np.abs(cov - cov.T))
            if asym > SYMMETRY_ATOL:
                out.append(Violation(f"covs[{x}]", f"Σ[{x}] not symmetric (max |Σ-Σᵀ| = {asym:.3g})"))
            low = np.linalg.eigvalsh(0.5 * (cov + cov.T))[0]
            if low <= 0:
                out.append(Violation(f"covs[{x}]",
                                     f"Σ[{x}] not positive definite (smallest eigenvalue {low:.6g})"))
    return out


def validate_sequence(seq: AggregateSequence) -> list[Violation]:
    out: list[Violation] = []
    if seq.M < 1:
        out.append(Violation("M", f"population must be positive, got {seq.M}"))
    if seq.y.size == 0:
        out.append(Violation("y", "no observations"))
        return out
    if seq.y.min() < 0:
        out.append(Violation("y", f"negative histogram entry {seq.y.min():.6g}"))
    sums = seq.y.sum(axis=1)
    for t, total in enumerate(sums):
        if abs(total - 1.0) > HISTOGRAM_ATOL:
            out.append(Violation(f"y[{t}]", f"y[{t}] sums to {total:.12g}"))
    if seq.M >= 1:
        counts = seq.M * seq.y
        # float division by M leaves ~M·eps of rounding
        defect = np.max(np.abs(counts - np.round(counts)))
        if defect > 1e-6:
            out.append(Violation("y", f"M·y has non-integer entries (max defect {defect:.3g})"))
    return out


@dataclass(frozen=True)
class EmissionSpec:
    """What kind of emission model :func:`random_init` should draw.

    ``size`` is the symbol count for discrete models and the observation
    dimension for Gaussian ones; means are drawn uniformly from ``mean_range``.
    """

    kind: str = "discrete"
    size: int = 2
    mean_range: tuple = (-1.0, 1.0)


def random_init(d: int, T: int, emission_spec: EmissionSpec, seed) -> HmmParams:
    """Draw initial parameters with symmetric Dirichlet(1) rows."""
    if d < 1 or T < 1 or emission_spec.size < 1:
        raise ValueError(f"invalid dimensions d={d}, T={T}, size={emission_spec.size}")
    rng = np.random.default_rng(seed)
    pi = rng.dirichlet(np.ones(d))
    A = rng.dirichlet(np.ones(d), size=d)
    if emission_spec.kind == "discrete":
        emission = DiscreteEmission(rng.dirichlet(np.ones(emission_spec.size), size=d))
    elif emission_spec.kind == "gaussian":
        lo, hi = emission_spec.mean_range
        s = emission_spec.size
        emission = GaussianEmission(rng.uniform(lo, hi, size=(d, s)),
                                    np.broadcast_to(np.eye(s), (d, s, s)))
    else:
        raise ValueError(f"unknown emission kind {emission_spec.kind!r}")
    return HmmParams(pi=pi, A=A, emission=emission, T=T)


def load_params(path) -> HmmParams:
    return HmmParams.from_dict(json.loads(Path(path).read_text()))


def save_params(params: HmmParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict()) + "\n")


def load_sequences(path) -> list[AggregateSequence]:
    """Read one sequence object, or a JSON list of them."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, list):
        return [AggregateSequence.from_dict(item) for item in data]
    return [AggregateSequence.from_dict(data)]


def load_trajectories(path) -> TrajectorySet:
    return TrajectorySet.from_jsonl(Path(path).read_text())


def stack_histograms(sequences: Sequence[AggregateSequence]) -> np.ndarray:
    """Stack histograms into a ``(K, T, s)`` array, checking shapes agree."""
    shapes = {seq.y.shape for seq in sequences}
    if len(shapes) != 1:
        raise ValueError(f"sequences disagree in shape: {sorted(shapes)}")
    return np.stack([seq.y for seq in sequences])
