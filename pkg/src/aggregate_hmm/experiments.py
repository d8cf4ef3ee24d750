"""Seeded synthetic experiments and the grid-flow smoke test.

Every job derives all of its random streams from ``(seed, role)`` so a run
is reproducible byte for byte apart from the wall-time fields in the
manifest.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import os
import subprocess
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .evaluate import LearningCurve, nll
from .inference import cfb_discrete_batch
from .learning import (EmOptions, EStepError, baum_welch_reference,
                       em_fit_ensemble, em_fit_gaussian)
from .model import (DiscreteEmission, EmissionSpec, GaussianEmission, HmmParams,
                    random_init, validate)
from .synth import (ExperimentSpec, aggregate_counts, gen_ground_truth,
                    group_samples, sample_trajectories)
from .tree import ConvergenceError

log = logging.getLogger(__name__)

KINDS = ("discrete", "gaussian", "grid-flow-smoke")
MONOTONE_SLACK = 1e-9
GAUSSIAN_DEFAULT_D = (5, 10, 20)
# Exact histograms with forced empty moves make the scaling fixed point
# converge sublinearly; flows only need resolving to a fraction of one mover.
GRID_INFERENCE_TOL = 1e-5

# stream roles for SeedSequence([seed, role])
_TRAIN, _TEST, _INIT = 1, 2, 3


class ValidationError(ValueError):
    pass


class InvariantViolation(RuntimeError):
    pass


def _default_em() -> EmOptions:
    return EmOptions(max_iters=50, tol=1e-6)


@dataclass(frozen=True)
class GridConfig:
    width: int = 2
    height: int = 2
    walk: str = "clockwise"
    noise: float = 0.0
    M: int = 20
    sequences: int = 5
    T: int = 4
    threshold: float = 1.0

    @classmethod
    def from_dict(cls, data: dict) -> "GridConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class RunConfig:
    """A grid of experiments replicated over seeds."""

    kind: str = "discrete"
    d: Tuple[int, ...] = (3,)
    T: Tuple[int, ...] = (5,)
    N: Tuple[int, ...] = (1000,)
    M: Tuple[int, ...] = (1,)
    seeds: Tuple[int, ...] = (0,)
    out: str = "results"
    method: str = "sbp"
    obs_dim: int = 1
    em: EmOptions = field(default_factory=_default_em)
    grid: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown experiment kind {self.kind!r}")
        if self.method not in ("sbp", "baum-welch"):
            raise ValidationError(f"unknown method {self.method!r}")
        for name in ("d", "T", "N", "M", "seeds"):
            values = tuple(int(v) for v in getattr(self, name))
            if not values:
                raise ValidationError(f"grid field {name!r} is empty")
            object.__setattr__(self, name, values)
        if self.kind != "grid-flow-smoke":
            for spec in self.specs():
                if self.method == "baum-welch" and spec.M != 1:
                    raise ValidationError("the Baum-Welch method needs M = 1")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        if "em" in data:
            data["em"] = EmOptions.from_dict(data["em"])
        if "grid" in data:
            data["grid"] = GridConfig.from_dict(data["grid"])
        if data.get("kind") == "gaussian":
            data.setdefault("d", GAUSSIAN_DEFAULT_D)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown config fields {sorted(unknown)}")
        try:
            return cls(**data)
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d": list(self.d), "T": list(self.T),
                "N": list(self.N), "M": list(self.M), "seeds": list(self.seeds),
                "out": self.out, "method": self.method, "obs_dim": self.obs_dim,
                "em": self.em.to_dict(), "grid": self.grid.__dict__.copy()}

    def specs(self) -> List[ExperimentSpec]:
        out = []
        for d, T, N, M, seed in itertools.product(self.d, self.T, self.N, self.M, self.seeds):
            try:
                out.append(ExperimentSpec(d=d, T=T, N=N, M=M, kind=self.kind, seed=seed,
                                          em=self.em, obs_dim=self.obs_dim))
            except ValueError as exc:
                raise ValidationError(str(exc)) from exc
        return out


def _stream(seed: int, role: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, role])


def job_name(spec: ExperimentSpec) -> str:
    return f"{spec.kind}_d{spec.d}_T{spec.T}_N{spec.N}_M{spec.M}_seed{spec.seed}"


def run_job(spec: ExperimentSpec, method: str = "sbp") -> Tuple[LearningCurve, HmmParams, HmmParams]:
    """Generate, train and evaluate one grid point.

    The curve holds test ΔNLL after every EM iteration.  If EM stops early on
    its tolerance the last value is repeated up to ``max_iters`` since the
    parameters no longer change.
    """
    truth = gen_ground_truth(spec)
    train = sample_trajectories(truth, spec.N, spec.T, _stream(spec.seed, _TRAIN))
    test = sample_trajectories(truth, spec.N, spec.T, _stream(spec.seed, _TEST))
    curve = LearningCurve(d=spec.d, T=spec.T, N=spec.N, M=spec.M, seed=spec.seed,
                          nll_truth=nll(truth, test),
                          obs_dim=spec.obs_dim if spec.kind == "gaussian" else 1)

    def on_iteration(it, params):
        curve.record(nll(params, test))

    init_seed = _stream(spec.seed, _INIT)
    if spec.kind == "discrete":
        init = random_init(spec.d, spec.T, EmissionSpec("discrete", spec.d), init_seed)
        if method == "baum-welch":
            learned, trace = baum_welch_reference(train, init, spec.em, on_iteration)
        else:
            sequences = aggregate_counts(train, spec.M, spec.d)
            learned, trace = em_fit_ensemble(sequences, init, spec.em, on_iteration)
    else:
        d = spec.d
        init = random_init(d, spec.T, EmissionSpec("gaussian", spec.obs_dim, (-5.0 * d, 5.0 * d)),
                           init_seed)
        # only means are learned; covariances stay at their true values
        init = init.replace(emission=GaussianEmission(init.emission.means, truth.emission.covs))
        em = spec.em if spec.em.estimate_cov else replace(spec.em, freeze=spec.em.freeze | {"cov"})
        learned, trace = em_fit_gaussian(group_samples(train, spec.M), init, em, on_iteration)

    if method == "sbp":
        steps = np.diff(trace.neg_bethe)
        if steps.size and steps.min() < -MONOTONE_SLACK:
            raise InvariantViolation(
                f"{job_name(spec)}: -F_Bethe decreased by {-steps.min():.3g}")
    problems = validate(learned)
    if problems:
        raise InvariantViolation(f"{job_name(spec)}: " + "; ".join(map(str, problems)))
    while len(curve.delta_nll) < spec.em.max_iters:
        curve.record(curve.nll_learned[-1])
    return curve, truth, learned


def _atomic_write(path: Path, write) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _write_text(path: Path, text: str) -> None:
    def write(tmp):
        Path(tmp).write_text(text)
    _atomic_write(path, write)


def _execute(args) -> dict:
    spec, method, out = args
    name = job_name(spec)
    start = time.perf_counter()
    try:
        curve, truth, learned = run_job(spec, method)
    except (EStepError, ConvergenceError) as exc:
        _write_text(out / f"{name}.failed", f"convergence failure: {exc}\n")
        return {"job": name, "status": "convergence-failure", "error": str(exc),
                "wall_time": time.perf_counter() - start}
    except InvariantViolation as exc:
        _write_text(out / f"{name}.failed", f"invariant violation: {exc}\n")
        return {"job": name, "status": "invariant-violation", "error": str(exc),
                "wall_time": time.perf_counter() - start}
    _atomic_write(out / f"{name}.csv", curve.write_csv)
    _write_text(out / f"{name}_truth.json", json.dumps(truth.to_dict()) + "\n")
    _write_text(out / f"{name}_learned.json", json.dumps(learned.to_dict()) + "\n")
    return {"job": name, "status": "ok", "final_delta_nll": curve.delta_nll[-1],
            "wall_time": time.perf_counter() - start}


def git_describe() -> str:
    try:
        result = subprocess.run(["git", "describe", "--always", "--dirty"],
                                cwd=Path(__file__).resolve().parent,
                                capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return result.stdout.strip() or "unknown"


def run_experiment(config: RunConfig, out: Optional[str] = None, jobs: int = 1,
                   seed_offset: int = 0) -> int:
    """Run every grid point and seed, writing CSVs and a manifest.

    Returns the process exit status: 0 when every job succeeded, 3 if any
    E-step failed to converge, 2 for any other invariant violation.
    """
    if seed_offset:
        config = replace(config, seeds=tuple(s + seed_offset for s in config.seeds))
    out_dir = Path(out or config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.kind == "grid-flow-smoke":
        return grid_flow_smoke(config, out_dir)

    tasks = [(spec, config.method, out_dir) for spec in config.specs()]
    started = time.perf_counter()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_execute, tasks))
    else:
        results = [_execute(task) for task in tasks]
    manifest = {"config": config.to_dict(), "build": git_describe(), "jobs": results,
                "wall_time": time.perf_counter() - started}
    _write_text(out_dir / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    statuses = {r["status"] for r in results}
    if "convergence-failure" in statuses:
        return 3
    if "invariant-violation" in statuses:
        return 2
    return 0


def grid_cells(width: int, height: int):
    return [(r, c) for r in range(height) for c in range(width)]


def grid_moves(width: int, height: int) -> np.ndarray:
    """Allowed transitions: stay, or step to one of the four neighbours."""
    cells = grid_cells(width, height)
    index = {cell: i for i, cell in enumerate(cells)}
    allowed = np.eye(len(cells), dtype=bool)
    for (r, c), i in index.items():
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            j = index.get((r + dr, c + dc))
            if j is not None:
                allowed[i, j] = True
    return allowed


def clockwise_walk(width: int, height: int) -> np.ndarray:
    """Deterministic clockwise loop around the border; interior cells stay put."""
    n = width * height
    A = np.eye(n)
    if width < 2 or height < 2:
        return A
    ring = [(0, c) for c in range(width)]
    ring += [(r, width - 1) for r in range(1, height)]
    ring += [(height - 1, c) for c in range(width - 2, -1, -1)]
    ring += [(r, 0) for r in range(height - 2, 0, -1)]
    for a, b in zip(ring, ring[1:] + ring[:1]):
        i, j = a[0] * width + a[1], b[0] * width + b[1]
        A[i] = 0.0
        A[i, j] = 1.0
    return A


def misread_emission(width: int, height: int, noise: float) -> np.ndarray:
    """A position is reported in its own cell, or with probability ``noise``
    in one of its (up to eight) surrounding cells, uniformly."""
    cells = grid_cells(width, height)
    index = {cell: i for i, cell in enumerate(cells)}
    B = np.zeros((len(cells), len(cells)))
    for (r, c), i in index.items():
        around = [index[(r + dr, c + dc)] for dr in (-1, 0, 1) for dc in (-1, 0, 1)
                  if (dr or dc) and (r + dr, c + dc) in index]
        if around and noise > 0:
            B[i, i] = 1.0 - noise
            B[i, around] = noise / len(around)
        else:
            B[i, i] = 1.0
    return B


def estimate_flows(params: HmmParams, y: np.ndarray, M: int, tol: float = None) -> np.ndarray:
    """Expected movers per step between cells, summed over sequences."""
    marg = cfb_discrete_batch(params, y, tol=tol or GRID_INFERENCE_TOL, max_passes=20000)
    return M * marg.edge.sum(axis=0).mean(axis=0)


def flow_arcs(flows: np.ndarray, threshold: float) -> List[Tuple[int, int, float]]:
    arcs = [(i, j, float(flows[i, j])) for i in range(flows.shape[0])
            for j in range(flows.shape[1]) if i != j and flows[i, j] > threshold]
    return sorted(arcs, key=lambda a: (-a[2], a[0], a[1]))


def grid_flow_smoke(config: RunConfig, out_dir: Path) -> int:
    """Recover population flows on a small grid from noisy aggregate counts.

    Writes ``flows_seed<k>.csv`` per seed listing arcs above the threshold.
    """
    g = config.grid
    if g.M < 1 or g.sequences < 1:
        raise ValidationError("grid-flow smoke test needs a positive population")
    if g.walk not in ("clockwise", "random"):
        raise ValidationError(f"unknown walk {g.walk!r}")
    results = []
    for seed in config.seeds:
        start = time.perf_counter()
        arcs, _, _ = run_grid_flow(g, seed, config.em)
        path = out_dir / f"flows_seed{seed}.csv"

        def write(tmp, arcs=arcs):
            with open(tmp, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(("from", "to", "flow"))
                for i, j, f in arcs:
                    writer.writerow((i, j, f"{f:.10g}"))
        _atomic_write(path, write)
        results.append({"seed": seed, "arcs": len(arcs), "wall_time": time.perf_counter() - start})
    manifest = {"config": config.to_dict(), "build": git_describe(), "jobs": results}
    _write_text(out_dir / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    return 0


def run_grid_flow(g: GridConfig, seed: int, em: EmOptions = EmOptions()):
    """Plant a walk, aggregate noisy positions, learn transitions, return flow arcs.

    Returns ``(arcs, learned, truth)``.
    """
    if g.M < 1 or g.sequences < 1 or g.T < 2:
        raise ValidationError("grid-flow smoke test needs a positive population and T >= 2")
    n = g.width * g.height
    allowed = grid_moves(g.width, g.height)
    rng = np.random.default_rng(_stream(seed, _INIT))
    if g.walk == "clockwise":
        A = clockwise_walk(g.width, g.height)
    else:
        A = np.where(allowed, rng.dirichlet(np.ones(n), size=n), 0.0)
        A /= A.sum(axis=1, keepdims=True)
    B = misread_emission(g.width, g.height, g.noise)
    truth = HmmParams(pi=rng.dirichlet(np.ones(n)), A=A, emission=DiscreteEmission(B), T=g.T)
    traj = sample_trajectories(truth, g.M * g.sequences, g.T, _stream(seed, _TRAIN))
    sequences = aggregate_counts(traj, g.M, n)

    init_A = allowed / allowed.sum(axis=1, keepdims=True)
    init = HmmParams(pi=np.full(n, 1.0 / n), A=init_A, emission=DiscreteEmission(B), T=g.T)
    # sparse walks slow the E-step fixed point down, so give it more room
    opts = replace(em, freeze=em.freeze | {"B"}, max_iters=em.max_iters,
                   inference_tol=max(em.inference_tol, GRID_INFERENCE_TOL),
                   inference_max_passes=max(em.inference_max_passes, 20000))
    learned, _ = em_fit_ensemble(sequences, init, opts)
    y = np.stack([s.y for s in sequences])
    flows = estimate_flows(learned, y, g.M)
    return flow_arcs(flows, g.threshold), learned, truth
