import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aggregate_hmm.model import (AggregateSequence, DiscreteEmission, EmissionSpec,
                                 GaussianEmission, HmmParams, MarginalSet, TrajectorySet,
                                 load_params, load_sequences, random_init, save_params,
                                 stack_histograms, validate, validate_sequence)


def uniform_params(d=3, s=2, T=4):
    return HmmParams(pi=np.full(d, 1 / d), A=np.full((d, d), 1 / d),
                     emission=DiscreteEmission(np.full((d, s), 1 / s)), T=T)


def test_uniform_model_is_valid():
    assert validate(uniform_params()) == []


def test_pi_sum_reported_with_measured_total():
    params = HmmParams(pi=[0.5, 0.6], A=np.eye(2), emission=DiscreteEmission(np.eye(2)), T=2)
    problems = validate(params)
    assert len(problems) == 1
    assert problems[0].field == "pi"
    assert "π sums to 1.1" in problems[0].message


def test_indefinite_covariance_reported():
    covs = np.array([np.diag([1.0, -0.1]), np.eye(2)])
    params = HmmParams(pi=[0.5, 0.5], A=np.eye(2),
                       emission=GaussianEmission(np.zeros((2, 2)), covs), T=2)
    problems = validate(params)
    assert [p.field for p in problems] == ["covs[0]"]
    assert "Σ[0] not positive definite" in problems[0].message
    assert "-0.1" in problems[0].message


def test_asymmetric_covariance_and_bad_rows_reported():
    covs = np.array([[[1.0, 0.2], [0.0, 1.0]]])
    params = HmmParams(pi=[1.0], A=[[0.9]], emission=GaussianEmission([[0.0, 0.0]], covs), T=1)
    fields = {p.field for p in validate(params)}
    assert fields == {"A[0]", "covs[0]"}


def test_negative_and_shape_violations():
    params = HmmParams(pi=[1.2, -0.2], A=np.eye(2), emission=DiscreteEmission(np.eye(3)), T=2)
    fields = [p.field for p in validate(params)]
    assert "pi" in fields and "B" in fields


def test_random_init_single_state():
    params = random_init(1, 5, EmissionSpec("discrete", 4), seed=99)
    np.testing.assert_array_equal(params.pi, [1.0])
    np.testing.assert_array_equal(params.A, [[1.0]])
    assert validate(params) == []


def test_random_init_is_seeded():
    a = random_init(3, 4, EmissionSpec("discrete", 3), seed=7)
    b = random_init(3, 4, EmissionSpec("discrete", 3), seed=7)
    c = random_init(3, 4, EmissionSpec("discrete", 3), seed=8)
    assert a.to_dict() == b.to_dict()
    assert not np.allclose(a.A, c.A)


def test_random_init_gaussian_uses_range_and_identity():
    params = random_init(4, 3, EmissionSpec("gaussian", 2, (-20.0, 20.0)), seed=1)
    assert validate(params) == []
    assert np.all(np.abs(params.emission.means) <= 20.0)
    np.testing.assert_array_equal(params.emission.covs, np.broadcast_to(np.eye(2), (4, 2, 2)))


def test_random_init_rejects_bad_dimensions():
    with pytest.raises(ValueError):
        random_init(0, 3, EmissionSpec(), seed=0)
    with pytest.raises(ValueError):
        random_init(2, 3, EmissionSpec("poisson", 2), seed=0)


@settings(max_examples=60, deadline=None)
@given(d=st.integers(1, 20), seed=st.integers(0, 2**63 - 1), gaussian=st.booleans())
def test_random_init_always_valid(d, seed, gaussian):
    spec = EmissionSpec("gaussian", 2, (-5, 5)) if gaussian else EmissionSpec("discrete", 3)
    assert validate(random_init(d, 3, spec, seed)) == []


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 6), s=st.integers(1, 4), seed=st.integers(0, 2**32 - 1),
       gaussian=st.booleans())
def test_json_round_trip_is_bit_exact(d, s, seed, gaussian, tmp_path_factory):
    spec = EmissionSpec("gaussian", s, (-3, 3)) if gaussian else EmissionSpec("discrete", s)
    params = random_init(d, 5, spec, seed)
    path = tmp_path_factory.mktemp("models") / "m.json"
    save_params(params, path)
    back = load_params(path)
    assert back.T == params.T
    np.testing.assert_array_equal(back.pi, params.pi)
    np.testing.assert_array_equal(back.A, params.A)
    if gaussian:
        np.testing.assert_array_equal(back.emission.means, params.emission.means)
        np.testing.assert_array_equal(back.emission.covs, params.emission.covs)
    else:
        np.testing.assert_array_equal(back.emission.B, params.emission.B)


def test_model_file_format_fields():
    data = uniform_params().to_dict()
    assert set(data) == {"d", "T", "pi", "A", "emission"}
    assert data["emission"]["kind"] == "discrete"
    with pytest.raises(ValueError):
        HmmParams.from_dict({**data, "d": 5})


def test_params_are_immutable():
    params = uniform_params()
    with pytest.raises(ValueError):
        params.A[0, 0] = 1.0


def test_aggregate_sequence_from_counts_and_files(tmp_path):
    seq = AggregateSequence.from_counts([[3, 1], [2, 2]])
    assert seq.M == 4
    np.testing.assert_allclose(seq.y, [[0.75, 0.25], [0.5, 0.5]])
    assert validate_sequence(seq) == []
    with pytest.raises(ValueError):
        AggregateSequence.from_counts([[3, 1], [2, 1]])
    path = tmp_path / "seqs.json"
    path.write_text(json.dumps([seq.to_dict(), seq.to_dict()]))
    seqs = load_sequences(path)
    assert len(seqs) == 2 and stack_histograms(seqs).shape == (2, 2, 2)
    path.write_text(json.dumps(seq.to_dict()))
    assert len(load_sequences(path)) == 1


def test_sequence_validation_flags_defects():
    bad = AggregateSequence(M=4, y=[[0.5, 0.6], [0.3, 0.7]])
    fields = {p.field for p in validate_sequence(bad)}
    assert "y[0]" in fields and "y" in fields


def test_trajectory_jsonl_round_trip():
    traj = TrajectorySet(x=[[0, 1], [1, 1]], o=[[2, 0], [1, 1]])
    back = TrajectorySet.from_jsonl(traj.to_jsonl())
    assert back.discrete
    np.testing.assert_array_equal(back.o, traj.o)
    real = TrajectorySet(x=[[0, 1]], o=[[[0.5], [1.5]]])
    back = TrajectorySet.from_jsonl(real.to_jsonl())
    assert not back.discrete and back.o.shape == (1, 2, 1)
    with pytest.raises(ValueError):
        TrajectorySet(x=[[0, 1, 0]], o=[[0, 1]])


def test_marginal_set_serializes():
    m = MarginalSet(node=np.full((2, 2), 0.5), edge=np.full((1, 2, 2), 0.25))
    data = m.to_dict()
    assert "obs" not in data and len(data["edge"]) == 1
