import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moie.datagen import (ConceptTriplet, ConfigError, DegenerateConfigError, ShiftConfig,
                          SynthConfig, apply_domain_shift, class_weights, generate_synthetic,
                          load_csv, random_shift, relabel, save_csv, split)
from moie.logic import Formula


def _triplet(n_groups=10, rows_per_group=3, seed=0):
    r = np.random.default_rng(seed)
    n = n_groups * rows_per_group
    return ConceptTriplet(X=r.normal(size=(n, 2)), C=r.integers(0, 2, size=(n, 3)),
                          Y=np.arange(n) % 2, groups=np.repeat(np.arange(n_groups), rows_per_group))


def test_single_rule_is_the_labeler():
    cfg = SynthConfig(n=2000, rules=[Formula.parse("c_0 ∧ c_1")], mixing=[1.0],
                      subgroup_noise=[0.5], concept_noise=0.0, seed=3)
    data = generate_synthetic(cfg)
    both = (data.C[:, 0] == 1) & (data.C[:, 1] == 1)
    np.testing.assert_array_equal(data.Y, both.astype(int))


def test_low_prevalence_count():
    data = generate_synthetic(SynthConfig(n=10_000, prevalence=0.03, seed=0))
    assert 200 <= data.Y.sum() <= 400
    w = class_weights(data)
    assert 0.02 <= w[1] <= 0.04


def test_same_seed_same_triplet():
    a = generate_synthetic(SynthConfig(n=500, seed=5))
    b = generate_synthetic(SynthConfig(n=500, seed=5))
    assert a.equals(b)


def test_sample_seed_keeps_the_world():
    a = generate_synthetic(SynthConfig(n=500, seed=5))
    b = generate_synthetic(SynthConfig(n=500, seed=5, sample_seed=1))
    np.testing.assert_array_equal(a.meta["embedding"], b.meta["embedding"])
    assert not a.equals(b)


def test_invalid_prevalence_names_field():
    with pytest.raises(ConfigError) as exc:
        generate_synthetic(SynthConfig(prevalence=1.5))
    assert exc.value.field == "prevalence"


def test_unsatisfiable_rule_is_degenerate():
    cfg = SynthConfig(n=100, rules=[Formula.parse("c_0 ∧ ¬c_0")], mixing=[1.0], subgroup_noise=[0.5])
    with pytest.raises(DegenerateConfigError):
        generate_synthetic(cfg)


def test_identity_shift_is_noop():
    data = generate_synthetic(SynthConfig(n=300, seed=1))
    assert apply_domain_shift(data, ShiftConfig()).equals(data)


def test_doubling_shift_doubles_means():
    data = generate_synthetic(SynthConfig(n=300, d=4, seed=1))
    out = apply_domain_shift(data, ShiftConfig(A=(2 * np.eye(4)).tolist()))
    np.testing.assert_allclose(out.X.mean(axis=0), 2 * data.X.mean(axis=0))


def test_singular_shift_rejected():
    data = generate_synthetic(SynthConfig(n=100, d=3, seed=1))
    with pytest.raises(ConfigError):
        apply_domain_shift(data, ShiftConfig(A=np.zeros((3, 3)).tolist()))


def test_split_group_counts():
    tr, va, te = split(_triplet(), (0.8, 0.1, 0.1), seed=0)
    assert [len(np.unique(p.groups)) for p in (tr, va, te)] == [8, 1, 1]


def test_split_single_group_fails():
    data = _triplet(n_groups=1, rows_per_group=30)
    with pytest.raises(ConfigError):
        split(data)


def test_split_is_reproducible():
    a = split(_triplet(), seed=4)
    b = split(_triplet(), seed=4)
    assert all(x.equals(y) for x, y in zip(a, b))


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 60), st.integers(1, 5), st.integers(0, 10_000))
def test_split_groups_are_disjoint(n_groups, per_group, seed):
    data = _triplet(n_groups, per_group, seed % 97)
    parts = split(data, seed=seed)
    sets = [set(p.groups.tolist()) for p in parts]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    assert sum(p.n for p in parts) == data.n


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000))
def test_planted_rules_hold_at_zero_noise(seed):
    cfg = SynthConfig(n=400, concept_noise=0.0, seed=seed)
    data = generate_synthetic(cfg)
    np.testing.assert_array_equal(relabel(data.C, data.subgroups, cfg.rules), data.Y)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 1.0), st.floats(0.05, 0.95))
def test_shift_preserves_concept_semantics(seed, strength, w0):
    cfg = SynthConfig(n=400, concept_noise=0.0, seed=seed)
    data = generate_synthetic(cfg)
    shift = random_shift(cfg.d, strength, seed, subgroup_weights=[w0, 1 - w0])
    out = apply_domain_shift(data, shift)
    np.testing.assert_array_equal(relabel(out.C, out.subgroups, cfg.rules), out.Y)


def test_class_weights_counting():
    np.testing.assert_allclose(class_weights(np.array([0, 0, 0, 1])), [0.75, 0.25])
    np.testing.assert_allclose(class_weights(np.array([0, 1, 1, 0])), [0.5, 0.5])


def test_csv_round_trip(tmp_path):
    data = generate_synthetic(SynthConfig(n=50, seed=2))
    save_csv(data, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    assert back.equals(data)
    assert back.X.tobytes() == data.X.tobytes()


def test_csv_three_rows(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("x_0,c_0,c_1,y,group\n0.5,1,0,1,0\n-1,0,0,0,1\n2,1,1,1,2\n")
    assert load_csv(p).n == 3


def test_csv_non_binary_concept(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("x_0,c_0,c_1,y,group\n0.5,1,2,1,0\n")
    with pytest.raises(ValueError, match=r"row 2, column c_1"):
        load_csv(p)
