import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsmor import analysis
from fsmor import discretization as disc
from fsmor import reduction as red
from fsmor import sections as sec
from fsmor.errors import StructureError
from fsmor.system import registry_get


def periodic_space(cells, k=0, length=1.0):
    mesh = disc.StructuredMesh((cells,), (0.0,), (length,), (True,))
    return disc.build_space(mesh, k, 1)


def gaussian(width=0.05, center=0.5):
    return lambda x: np.exp(-((np.asarray(x)[:, 0] - center) / width) ** 2)


def random_grams(rng, n, count):
    mats = []
    for _ in range(count):
        a = rng.standard_normal((n, n))
        mats.append(a @ a.T + n * np.eye(n))
    return red.GramFamily.explicit(mats)


def brute_force(target, values, grams, n):
    """Best subset of size ``n`` by direct least squares in every Cholesky factor."""
    best = None
    for subset in itertools.combinations(range(len(values)), n):
        worst = 0.0
        for j in range(target.shape[1]):
            low = np.linalg.cholesky(grams.matrix(j).toarray())
            cols = np.column_stack([values[k][:, j if values[k].shape[1] > 1 else 0] for k in subset])
            coef, *_ = np.linalg.lstsq(low.T @ cols, low.T @ target[:, j], rcond=None)
            r = low.T @ (target[:, j] - cols @ coef)
            worst = max(worst, np.linalg.norm(r) / np.linalg.norm(low.T @ target[:, j]))
        best = worst if best is None else min(best, worst)
    return best


# ---------------------------------------------------------------- sections

def test_constant_section_is_parameter_free():
    s = sec.constant_section([1.0, 2.0], "phi")
    assert np.array_equal(s([0.1]), s([0.9]))


def test_constant_dictionary_from_snapshots():
    space = periodic_space(4)
    snaps = np.random.default_rng(0).standard_normal((4, 6))
    dic = sec.constant_dictionary(space, snaps)
    assert len(dic) == 6
    assert dic.names[0] == "phi0"
    assert len(sec.constant_dictionary(space, "basis")) == 4


def test_constant_dictionary_rejects_empty():
    space = periodic_space(4)
    with pytest.raises(ValueError):
        sec.constant_dictionary(space, np.zeros((4, 0)))
    with pytest.raises(ValueError):
        sec.constant_dictionary(space, np.ones((3, 1)))
    with pytest.raises(ValueError):
        sec.SectionDictionary("empty", [])


def test_sum_of_constant_sections():
    a = sec.constant_section([1.0, 2.0], "a")
    b = sec.constant_section([0.5, -1.0], "b")
    c = a + b
    assert c.kind == "constant"
    assert np.array_equal(c([3.0]), [1.5, 1.0])


def test_sum_of_transformed_sections_acts_on_profiles():
    space = periodic_space(32)
    dic = sec.shift_dictionary(space, [gaussian(0.1, 0.3), gaussian(0.1, 0.6)], lambda mu: mu[0])
    s = dic.sections[0] + dic.sections[1]
    assert s.kind == "transformed"
    mu = [0.37]
    assert np.allclose(s(mu), dic.sections[0](mu) + dic.sections[1](mu), atol=1e-14)
    mixed = s + sec.constant_section(np.ones(space.ndof), "one")
    assert mixed.kind == "composite"
    assert np.allclose(mixed(mu), s(mu) + 1.0)


def test_zero_shift_equals_constant_section():
    space = periodic_space(64, k=1)
    profile = gaussian(0.1)
    dic = sec.shift_dictionary(space, [profile], lambda mu: 0.0)
    assert np.array_equal(dic.sections[0]([0.4]), disc.project(space, profile))


def test_shift_by_one_cell_is_cyclic_permutation():
    space = periodic_space(16, k=0)
    profile = gaussian(0.15)
    h = 1.0 / 16
    dic = sec.shift_dictionary(space, [profile], lambda mu: mu[0])
    base = dic.sections[0]([0.0])
    assert np.allclose(dic.sections[0]([h]), np.roll(base, 1), atol=1e-14)
    assert np.allclose(dic.sections[0]([-3 * h]), np.roll(base, -3), atol=1e-14)


def test_shifted_gaussian_norm_constant():
    space = periodic_space(256, k=0)
    dic = sec.shift_dictionary(space, [gaussian(0.05)], lambda mu: mu[0])
    mass = disc.mass_matrix(space)
    norms = [np.sqrt(v @ (mass @ v)) for v in (dic.sections[0]([m]) for m in np.linspace(0, 1, 17))]
    assert max(norms) - min(norms) <= 1e-3 * max(norms)


def test_shift_requires_periodic_mesh():
    mesh = disc.StructuredMesh((8,), (0.0,), (1.0,), (False,))
    with pytest.raises(StructureError):
        sec.shift_dictionary(disc.build_space(mesh, 0, 1), [gaussian()], lambda mu: mu[0])


def test_unknown_section_kind():
    with pytest.raises(ValueError):
        sec.Section("x", "warped")


# ---------------------------------------------------------------- sectional greedy

def test_target_in_dictionary_gives_zero():
    rng = np.random.default_rng(1)
    grams = random_grams(rng, 6, 5)
    target = rng.standard_normal((6, 5))
    dic = [rng.standard_normal((6, 5)) for _ in range(3)] + [target]
    rep = sec.sectional_greedy(target, dic, np.zeros((5, 1)), grams, 2)
    assert rep.errors[1] <= 1e-14
    assert rep.selected[0] == [3]
    assert rep.errors[0] == pytest.approx(1.0)


def test_identity_with_strong_greedy():
    sys = registry_get("advection-reaction-2d-case1")
    space = disc.build_space(disc.StructuredMesh.for_system(sys, 4), 1, 1)
    mus = sys.params.sample(12, np.random.default_rng(0))
    snaps = red.sweep(sys, space, mus)
    fixed = red.SnapshotSet(snaps.mus, snaps.vectors, red.GramFamily.constant(snaps.g_ref, 12),
                            snaps.g_ref, snaps.residuals)
    greedy = red.strong_greedy(fixed, 8)
    dic = sec.constant_dictionary(space, snaps.vectors)
    rep = sec.sectional_greedy(snaps.vectors, dic, mus, fixed.grams, 8, rule="worst")
    assert np.max(np.abs(np.array(rep.errors) - greedy.errors)) <= 1e-10
    assert [s[-1] for s in rep.selected] == greedy.selected


def test_transport_shift_dictionary_exact():
    space = periodic_space(256)
    profile = gaussian(0.05)
    mus = np.linspace(0.0, 1.0, 32, endpoint=False)[:, None]
    transport = sec.shift_dictionary(space, [profile], lambda mu: mu[0], id="shift")
    target = transport.sections[0]
    grams = red.GramFamily.constant(disc.mass_matrix(space), len(mus))
    rep = sec.sectional_greedy(target, transport, mus, grams, 1)
    assert rep.errors[1] <= 1e-8
    const = sec.constant_dictionary(space, target.evaluate(mus[::4]))
    slow = sec.sectional_greedy(target, const, mus, grams, 8)
    assert slow.errors[8] >= 1e-2


def test_exhaustive_matches_brute_force_pairs():
    rng = np.random.default_rng(7)
    s, n = 6, 10
    grams = random_grams(rng, n, s)
    target = rng.standard_normal((n, s))
    values = [rng.standard_normal((n, s)) if i % 2 else rng.standard_normal((n, 1)) for i in range(8)]
    rep = sec.sectional_greedy(target, values, np.zeros((s, 1)), grams, 2, mode="exhaustive")
    assert rep.errors[2] == pytest.approx(brute_force(target, values, grams, 2), rel=1e-12)
    greedy = sec.sectional_greedy(target, values, np.zeros((s, 1)), grams, 2)
    assert greedy.errors[2] >= rep.errors[2] * (1 - 1e-12)


def test_trajectory_monotone_and_bounded():
    rng = np.random.default_rng(2)
    grams = random_grams(rng, 8, 4)
    target = rng.standard_normal((8, 4))
    values = [rng.standard_normal((8, 4)) for _ in range(6)]
    rep = sec.sectional_greedy(target, values, np.zeros((4, 1)), grams, 6)
    e = np.array(rep.errors)
    assert np.all(np.diff(e) <= 0)
    assert np.all(e <= e[0])
    json.dumps(rep.to_dict())


def test_dependent_sections_flagged():
    rng = np.random.default_rng(3)
    grams = random_grams(rng, 5, 3)
    v = rng.standard_normal((5, 3))
    rep = sec.sectional_greedy(rng.standard_normal((5, 3)), [v, 2 * v, rng.standard_normal((5, 3))],
                               np.zeros((3, 1)), grams, 3)
    assert any("dependent" in f for f in rep.flags)


def test_dictionary_exhausted_flag():
    rng = np.random.default_rng(3)
    grams = random_grams(rng, 5, 3)
    rep = sec.sectional_greedy(rng.standard_normal((5, 3)), [rng.standard_normal((5, 1))],
                               np.zeros((3, 1)), grams, 3, tol=1e-12)
    assert any("exhausted" in f for f in rep.flags)


def test_mode_and_rule_validation():
    grams = red.GramFamily.constant(np.eye(3), 1)
    t = np.ones((3, 1))
    vals = [np.eye(3)[:, [i]] for i in range(3)]
    with pytest.raises(ValueError):
        sec.sectional_greedy(t, vals, [[0.0]], grams, 1, rule="best")
    with pytest.raises(ValueError):
        sec.sectional_greedy(t, vals, [[0.0]], grams, 1, mode="random")
    with pytest.raises(ValueError):
        sec.sectional_greedy(t, vals, [[0.0]], grams, 4, mode="exhaustive")


def test_coefficients_reproduce_span_member():
    rng = np.random.default_rng(4)
    grams = random_grams(rng, 6, 3)
    vals = [rng.standard_normal((6, 3)) for _ in range(2)]
    coef = np.array([[1.0, -2.0, 0.5], [3.0, 0.0, 1.0]])
    target = vals[0] * coef[0] + vals[1] * coef[1]
    for j in range(3):
        c = sec.sectional_coefficients(target, vals, [0, 1], np.zeros((3, 1)), grams, j)
        assert np.allclose(c, coef[:, j], atol=1e-12)


# ---------------------------------------------------------------- comparisons

def test_compare_adding_target():
    rng = np.random.default_rng(5)
    grams = random_grams(rng, 6, 4)
    target = rng.standard_normal((6, 4))
    base = sec.constant_dictionary(disc.build_space(disc.StructuredMesh((6,), (0.0,), (1.0,), (False,)), 0, 1),
                                   rng.standard_normal((6, 4)), id="base")
    extra = base.union(sec.SectionDictionary("t", [sec.solution_section(
        lambda mu: target[:, int(mu[0])], "target")]), id="base+target")
    mus = np.arange(4, dtype=float)[:, None]
    rep = sec.dictionary_compare(target, [base, extra], mus, grams, 2, mode="exhaustive")
    assert rep.passed
    assert rep.reports[1].errors[1] <= 1e-14 <= rep.reports[0].errors[1]
    same = sec.dictionary_compare(target, [base, base], mus, grams, 2)
    assert same.reports[0].errors == same.reports[1].errors
    with pytest.raises(ValueError):
        sec.dictionary_compare(target, [base], mus, grams, 2)


@settings(max_examples=15)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 3))
def test_inclusion_monotone_exhaustive(seed, n):
    rng = np.random.default_rng(seed)
    grams = random_grams(rng, 7, 4)
    space = disc.build_space(disc.StructuredMesh((7,), (0.0,), (1.0,), (False,)), 0, 1)
    small = sec.constant_dictionary(space, rng.standard_normal((7, 4)), id="small")
    large = small.union(sec.constant_dictionary(space, rng.standard_normal((7, 3)), prefix="psi"),
                        id="large")
    target = rng.standard_normal((7, 4))
    rep = sec.dictionary_compare(target, [small, large], np.zeros((4, 1)), grams, n, mode="exhaustive")
    assert rep.passed, rep.violations


def test_fell_diagnostic_on_shift_section():
    space = periodic_space(128)
    dic = sec.shift_dictionary(space, [gaussian(0.1)], lambda mu: mu[0])
    mass = disc.mass_matrix(space)
    path = np.linspace(0.0, 1.0, 9)[:, None]
    jump = analysis.fell_continuity_diagnostic(dic.sections[0], path, lambda mu: mass)
    assert jump <= 1e-3
