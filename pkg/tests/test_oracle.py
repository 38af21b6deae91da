from fractions import Fraction
from itertools import product

import pytest
from scipy.stats import chisquare

import reference
from rootoram.core import Params, ParameterError
from rootoram.oracle import (
    NONE,
    ModelParams,
    Witness,
    build_channel,
    delta_witness,
    empirical_vs_model,
    max_ratio_bruteforce,
    modified_kronecker,
    seq_probability,
    transition,
)
from rootoram.privacy import delta_of

F = Fraction


def test_table_example():
    # observed a b a c a a b d under real x y x z y y z x
    N, p = 8, F(1, 3)
    m = ModelParams(N, p, capacity=8)
    a, b, c, d = 0, 1, 2, 3
    x, y, z = "x", "y", "z"
    got = seq_probability(m, (x, y, x, z, y, y, z, x), (a, b, a, c, a, a, b, d))
    f = F(1, N)
    assert got == f * f * m.p1 * f * m.p2 * m.p1 * m.p2 * m.p2


def test_single_access_is_first_touch():
    m = ModelParams(4, F(1, 2), 2)
    assert all(seq_probability(m, (0,), (leaf,)) == F(1, 4) for leaf in range(4))


def test_overflow_gives_exact_zero():
    for cap in (1, 2, 3, 5):
        m = ModelParams(4, F(1, 2), cap)
        assert seq_probability(m, tuple(range(cap + 1)), (2,) * (cap + 1)) == 0
        assert seq_probability(m, tuple(range(cap)), (2,) * cap) > 0


def test_matches_reference_everywhere():
    for N, p, cap in ((2, F(1, 4), 2), (4, F(3, 8), 2), (3, F(1, 2), 1)):
        m = ModelParams(N, p, cap)
        for r in product(range(3), repeat=3):
            for o in product(range(N), repeat=3):
                assert seq_probability(m, r, o) == reference.prob(r, o, N, p, cap)


def test_per_access_normalization():
    m = ModelParams(4, F(3, 8), 3)
    for x in list(range(4)) + [NONE]:
        assert sum(transition(m, z, x) for z in range(4)) == 1


def test_modified_kronecker():
    m = ModelParams(4, F(1, 2), 2)
    assert modified_kronecker(m, 3, 3) == 1
    assert modified_kronecker(m, 1, 2) == 0
    assert transition(m, 1, NONE) == F(1, 4)
    uniform = ModelParams(4, F(3, 4), 2)
    assert transition(uniform, 1, NONE) == F(1, 4)
    with pytest.raises(ParameterError):
        modified_kronecker(uniform, 1, NONE)


def test_uniform_remap_ratio_is_one():
    res = max_ratio_bruteforce(ModelParams(4, F(3, 4), 2), 3, 3)
    assert res.max_ratio == 1 == res.bound


@pytest.mark.parametrize(
    "N,p,expected",
    [
        # three accesses cannot realise the full (p1/p2)^2 swing
        (4, F(1, 2), F(9, 2)),
        (2, F(1, 4), F(6)),
        (4, F(3, 16), F(52)),
        (2, F(3, 8), F(20, 9)),
    ],
)
def test_three_access_maxima(N, p, expected):
    m = ModelParams(N, p, 2)
    res = max_ratio_bruteforce(m, 3, 3)
    ref, arg = reference.max_ratio(N, p, 3, 3, 2)
    assert res.max_ratio == ref == expected
    assert res.within_bound and not res.attains_bound
    assert (res.witness.r1, res.witness.r2, res.witness.observed) == min(arg)
    assert res.maximizers == len(arg)


def test_four_accesses_attain_bound():
    m = ModelParams(4, F(1, 2), 2)
    res = max_ratio_bruteforce(m, 4, 4)
    assert res.max_ratio == m.bound == 9
    w = res.pattern_witness
    assert w is not None and w.matches_pattern()
    assert seq_probability(m, w.r1, w.observed) / seq_probability(m, w.r2, w.observed) == 9


def test_strict_pattern_at_five_accesses():
    m = ModelParams(2, F(1, 4), 2)
    res = max_ratio_bruteforce(m, 5, 2)
    assert res.max_ratio == m.bound == 9
    w = res.strict_pattern_witness
    assert w is not None
    v = w.leaves()
    assert v["l_pa"] == v["l"] == v["l_na"]
    assert v["l_pb"] == v["l_nb"] != v["l"]


def test_witness_leaves():
    w = Witness((0, 1, 0, 1), (0, 0, 0, 1), (0, 1, 0, 1))
    assert w.changed_at == 1
    assert w.leaves() == {"l": 1, "l_pa": NONE, "l_na": 1, "l_pb": 0, "l_nb": 0}
    assert w.matches_pattern()
    assert not w.matches_pattern(allow_first_touch=False)


def test_enumeration_size_guard():
    with pytest.raises(ParameterError):
        max_ratio_bruteforce(ModelParams(8, F(1, 2), 2), 8, 8)


@pytest.mark.parametrize("cap", [2, 3, 4])
@pytest.mark.parametrize("N,p", [(2, F(1, 2)), (4, F(1, 2)), (4, F(1, 8))])
def test_delta_witness(N, p, cap):
    m = ModelParams(N, p, cap)
    dw = delta_witness(m)
    assert dw.prob1 == 0 and isinstance(dw.prob1, Fraction)
    assert dw.prob2 == F(1, N) ** (m.M_k - 1) * m.p1 > 0
    assert reference.prob(dw.r2, dw.observed, N, p, cap) == dw.prob2
    assert reference.prob(dw.r1, dw.observed, N, p, cap) == 0
    # capacity = 1*(k+1) + 0 with k = cap - 1; holds because 1/N <= p1 on the valid range
    assert dw.prob2 <= delta_of(p, 0, 1, cap - 1)


def test_delta_witness_small_example():
    dw = delta_witness(ModelParams.from_protocol(2, F(1, 2), C=0, Z=1, k=1))
    assert dw.prob1 == 0 and dw.prob2 == F(1, 8)


def test_channel_rows_match_reference():
    m = ModelParams(2, F(1, 4), 2)
    ch = build_channel(m, 2, 2)
    for r, dist in ch.items():
        for o, pr in dist.items():
            assert pr == reference.prob(r, o, 2, F(1, 4), 2)


def test_model_param_validation():
    with pytest.raises(ParameterError):
        ModelParams(1, F(1, 2), 2)
    with pytest.raises(ParameterError):
        ModelParams(4, F(4, 5), 2)
    with pytest.raises(ParameterError):
        ModelParams(4, F(1, 2), 0)


def test_empirical_repeat_access():
    rep = empirical_vs_model(Params(L=2, k=2, p=0.5, Z=4), seed=1, trials=100_000, address=2)
    assert abs(rep.same_leaf_freq - 0.5) < 3 * rep.same_leaf_sigma
    assert chisquare(rep.first_touch_counts).pvalue > 0.05


def test_empirical_uniform_case():
    rep = empirical_vs_model(Params(L=2, k=2, p=0.75, Z=4), seed=3, trials=40_000)
    assert all(abs(f - 0.25) < 0.02 for f in rep.other_leaf_freqs)
    assert abs(rep.same_leaf_freq - 0.25) < 0.02
