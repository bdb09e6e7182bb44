import math

import numpy as np
import pytest

from nishilab.exact import (
    BATCH_N_MAX,
    CapacityError,
    ExactGibbs,
    correlation,
    gibbs_arrays,
    gray_code_energies,
    log_partition,
    magnetization_moment,
    mask_of,
    overlap_moments,
    spins_of,
    truncated_k1,
)
from nishilab.geometry import build_lattice, custom_family
from nishilab.model import DisorderRealization, edwards_anderson, hamiltonian, sample_disorder_batch, sherrington_kirkpatrick

from conftest import chain


def _single(p_sites, J, n):
    lat = build_lattice(1, n)
    fam = custom_family(lat, [p_sites])
    return {fam.p: fam}, DisorderRealization({fam.p: np.array([J])})


def test_small_closed_forms():
    fams, d = _single((0,), 0.7, 1)
    assert abs(log_partition(d, fams, 1.3) - math.log(2 * math.cosh(1.3 * 0.7))) < 1e-14
    fams, d = _single((0, 1), 0.9, 2)
    beta = 0.8
    st = ExactGibbs(d, fams, beta)
    four = math.log(2 * math.exp(beta * 0.9) + 2 * math.exp(-beta * 0.9))
    assert abs(st.log_z - four) < 1e-14
    assert abs(correlation(st, [0, 1]) - math.tanh(beta * 0.9)) < 1e-14
    assert abs(truncated_k1(st, [0, 1], [0, 1]) - (1 - math.tanh(beta * 0.9) ** 2)) < 1e-14
    assert overlap_moments(st, 2)[1] == pytest.approx(1.0, abs=1e-15)
    assert correlation(st, []) == 1.0


def test_beta_zero():
    sys = edwards_anderson(3, beta=0.0, mu=0.5, delta=1.0)
    d = sys.sample(0, 0)
    st = ExactGibbs(d, sys.families, 0.0)
    assert abs(st.log_z - 9 * math.log(2)) < 1e-12
    assert np.max(np.abs(st.one_point(2))) < 1e-15
    assert abs(magnetization_moment(st, 2, 2) - 1 / 12) < 1e-15
    R, R2, RR = overlap_moments(st, 2)
    assert abs(R) < 1e-15 and abs(R2 - 1 / 12) < 1e-15 and abs(RR) < 1e-15
    assert abs(truncated_k1(st, [0, 1], [1, 2])) < 1e-15


def test_gray_energies_match_direct_enumeration():
    sys = edwards_anderson(3, beta=1.0, mu=0.3, delta=1.0, field=(0.2, 0.5))
    d = sys.sample(2, 5)
    E = gray_code_energies(d, sys.families)
    S = spins_of(np.arange(2**9), 9)
    assert np.max(np.abs(E - hamiltonian(S, d, sys.families))) < 1e-12


def test_normalization_and_bounds():
    sys = sherrington_kirkpatrick(10, beta=1.2, mu=0.4, delta=1.0, field=(0.1, 0.3))
    for i in range(100):
        st = ExactGibbs(sys.sample(3, i), sys.families, 1.2)
        assert abs(st.prob.sum() - 1) < 1e-10
        a, C = st.one_point(2), st.two_point(2)
        assert np.all(np.abs(a) <= 1 + 1e-12) and np.all(np.abs(C) <= 1 + 1e-12)
        assert st.magnetization_moment(2, 2) >= st.magnetization_moment(2, 1) ** 2 - 1e-12
        R, R2, _ = st.overlap_moments(2)
        assert R2 >= 0 and abs(R) <= 1


def test_log_z_derivative_is_minus_energy():
    sys = edwards_anderson(3, beta=0.9, mu=0.5, delta=1.0, field=(0.2, 0.5))
    for i in range(5):
        d = sys.sample(1, i)
        h = 1e-4
        fd = (log_partition(d, sys.families, 0.9 + h) - log_partition(d, sys.families, 0.9 - h)) / (2 * h)
        e = ExactGibbs(d, sys.families, 0.9).mean_energy()
        assert abs(fd + e) <= 1e-5 * abs(e)


def test_double_sum_oracle_for_squared_site_magnetization():
    sys = edwards_anderson(3, beta=1.0, mu=0.5, delta=1.0)
    st = ExactGibbs(sys.sample(7, 0), sys.families, 1.0)
    brute = 0.0
    for i in range(9):
        for j in range(9):
            brute += float(np.sum(st.prob * np.prod(spins_of(np.arange(512), 9)[:, [i, j]], axis=1)))
    assert abs(magnetization_moment(st, 1, 2) - brute / 81) < 1e-12


def _replica_oracle(st, fam, n_rep):
    """Overlap moments by explicit enumeration over n_rep independent replicas."""
    n = st.n_sites
    S = spins_of(np.arange(2**n), n).astype(float)
    sx = np.prod(S[:, fam.sites], axis=-1)  # (configs, B)
    B = len(fam)
    p = st.prob
    if n_rep == 2:
        R = sx @ sx.T / B
        w = np.outer(p, p)
        return float(np.sum(w * R)), float(np.sum(w * R * R))
    R = sx @ sx.T / B
    w = p[:, None, None] * p[None, :, None] * p[None, None, :]
    return float(np.sum(w * R[:, :, None] * R[:, None, :]))


@pytest.mark.parametrize("which", ["chain", "plaq"])
def test_overlap_formulas_match_replica_enumeration(which):
    if which == "chain":
        sys = chain(6, 0.8, 0.3, 1.0, field=(0.2, 0.5))
    else:
        sys = edwards_anderson(2, beta=0.8, mu=0.3, delta=1.0, field=(0.2, 0.5))
    st = ExactGibbs(sys.sample(4, 1), sys.families, 0.8)
    for p in (1, 2):
        R, R2, RR = st.overlap_moments(p)
        oR, oR2 = _replica_oracle(st, sys.families[p], 2)
        assert abs(R - oR) < 1e-12 and abs(R2 - oR2) < 1e-12
        assert abs(RR - _replica_oracle(st, sys.families[p], 3)) < 1e-12


def test_frozen_ferromagnet():
    # beta*mu = 20 for both the bonds and the uniform field
    sys = edwards_anderson(3, beta=20.0, mu=1.0, delta=0.0, field=(1.0, 0.0))
    st = ExactGibbs(sys.sample(0, 0), sys.families, 20.0)
    assert magnetization_moment(st, 2, 2) > 1 - 1e-6
    assert overlap_moments(st, 1)[0] > 1 - 1e-6


def test_z2_pair_average_vanishes():
    sys = edwards_anderson(3, beta=1.0, mu=0.0, delta=1.0)
    d = sys.sample(5, 0)
    neg = DisorderRealization({p: -J for p, J in d.couplings.items()})
    X = [0, 4, 8]
    a = ExactGibbs(d, sys.families, 1.0).correlation(X)
    b = ExactGibbs(neg, sys.families, 1.0).correlation(X)
    assert abs(a) < 1e-12 and abs(a + b) < 1e-12


def test_batch_path_matches_gray_path():
    sys = edwards_anderson(3, beta=0.7, mu=0.5, delta=1.0, field=(0.2, 0.6))
    J = sample_disorder_batch(sys.params, sys.families, 3, range(6))
    extra = [mask_of([0, 2], 9), mask_of([4], 9)]
    fast = gibbs_arrays(J, sys.families, [0.5, 0.7], extra_masks=extra)
    for b, beta in enumerate([0.5, 0.7]):
        for r in range(6):
            st = ExactGibbs(DisorderRealization({p: v[r] for p, v in J.items()}), sys.families, beta)
            assert abs(fast[b].log_z[r] - st.log_z) < 1e-12
            assert abs(fast[b].energy[r] - st.mean_energy()) < 1e-12
            for p in (1, 2):
                assert np.max(np.abs(fast[b].one[p][r] - st.one_point(p))) < 1e-12
                assert np.max(np.abs(fast[b].two[p][r] - st.two_point(p))) < 1e-12
            assert abs(fast[b].extra[r, 0] - st.correlation([0, 2])) < 1e-12


def test_serial_path_above_batch_limit():
    n = BATCH_N_MAX + 1
    sys = sherrington_kirkpatrick(n, beta=0.5, mu=0.5, delta=1.0)
    J = sample_disorder_batch(sys.params, sys.families, 0, range(2))
    g = gibbs_arrays(J, sys.families, [0.5], orders=[2], two_point=False)[0]
    st = ExactGibbs(DisorderRealization({p: v[1] for p, v in J.items()}), sys.families, 0.5)
    assert abs(g.log_z[1] - st.log_z) < 1e-12
    assert np.max(np.abs(g.one[2][1] - st.one_point(2))) < 1e-12


def test_capacity_and_index_errors():
    sys = sherrington_kirkpatrick(25, beta=0.5, mu=0.5, delta=1.0)
    with pytest.raises(CapacityError, match="mcmc"):
        ExactGibbs(sys.sample(0, 0), sys.families, 0.5)
    with pytest.raises(IndexError):
        mask_of([0, 9], 9)
