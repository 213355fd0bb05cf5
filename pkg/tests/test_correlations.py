import numpy as np
import pytest
from scipy.spatial.transform import Rotation
from sympy import S
from sympy.physics.quantum.cg import CG

from densopt.correlations import (CorrelationError, apply_radial_transform,
                                  block_norm, cg_table, nice_iterate,
                                  nice_seed, powerspectrum,
                                  powerspectrum_gradients,
                                  variance_truncation)
from densopt.density import density_coeff_gradients, density_coeffs

from conftest import numeric_wigner_d, random_environment, rotate_environment


@pytest.fixture(scope="module")
def cg6():
    return cg_table(6)


def test_cg_against_sympy(cg6):
    rng = np.random.default_rng(0)
    for _ in range(30):
        l1 = int(rng.integers(0, 5))
        l2 = int(rng.integers(0, 5))
        lam = int(rng.integers(abs(l1 - l2), l1 + l2 + 1))
        if lam > 6:
            continue
        m1 = int(rng.integers(-l1, l1 + 1))
        m2 = int(rng.integers(-l2, l2 + 1))
        if abs(m1 + m2) > lam:
            continue
        ref = float(CG(S(l1), S(m1), S(l2), S(m2), S(lam), S(m1 + m2)).doit())
        got = cg6.table[l1, m1 + 6, l2, m2 + 6, lam]
        assert got == pytest.approx(ref, abs=1e-13)


def test_cg_orthogonality(cg6):
    # sum_{m1 m2} C^{lam mu}_{l1 m1 l2 m2} C^{lam' mu'}_{l1 m1 l2 m2}
    l1, l2 = 3, 2
    for lam in range(1, 6):
        for lamp in range(1, 6):
            w1 = cg6.coupling(l1, l2, lam)
            w2 = cg6.coupling(l1, l2, lamp)
            # coupling matrices fold m2 = mu - m1; orthogonality becomes
            # W1^T W1 diagonal in mu and identity across lam
            g = np.zeros((2 * lam + 1, 2 * lamp + 1))
            for m1 in range(-l1, l1 + 1):
                for mu in range(-lam, lam + 1):
                    for mup in range(-lamp, lamp + 1):
                        if mu - m1 == mup - m1 and abs(mu - m1) <= l2:
                            g[mu + lam, mup + lamp] += (
                                w1[m1 + l1, mu + lam] * w2[m1 + l1, mup + lamp]
                            )
            if lam == lamp:
                assert np.max(np.abs(g - np.eye(2 * lam + 1))) < 1e-12
            else:
                for mu in range(-lam, lam + 1):
                    for mup in range(-lamp, lamp + 1):
                        if mu == mup:
                            assert abs(g[mu + lam, mup + lamp]) < 1e-12


def test_cg_table_range_error():
    with pytest.raises(CorrelationError):
        cg_table(13)


@pytest.fixture(scope="module")
def sample_coeffs(two_species_table):
    rng = np.random.default_rng(1)
    return density_coeffs(random_environment(rng, k=6), two_species_table)


def test_seed_matches_coefficients(sample_coeffs):
    b = nice_seed(sample_coeffs)
    assert b.order == 1
    c = sample_coeffs
    lm0 = c.lmax
    for l in range(c.lmax + 1):
        vals = b.blocks[(1, l)]
        qi = 0
        for ai in range(len(c.species)):
            for n in range(c.n_channels):
                for mi, m in enumerate(range(-l, l + 1)):
                    assert vals[qi, mi] == c.data[ai, n, l, lm0 - m]
                qi += 1
        assert all(lbl[-1][2] == l and lbl[-1][3] == -1
                   for lbl in b.labels[(1, l)])


def test_iteration_rotation_equivariance(two_species_table, cg6):
    rng = np.random.default_rng(2)
    env = random_environment(rng, k=5)
    rot = Rotation.random(random_state=3).as_matrix()
    env_r = rotate_environment(env, rot)
    c = density_coeffs(env, two_species_table)
    cr = density_coeffs(env_r, two_species_table)
    b2 = nice_iterate(nice_seed(c), c, cg6, lmax_out=3)
    b2r = nice_iterate(nice_seed(cr), cr, cg6, lmax_out=3)
    for (s, lam), v in b2.blocks.items():
        d = numeric_wigner_d(lam, rot)
        # the m -> -m seeding of conjugated coefficients rotates with the
        # sign-modified Wigner matrix (-1)^(m - mu) D_{m mu}
        mu = np.arange(-lam, lam + 1)
        t = ((-1.0) ** (mu[:, None] - mu[None, :])) * d
        expect = v @ t.T
        assert np.max(np.abs(b2r.blocks[(s, lam)] - expect)) < 1e-8


def test_invariants_rotation_invariant_nu3(two_species_table, cg6):
    rng = np.random.default_rng(4)
    env = random_environment(rng, k=6)
    rot = Rotation.random(random_state=5).as_matrix()
    def inv(e):
        c = density_coeffs(e, two_species_table)
        b = nice_seed(c)
        b = nice_iterate(b, c, cg6, lmax_out=3)
        b = nice_iterate(b, c, cg6, lmax_out=3)
        return b.invariant_vector()[0]
    a = inv(env)
    b = inv(rotate_environment(env, rot))
    assert np.max(np.abs(a - b)) < 1e-10 * max(1.0, np.max(np.abs(a)))


def test_norm_power_identity(two_species_table, cg6):
    """Total squared norm at order nu equals the order-1 value to the nu-th
    power when no angular truncation occurs."""
    rng = np.random.default_rng(6)
    env = random_environment(rng, k=4)
    c = density_coeffs(env, two_species_table)
    b1 = nice_seed(c)
    n1 = b1.total_norm_squared()
    b2 = nice_iterate(b1, c, cg6, lmax_out=6)
    assert b2.total_norm_squared() == pytest.approx(n1**2, rel=1e-12)


def test_orthogonal_transform_preserves_norm(two_species_table, cg6):
    rng = np.random.default_rng(7)
    env = random_environment(rng, k=5)
    c = density_coeffs(env, two_species_table)
    b2 = nice_iterate(nice_seed(c), c, cg6, lmax_out=3)
    q, _ = np.linalg.qr(rng.normal(size=(c.n_channels, c.n_channels)))
    u_per_l = {l: q for l in range(c.lmax + 1)}
    b2t = apply_radial_transform(b2, u_per_l)
    assert b2t.total_norm_squared() == pytest.approx(b2.total_norm_squared(),
                                                     rel=1e-12)
    tot, partial = block_norm(b2)
    _, partial_t = block_norm(b2t)
    for key in partial:
        assert partial_t[key] == pytest.approx(partial[key], rel=1e-12)


def test_powerspectrum_matches_nu2_lambda0(two_species_table, cg6):
    rng = np.random.default_rng(8)
    env = random_environment(rng, k=5)
    c = density_coeffs(env, two_species_table)
    p, plabels = powerspectrum(c)
    b2 = nice_iterate(nice_seed(c), c, cg6, lmax_out=0)
    inv, ilabels = b2.invariant_vector()
    # match features by construction path: invariant (a1 n1 l)(a2 n2 l)
    # equals (-1)^l powerspectrum entry
    lookup = {}
    for v, lbl in zip(inv, ilabels):
        (a1, n1, l1, _), (a2, n2, l2, _) = lbl
        assert l1 == l2
        lookup[(a1, n1, a2, n2, l1)] = v
    for v, (a1, n1, a2, n2, l) in zip(p, plabels):
        w = np.sqrt(2.0) if (a1, n1) != (a2, n2) else 1.0
        got = lookup[(a1, n1, a2, n2, l)] * (-1) ** l * w
        assert got == pytest.approx(v, abs=1e-12)


def test_powerspectrum_rotation_invariant(two_species_table):
    rng = np.random.default_rng(9)
    env = random_environment(rng, k=7)
    rot = Rotation.random(random_state=10).as_matrix()
    p1, _ = powerspectrum(density_coeffs(env, two_species_table))
    p2, _ = powerspectrum(density_coeffs(rotate_environment(env, rot),
                                         two_species_table))
    assert np.max(np.abs(p1 - p2)) < 1e-12 * max(1.0, np.max(np.abs(p1)))


def test_powerspectrum_norm_convention(two_species_table):
    """Upper-triangle storage with sqrt(2) weights preserves the norm of the
    full redundant (i, j) feature set."""
    rng = np.random.default_rng(11)
    c = density_coeffs(random_environment(rng, k=4), two_species_table)
    p, _ = powerspectrum(c)
    lm0 = c.lmax
    flat = c.data.reshape(-1, c.lmax + 1, 2 * c.lmax + 1)
    full = 0.0
    for l in range(c.lmax + 1):
        sl = flat[:, l, lm0 - l:lm0 + l + 1]
        signs = (-1.0) ** np.arange(-l, l + 1)
        pf = np.einsum("im,jm,m->ij", sl, sl[:, ::-1], signs) / np.sqrt(2 * l + 1)
        full += np.sum(np.abs(pf) ** 2)
    assert np.sum(p**2) == pytest.approx(full, rel=1e-12)


def test_powerspectrum_gradients_vs_fd(two_species_table):
    rng = np.random.default_rng(12)
    env = random_environment(rng, k=3)
    c = density_coeffs(env, two_species_table)
    g, gc = powerspectrum_gradients(c, density_coeff_gradients(env, two_species_table))
    assert np.max(np.abs(g.sum(axis=0) + gc)) < 1e-12
    h = 1e-6
    scale = max(1.0, np.max(np.abs(g)))
    for j in range(len(env)):
        for ax in range(3):
            def shifted(sgn):
                e = random_environment(rng, k=3)
                e.vecs[:] = env.vecs
                e.species[:] = env.species
                e.vecs[j, ax] += sgn * h
                e.dists[:] = np.linalg.norm(e.vecs, axis=1)
                return powerspectrum(density_coeffs(e, two_species_table))[0]
            fd = (shifted(+1) - shifted(-1)) / (2 * h)
            assert np.max(np.abs(g[j, :, ax] - fd)) / scale < 1e-5


def test_variance_truncation_projects_and_reports(two_species_table, cg6):
    rng = np.random.default_rng(13)
    blocks = []
    for i in range(12):
        c = density_coeffs(random_environment(rng, k=5, structure_id=i),
                           two_species_table)
        blocks.append(nice_iterate(nice_seed(c), c, cg6, lmax_out=2))
    kept, transform = variance_truncation(blocks, n_keep=4)
    for b in kept:
        for key, v in b.blocks.items():
            assert v.shape[0] == 4
            assert b.labels[key][0][0][0] == "pc"
    assert 0.0 <= transform.discarded_fraction < 1.0
    # retained variance dominates after projection
    tot_before = sum(b.total_norm_squared() for b in blocks)
    tot_after = sum(b.total_norm_squared() for b in kept)
    assert tot_after <= tot_before + 1e-10
    assert tot_after / tot_before == pytest.approx(
        1.0 - transform.discarded_fraction, abs=1e-10)


def test_variance_truncation_warns_when_keep_exceeds(two_species_table, cg6):
    rng = np.random.default_rng(14)
    c = density_coeffs(random_environment(rng, k=3), two_species_table)
    b = nice_seed(c)
    with pytest.warns(UserWarning, match="keeping all"):
        variance_truncation([b], n_keep=1000)


def test_variance_truncation_empty_error():
    with pytest.raises(CorrelationError, match="empty"):
        variance_truncation([], n_keep=2)


def test_parity_bookkeeping(two_species_table, cg6):
    rng = np.random.default_rng(15)
    c = density_coeffs(random_environment(rng, k=4), two_species_table)
    b2 = nice_iterate(nice_seed(c), c, cg6, lmax_out=4)
    for (s, lam) in b2.blocks:
        assert s in (-1, 1)
        # order-2 parity must equal (-1)^(l + k + lam) with seed parity +1
    # a lam=1 block of mixed parity exists at order 2 for lmax >= 2
    assert (1, 0) in b2.blocks
    assert (-1, 1) in b2.blocks or (1, 1) in b2.blocks


def test_radial_transform_species_keys(two_species_table, cg6):
    rng = np.random.default_rng(16)
    c = density_coeffs(random_environment(rng, k=5), two_species_table)
    b2 = nice_iterate(nice_seed(c), c, cg6, lmax_out=2)
    n = c.n_channels
    u_species = {}
    rngq = np.random.default_rng(17)
    for a in c.species:
        for l in range(c.lmax + 1):
            q, _ = np.linalg.qr(rngq.normal(size=(n, n)))
            u_species[(a, l)] = q
    bt = apply_radial_transform(b2, u_species)
    assert bt.total_norm_squared() == pytest.approx(b2.total_norm_squared(),
                                                    rel=1e-12)
