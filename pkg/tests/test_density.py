import numpy as np
import pytest
from scipy.spatial.transform import Rotation
from scipy.special import sph_harm_y

from densopt.density import (DensityError, density_coeff_gradients,
                             density_coeffs, spherical_harmonics)

from conftest import numeric_wigner_d, random_environment, rotate_environment


def _random_units(rng, k):
    u = rng.normal(size=(k, 3))
    return u / np.linalg.norm(u, axis=1)[:, None]


def test_values_match_scipy():
    rng = np.random.default_rng(0)
    u = _random_units(rng, 40)
    lmax = 6
    theta = np.arccos(u[:, 2])
    phi = np.arctan2(u[:, 1], u[:, 0])
    got = spherical_harmonics(lmax, u).values
    for l in range(lmax + 1):
        for m in range(-l, l + 1):
            ref = sph_harm_y(l, m, theta, phi)
            assert np.max(np.abs(got[:, l, lmax + m] - ref)) < 1e-13


def test_poles_are_finite_and_correct():
    u = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    lmax = 8
    y = spherical_harmonics(lmax, u).values
    assert np.all(np.isfinite(y))
    for l in range(lmax + 1):
        # only m = 0 survives at the poles
        expect = np.sqrt((2 * l + 1) / (4 * np.pi))
        assert y[0, l, lmax] == pytest.approx(expect, rel=1e-14)
        assert y[1, l, lmax] == pytest.approx(expect * (-1) ** l, rel=1e-14)
        for m in range(1, l + 1):
            assert abs(y[0, l, lmax + m]) == 0.0
            assert abs(y[1, l, lmax - m]) == 0.0


def test_addition_theorem():
    rng = np.random.default_rng(1)
    u = _random_units(rng, 10)
    lmax = 10
    y = spherical_harmonics(lmax, u).values
    for l in range(lmax + 1):
        s = np.sum(np.abs(y[:, l, :]) ** 2, axis=1)
        assert np.max(np.abs(s - (2 * l + 1) / (4 * np.pi))) < 1e-12


def test_gradients_match_finite_difference():
    rng = np.random.default_rng(2)
    u = _random_units(rng, 12)
    lmax = 5
    sh = spherical_harmonics(lmax, u, with_gradients=True)
    h = 1e-6
    for ax in range(3):
        up = u.copy()
        up[:, ax] += h
        um = u.copy()
        um[:, ax] -= h
        # evaluate Y(v/|v|) directly by normalizing the perturbed vector
        yp = spherical_harmonics(
            lmax, up / np.linalg.norm(up, axis=1)[:, None]).values
        ym = spherical_harmonics(
            lmax, um / np.linalg.norm(um, axis=1)[:, None]).values
        fd = (yp - ym) / (2 * h)
        assert np.max(np.abs(sh.gradients[..., ax] - fd)) < 1e-5


def test_gradients_tangential():
    rng = np.random.default_rng(3)
    u = _random_units(rng, 20)
    sh = spherical_harmonics(4, u, with_gradients=True)
    radial = np.einsum("klmx,kx->klm", sh.gradients, u)
    assert np.max(np.abs(radial)) < 1e-12


def test_lmax_limit_error():
    with pytest.raises(DensityError, match="lmax"):
        spherical_harmonics(31, np.array([[0.0, 0.0, 1.0]]))


def test_non_unit_input_error():
    with pytest.raises(DensityError, match="unit"):
        spherical_harmonics(2, np.array([[0.0, 0.0, 2.0]]))


def test_coeff_conjugation_symmetry(two_species_table):
    rng = np.random.default_rng(4)
    env = random_environment(rng, k=6)
    c = density_coeffs(env, two_species_table)
    lmax = c.lmax
    for l in range(lmax + 1):
        for m in range(-l, l + 1):
            a = c.data[:, :, l, lmax + m]
            b = (-1) ** m * np.conj(c.data[:, :, l, lmax - m])
            assert np.max(np.abs(a - b)) == 0.0


def test_coeff_superposition(two_species_table):
    """Coefficients are additive over neighbors."""
    rng = np.random.default_rng(5)
    env = random_environment(rng, k=7)
    total = density_coeffs(env, two_species_table).data
    acc = np.zeros_like(total)
    for j in range(len(env)):
        sub = random_environment(rng, k=1)
        sub.vecs[:] = env.vecs[j]
        sub.dists[:] = env.dists[j]
        sub.species[:] = env.species[j]
        acc += density_coeffs(sub, two_species_table).data
    assert np.max(np.abs(total - acc)) < 1e-14


def test_empty_environment(two_species_table):
    rng = np.random.default_rng(6)
    env = random_environment(rng, k=0)
    c = density_coeffs(env, two_species_table)
    assert np.all(c.data == 0)


def test_neighbor_outside_cutoff_no_contribution(two_species_table):
    rng = np.random.default_rng(7)
    env = random_environment(rng, k=3)
    c0 = density_coeffs(env, two_species_table).data
    far = random_environment(rng, k=4)
    far.vecs[:3] = env.vecs
    far.dists[:3] = env.dists
    far.species[:3] = env.species
    far.vecs[3] = [0.0, 0.0, 5.0]
    far.dists[3] = 5.0
    far.species[3] = 14
    c1 = density_coeffs(far, two_species_table).data
    # fourth neighbor sits exactly where the cutoff function vanishes
    assert np.max(np.abs(c1 - c0)) == 0.0


def test_unknown_species_error(two_species_table):
    rng = np.random.default_rng(8)
    env = random_environment(rng, k=2)
    env.species[0] = 8
    with pytest.raises(Exception, match="species"):
        density_coeffs(env, two_species_table)


def test_coeffs_equivariant_under_rotation(two_species_table):
    rng = np.random.default_rng(9)
    env = random_environment(rng, k=6)
    rot = Rotation.random(random_state=10).as_matrix()
    c = density_coeffs(env, two_species_table)
    cr = density_coeffs(rotate_environment(env, rot), two_species_table)
    for l in range(c.lmax + 1):
        d = numeric_wigner_d(l, rot)
        sl = slice(c.lmax - l, c.lmax + l + 1)
        # c transforms with conj(D) since it carries conj(Y)
        expect = np.einsum("uv,acv->acu", np.conj(d), c.data[:, :, l, sl])
        assert np.max(np.abs(cr.data[:, :, l, sl] - expect)) < 1e-8


def test_axial_environment_only_m0(two_species_table):
    rng = np.random.default_rng(11)
    env = random_environment(rng, k=3)
    env.vecs[:, :2] = 0.0
    env.vecs[:, 2] = np.abs(env.vecs[:, 2]) + 0.5
    env.dists[:] = env.vecs[:, 2]
    c = density_coeffs(env, two_species_table)
    lmax = c.lmax
    for l in range(lmax + 1):
        for m in range(-l, l + 1):
            if m != 0:
                assert np.max(np.abs(c.data[:, :, l, lmax + m])) == 0.0
    assert np.max(np.abs(c.data.imag)) == 0.0


def test_gradients_match_finite_difference_coeffs(two_species_table):
    rng = np.random.default_rng(12)
    env = random_environment(rng, k=4)
    g = density_coeff_gradients(env, two_species_table)
    h = 1e-6
    scale = np.max(np.abs(g.neighbor_grads))
    for j in range(len(env)):
        for ax in range(3):
            def shifted(sgn):
                e = random_environment(rng, k=4)
                e.vecs[:] = env.vecs
                e.species[:] = env.species
                e.vecs[j, ax] += sgn * h
                e.dists[:] = np.linalg.norm(e.vecs, axis=1)
                return density_coeffs(e, two_species_table).data
            fd = (shifted(+1) - shifted(-1)) / (2 * h)
            err = np.max(np.abs(g.neighbor_grads[j, ..., ax] - fd))
            assert err / scale < 1e-5


def test_gradient_translation_sum_rule(two_species_table):
    rng = np.random.default_rng(13)
    env = random_environment(rng, k=6)
    g = density_coeff_gradients(env, two_species_table)
    total = g.neighbor_grads.sum(axis=0) + g.center_grad
    assert np.max(np.abs(total)) < 1e-10


def test_norm_invariant_under_rotation(two_species_table):
    rng = np.random.default_rng(14)
    env = random_environment(rng, k=8)
    rot = Rotation.random(random_state=15).as_matrix()
    c = density_coeffs(env, two_species_table)
    cr = density_coeffs(rotate_environment(env, rot), two_species_table)
    assert c.norm_squared() == pytest.approx(cr.norm_squared(), rel=1e-12)
