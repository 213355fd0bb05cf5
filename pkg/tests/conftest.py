import numpy as np
import pytest

from densopt.density import spherical_harmonics
from densopt.radial import BasisSpec, build_table
from densopt.structures import Environment


def random_environment(rng, k=5, species=(1, 14), rmin=0.8, rmax=None,
                       rcut=5.0, center_species=14, structure_id=0):
    """Random environment with k neighbors well inside the cutoff."""
    if rmax is None:
        rmax = rcut - 0.3
    vecs = rng.normal(size=(k, 3))
    vecs *= (rng.uniform(rmin, rmax, k) / np.linalg.norm(vecs, axis=1))[:, None]
    sp = rng.choice(species, size=k)
    return Environment(
        structure_id=structure_id, center=0, center_species=center_species,
        species=sp, vecs=vecs, dists=np.linalg.norm(vecs, axis=1),
        indices=np.arange(1, k + 1),
    )


def rotate_environment(env, rot):
    vecs = env.vecs @ rot.T
    return Environment(
        structure_id=env.structure_id, center=env.center,
        center_species=env.center_species, species=env.species.copy(),
        vecs=vecs, dists=np.linalg.norm(vecs, axis=1),
        indices=env.indices.copy(),
    )


def numeric_wigner_d(l, rot, seed=0):
    """Unitary matrix D with Y_l(R u) = D @ Y_l(u), built by least squares
    from the spherical harmonics themselves (residual checked)."""
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(4 * l + 9, 3))
    u /= np.linalg.norm(u, axis=1)[:, None]
    lmax = l
    a = spherical_harmonics(lmax, u).values[:, l, :]
    b = spherical_harmonics(lmax, u @ rot.T).values[:, l, :]
    # rows: b_i = D a_i  ->  solve a @ D.T = b
    dt, res, *_ = np.linalg.lstsq(a, b, rcond=None)
    d = dt.T
    assert np.max(np.abs(a @ dt - b)) < 1e-10
    assert np.max(np.abs(d @ d.conj().T - np.eye(2 * l + 1))) < 1e-8
    return d


@pytest.fixture(scope="session")
def two_species_spec():
    return BasisSpec(kind="gto", nmax=4, lmax=3, rcut=5.0, sigma_a=0.5,
                     cutoff_width=0.5, species=(1, 14))


@pytest.fixture(scope="session")
def two_species_table(two_species_spec):
    return build_table(two_species_spec, grid_points=500)
