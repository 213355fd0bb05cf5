"""Clebsch-Gordan coupling, SOAP powerspectrum and the NICE body-order
iteration with per-order variance truncation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .density import DensityCoeffs


class CorrelationError(Exception):
    pass


def _logfact(n: int) -> float:
    return gammaln(n + 1.0)


def _cg_single(l1: int, m1: int, l2: int, m2: int, lam: int) -> float:
    """<l1 m1; l2 m2 | lam (m1+m2)> by the Racah closed form."""
    mu = m1 + m2
    if abs(m1) > l1 or abs(m2) > l2 or abs(mu) > lam:
        return 0.0
    if lam < abs(l1 - l2) or lam > l1 + l2:
        return 0.0
    pref = 0.5 * (
        np.log(2.0 * lam + 1.0)
        + _logfact(l1 + l2 - lam) + _logfact(l1 - l2 + lam)
        + _logfact(-l1 + l2 + lam) - _logfact(l1 + l2 + lam + 1)
        + _logfact(l1 + m1) + _logfact(l1 - m1)
        + _logfact(l2 + m2) + _logfact(l2 - m2)
        + _logfact(lam + mu) + _logfact(lam - mu)
    )
    kmin = max(0, l2 - lam - m1, l1 + m2 - lam)
    kmax = min(l1 + l2 - lam, l1 - m1, l2 + m2)
    total = 0.0
    for k in range(kmin, kmax + 1):
        denom = (
            _logfact(k) + _logfact(l1 + l2 - lam - k) + _logfact(l1 - m1 - k)
            + _logfact(l2 + m2 - k) + _logfact(lam - l2 + m1 + k)
            + _logfact(lam - l1 - m2 + k)
        )
        total += (-1.0) ** k * np.exp(pref - denom)
    return total


@dataclass
class CGTable:
    """Dense Clebsch-Gordan coefficients <l m; k m' | lam (m+m')>.

    table[l, m+L, k, m'+L, lam] for l, k, lam <= lmax_coupling.
    """

    lmax_coupling: int
    table: np.ndarray

    def coupling(self, l: int, k: int, lam: int) -> np.ndarray:
        """Matrix W[m+l, mu+lam] = <l m; k (mu-m) | lam mu>."""
        L = self.lmax_coupling
        w = np.zeros((2 * l + 1, 2 * lam + 1))
        for mi, m in enumerate(range(-l, l + 1)):
            for ui, mu in enumerate(range(-lam, lam + 1)):
                mp = mu - m
                if abs(mp) <= k:
                    w[mi, ui] = self.table[l, m + L, k, mp + L, lam]
        return w


def cg_table(lmax_coupling: int) -> CGTable:
    """Tabulate all CG coefficients up to lmax_coupling."""
    if lmax_coupling > 12:
        raise CorrelationError("lmax_coupling > 12 not supported")
    L = lmax_coupling
    t = np.zeros((L + 1, 2 * L + 1, L + 1, 2 * L + 1, L + 1))
    for l1 in range(L + 1):
        for l2 in range(L + 1):
            for lam in range(abs(l1 - l2), min(L, l1 + l2) + 1):
                for m1 in range(-l1, l1 + 1):
                    for m2 in range(-l2, l2 + 1):
                        if abs(m1 + m2) <= lam:
                            t[l1, m1 + L, l2, m2 + L, lam] = _cg_single(
                                l1, m1, l2, m2, lam
                            )
    return CGTable(lmax_coupling=L, table=t)


@dataclass
class EquivariantBlock:
    """NICE features of one environment at body order nu.

    blocks[(sigma, lam)] is a complex (nQ, 2 lam + 1) array; labels[(sigma,
    lam)] records each feature's construction path as a tuple of
    (species, channel, l, k) steps (k = -1 marks the seeding step).
    """

    order: int
    blocks: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    structure_id: int = 0
    center: int = 0
    center_species: int = 0

    def total_norm_squared(self) -> float:
        return sum(float(np.sum(np.abs(v) ** 2)) for v in self.blocks.values())

    def invariant_vector(self):
        """Real (sigma=+1, lam=0) entries and their labels."""
        key = (1, 0)
        if key not in self.blocks:
            return np.zeros(0), []
        v = self.blocks[key][:, 0]
        if np.max(np.abs(v.imag), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(v.real), initial=0.0)):
            raise CorrelationError("invariant entries have non-negligible imaginary part")
        return v.real.copy(), list(self.labels[key])


def nice_seed(c: DensityCoeffs) -> EquivariantBlock:
    """Body-order 1 equivariants: <n||rho[lm]^1> = <n l (-m)||rho>."""
    blocks = {}
    labels = {}
    lm0 = c.lmax
    for l in range(c.lmax + 1):
        sl = c.data[:, :, l, lm0 - l:lm0 + l + 1]
        # m -> -m reversal of the stored coefficients
        vals = sl[..., ::-1].reshape(-1, 2 * l + 1).copy()
        blocks[(1, l)] = vals
        labels[(1, l)] = [
            ((a, n, l, -1),) for a in c.species for n in range(c.n_channels)
        ]
    return EquivariantBlock(order=1, blocks=blocks, labels=labels,
                            structure_id=c.structure_id, center=c.center,
                            center_species=c.center_species)


def nice_iterate(prev: EquivariantBlock, c: DensityCoeffs, cg: CGTable,
                 lmax_out: int, keep=None) -> EquivariantBlock:
    """One NICE iteration: couple body-order-nu features with the density
    coefficients to body order nu+1, keeping lam <= lmax_out."""
    if lmax_out > cg.lmax_coupling:
        raise CorrelationError("lmax_out exceeds the CG table range")
    lm0 = c.lmax
    nchan = c.n_channels
    chan_labels = [(a, n) for a in c.species for n in range(nchan)]
    out_vals: dict = {}
    out_labels: dict = {}
    for (s, k), pv in prev.blocks.items():
        plabels = prev.labels[(s, k)]
        nq = pv.shape[0]
        for l in range(c.lmax + 1):
            if l > cg.lmax_coupling or k > cg.lmax_coupling:
                raise CorrelationError("CG table does not cover the coupling")
            # seed values <n||rho[lm]^1> = c_{a n l (-m)}
            c1 = c.data[:, :, l, lm0 - l:lm0 + l + 1][..., ::-1].reshape(-1, 2 * l + 1)
            for lam in range(abs(l - k), min(l + k, lmax_out) + 1):
                sigma = s * (-1) ** (l + k + lam)
                w = cg.coupling(l, k, lam)  # (2l+1, 2lam+1)
                # gather prev values at m' = mu - m
                pm = np.zeros((nq, 2 * l + 1, 2 * lam + 1), dtype=complex)
                for mi, m in enumerate(range(-l, l + 1)):
                    for ui, mu in enumerate(range(-lam, lam + 1)):
                        mp = mu - m
                        if abs(mp) <= k:
                            pm[:, mi, ui] = pv[:, mp + k]
                new = np.einsum("cm,qmu,mu->cqu", c1, pm, w)
                key = (sigma, lam)
                out_vals.setdefault(key, []).append(new.reshape(-1, 2 * lam + 1))
                out_labels.setdefault(key, []).extend(
                    plabels[qi] + ((a, n, l, k),)
                    for (a, n) in chan_labels for qi in range(nq)
                )
    blocks = {}
    labels = {}
    for key, chunks in out_vals.items():
        blocks[key] = np.concatenate(chunks, axis=0)
        labels[key] = out_labels[key]
    result = EquivariantBlock(order=prev.order + 1, blocks=blocks, labels=labels,
                              structure_id=prev.structure_id, center=prev.center,
                              center_species=prev.center_species)
    if keep is not None:
        result = keep.apply(result)
    return result


def block_norm(b: EquivariantBlock):
    """Total squared norm and per-(sigma, lam) partial squared norms."""
    partial = {key: float(np.sum(np.abs(v) ** 2)) for key, v in b.blocks.items()}
    return sum(partial.values()), partial


def apply_radial_transform(b: EquivariantBlock, u_per_l: dict) -> EquivariantBlock:
    """Transform the last-step channel index of each feature by U^l (basis
    change of the multispectrum, block-diagonal over the recorded l).

    u_per_l is keyed by l, or by (species, l) for species-dependent maps.
    """
    new_blocks = {}
    new_labels = {}
    for key, vals in b.blocks.items():
        lbls = b.labels[key]
        groups: dict = {}
        for qi, lbl in enumerate(lbls):
            a, n, l, k = lbl[-1]
            groups.setdefault((lbl[:-1], a, l, k), []).append((n, qi))
        order = []
        chunks = []
        for (stem, a, l, k), members in sorted(groups.items(),
                                               key=lambda kv: (kv[0][0], kv[0][1], kv[0][2], kv[0][3])):
            members.sort()
            idx = [qi for _, qi in members]
            u = u_per_l[(a, l)] if (a, l) in u_per_l else u_per_l[l]
            chunk = u @ vals[idx]
            chunks.append(chunk)
            order.extend(stem + ((a, q, l, k),) for q in range(u.shape[0]))
        new_blocks[key] = np.concatenate(chunks, axis=0)
        new_labels[key] = order
    return EquivariantBlock(order=b.order, blocks=new_blocks, labels=new_labels,
                            structure_id=b.structure_id, center=b.center,
                            center_species=b.center_species)


@dataclass
class TruncationTransform:
    """Per-(sigma, lam) projection onto retained principal components."""

    components: dict
    discarded_fraction: float

    def apply(self, b: EquivariantBlock) -> EquivariantBlock:
        blocks = {}
        labels = {}
        for key, u in self.components.items():
            if key not in b.blocks:
                continue
            blocks[key] = u @ b.blocks[key]
            labels[key] = [(("pc", key[0], key[1], i),) for i in range(u.shape[0])]
        return EquivariantBlock(order=b.order, blocks=blocks, labels=labels,
                                structure_id=b.structure_id, center=b.center,
                                center_species=b.center_species)


def variance_truncation(dataset_blocks, n_keep: int):
    """PCA over the feature index of each (sigma, lam) block across a dataset.

    Returns (transformed blocks, TruncationTransform).  The covariance sums
    over mu and environments without centering.
    """
    if not dataset_blocks:
        raise CorrelationError("empty dataset")
    first = dataset_blocks[0]
    components = {}
    kept_var = 0.0
    total_var = 0.0
    for key, v0 in first.blocks.items():
        nq = v0.shape[0]
        cov = np.zeros((nq, nq), dtype=complex)
        for b in dataset_blocks:
            v = b.blocks[key]
            cov += v @ v.conj().T
        cov = cov.real / len(dataset_blocks)
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order].T
        kk = n_keep
        if n_keep > nq:
            warnings.warn(f"n_keep={n_keep} exceeds {nq} features at {key}; keeping all")
            kk = nq
        components[key] = evecs[:kk]
        kept_var += float(np.sum(evals[:kk]))
        total_var += float(np.sum(evals))
    discarded = 1.0 - kept_var / total_var if total_var > 0 else 0.0
    transform = TruncationTransform(components=components,
                                    discarded_fraction=discarded)
    return [transform.apply(b) for b in dataset_blocks], transform


def powerspectrum(c: DensityCoeffs):
    """SOAP powerspectrum invariants of one environment.

    Stores (a1 n1) <= (a2 n2) with sqrt(2) off-diagonal weighting so the
    vector norm matches the full redundant index set.  Returns (vector,
    labels) with labels (a1, n1, a2, n2, l).
    """
    lm0 = c.lmax
    flat = c.data.reshape(-1, c.lmax + 1, 2 * c.lmax + 1)
    chans = [(a, n) for a in c.species for n in range(c.n_channels)]
    nc = len(flat)
    feats = []
    labels = []
    for l in range(c.lmax + 1):
        ms = np.arange(-l, l + 1)
        sl = flat[:, l, lm0 - l:lm0 + l + 1]
        rev = sl[:, ::-1]  # c_{.. l, -m}
        signs = (-1.0) ** ms
        p = np.einsum("im,jm,m->ij", sl, rev, signs) / np.sqrt(2 * l + 1)
        for i in range(nc):
            for j in range(i, nc):
                v = p[i, j]
                if i != j:
                    v = v * np.sqrt(2.0)
                feats.append(v)
                labels.append((*chans[i], *chans[j], l))
    feats = np.array(feats)
    if len(feats) and np.max(np.abs(feats.imag)) > 1e-10 * max(1.0, np.max(np.abs(feats.real))):
        raise CorrelationError("powerspectrum has non-negligible imaginary part")
    return feats.real, labels


def powerspectrum_gradients(c: DensityCoeffs, cgrad):
    """Gradients of the powerspectrum vector w.r.t. neighbor and center
    positions; returns (K, nfeat, 3) and (nfeat, 3) arrays."""
    lm0 = c.lmax
    flat = c.data.reshape(-1, c.lmax + 1, 2 * c.lmax + 1)
    nc = flat.shape[0]
    k = cgrad.neighbor_grads.shape[0]
    gflat = cgrad.neighbor_grads.reshape(k, nc, c.lmax + 1, 2 * c.lmax + 1, 3)
    pieces = []
    for l in range(c.lmax + 1):
        ms = np.arange(-l, l + 1)
        signs = (-1.0) ** ms
        sl = flat[:, l, lm0 - l:lm0 + l + 1]
        rev = sl[:, ::-1]
        gsl = gflat[:, :, l, lm0 - l:lm0 + l + 1, :]
        grev = gsl[:, :, ::-1, :]
        # product rule on p_ij = sum_m (-1)^m c_i,m c_j,-m / sqrt(2l+1)
        t1 = np.einsum("kimx,jm,m->kijx", gsl, rev, signs)
        t2 = np.einsum("im,kjmx,m->kijx", sl, grev, signs)
        pl = (t1 + t2) / np.sqrt(2 * l + 1)
        iu, ju = np.triu_indices(nc)
        w = np.where(iu == ju, 1.0, np.sqrt(2.0))
        pieces.append(pl[:, iu, ju, :] * w[None, :, None])
    g = np.concatenate(pieces, axis=1)
    if g.size and np.max(np.abs(g.imag)) > 1e-8 * max(1.0, np.max(np.abs(g.real))):
        raise CorrelationError("powerspectrum gradient has imaginary residue")
    g = g.real
    return g, -g.sum(axis=0)


def weighted_covariance(coeffs_list, prev_blocks, q_index: int, s: int, k: int,
                        l: int):
    """Order-weighted covariance of the l-channel density coefficients:
    each environment weighted by the squared magnitude of one previous-order
    feature (diagnostic only)."""
    if len(coeffs_list) != len(prev_blocks):
        raise CorrelationError("coefficient and block datasets differ in length")
    first = coeffs_list[0]
    lm0 = first.lmax
    d = len(first.species) * first.n_channels
    cov = np.zeros((d, d), dtype=complex)
    for c, b in zip(coeffs_list, prev_blocks):
        key = (s, k)
        weight = float(np.sum(np.abs(b.blocks[key][q_index]) ** 2)) if key in b.blocks else 0.0
        sl = c.data[:, :, l, lm0 - l:lm0 + l + 1].reshape(d, 2 * l + 1)
        cov += weight * (sl @ sl.conj().T)
    return cov.real
