"""Batch command-line front end: fit-basis, compute-features, select, gfre,
train, predict, check."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .contraction import (ContractionMap, covariance, pca_contraction,
                          pcovr_contraction, retained_variance_curve)
from .correlations import cg_table, nice_iterate, nice_seed, variance_truncation
from .density import density_coeff_gradients, density_coeffs
from .features import (FeatureMatrix, powerspectrum_matrix,
                       radial_spectrum_gradients, radial_spectrum_matrix,
                       stack_features)
from .radial import BasisSpec, RadialScaling, RadialTable, build_table
from .regression import (EnvGradients, Model, aggregate_structure_features,
                         cross_validate, gradient_rows, joint_energy_force_fit,
                         krr_fit, predict, ridge_fit)
from .selection import cur_select, fps_select, gfre
from .structures import neighbor_lists, parse_extxyz


class ConfigError(Exception):
    pass


DEFAULT_CONFIG = {
    "dataset": None,
    "basis": {
        "kind": "gto", "nmax": 8, "lmax": 4, "rcut": 5.0,
        "sigma_a": 0.5, "cutoff_width": 0.5, "scaling": None,
    },
    "contraction": {
        "enabled": True, "channel_mode": "per_species",
        "center_mode": "agnostic", "qmax": 4, "pcovr": None,
    },
    "correlations": {"nu_max": 2, "lmax_out": None, "n_keep": 1000},
    "selection": {"method": "cur", "k": 8, "start": 0, "features": None},
    "gfre_settings": {"src": None, "dst": None, "split": 0.5, "ridge": 1e-8},
    "model": {
        "kind": "linear", "zeta": 4, "lam": 1e-8, "folds": 5,
        "target": "per_structure", "features": None, "force_weight": 0.0,
    },
    "predict_settings": {"model": None, "features": None},
    "check_settings": {"table": None},
    "output_dir": "densopt_out",
    "grid_points": 600,
    "seed": 0,
}


def _merge_validate(defaults, given, path=""):
    if not isinstance(given, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    out = {}
    for key, dval in defaults.items():
        if key in given and isinstance(dval, dict) and given[key] is not None:
            out[key] = _merge_validate(dval, given[key], f"{path}{key}.")
        elif key in given:
            out[key] = given[key]
        else:
            out[key] = dval
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys at {path or '<root>'}: {sorted(unknown)}")
    return out


def load_config(path: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return _merge_validate(DEFAULT_CONFIG, raw)


def _basis_spec(cfg: dict, species) -> BasisSpec:
    b = cfg["basis"]
    scaling = RadialScaling(**b["scaling"]) if b["scaling"] else None
    return BasisSpec(kind=b["kind"], nmax=int(b["nmax"]), lmax=int(b["lmax"]),
                     rcut=float(b["rcut"]), sigma_a=float(b["sigma_a"]),
                     cutoff_width=float(b["cutoff_width"]),
                     species=tuple(species), scaling=scaling)


def _load_dataset(cfg: dict):
    if not cfg["dataset"]:
        raise ConfigError("config must name a dataset file")
    text = Path(cfg["dataset"]).read_text()
    structures = parse_extxyz(text)
    if not structures:
        raise ConfigError("dataset contains no frames")
    species = sorted({int(z) for s in structures for z in s.species})
    return structures, species


def _write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def _echo_config(cfg: dict, outdir: Path):
    _write(outdir / "effective_config.json",
           (json.dumps(cfg, sort_keys=True, indent=2) + "\n").encode())


def _structure_targets(structures, convention: str) -> np.ndarray:
    ys = []
    for i, s in enumerate(structures):
        if s.energy is None:
            raise ConfigError(f"structure {i} has no energy; cannot train")
        ys.append(s.energy / len(s) if convention == "per_atom" else s.energy)
    return np.array(ys)


def cmd_fit_basis(cfg: dict) -> int:
    outdir = Path(cfg["output_dir"])
    structures, species = _load_dataset(cfg)
    spec = _basis_spec(cfg, species)
    envs = neighbor_lists(structures, spec.rcut)
    table = build_table(spec, grid_points=int(cfg["grid_points"]))
    coeffs = [density_coeffs(e, table) for e in envs]

    con = cfg["contraction"]
    cov = covariance(coeffs, con["channel_mode"], con["center_mode"])
    qmax = int(con["qmax"])
    if con["pcovr"]:
        pc = con["pcovr"]
        x_env = np.array([c.l0_vector() for c in coeffs])
        sids = np.array([c.structure_id for c in coeffs])
        x_l0 = aggregate_structure_features(x_env, sids, len(structures))
        y = _structure_targets(structures, cfg["model"]["target"])
        cmap = pcovr_contraction(cov, x_l0, y, alpha=float(pc["alpha"]),
                                 ridge=float(pc["ridge"]), qmax=qmax)
    else:
        cmap = pca_contraction(cov, qmax)

    _write(outdir / "basis" / "contraction.cmap", cmap.to_bytes())
    _write(outdir / "basis" / "table_primitive.rtab", table.to_bytes())
    if con["center_mode"] == "per_center":
        for (center, _a) in cmap.keys():
            tc = build_table(spec, contraction=cmap,
                             grid_points=int(cfg["grid_points"]),
                             center_species=center)
            _write(outdir / "basis" / f"table_contracted_Z{center}.rtab",
                   tc.to_bytes())
    else:
        tc = build_table(spec, contraction=cmap,
                         grid_points=int(cfg["grid_points"]))
        _write(outdir / "basis" / "table_contracted.rtab", tc.to_bytes())

    lines = ["key,l,eigenvalues"]
    for key in cmap.keys():
        for l in range(cmap.lmax + 1):
            lam = cmap.eigenvalues(key, l)
            lines.append(
                f"{key[0]}|{key[1]},{l}," + ";".join(f"{v:.17g}" for v in lam)
            )
    curve = retained_variance_curve(cmap)
    lines.append("retained_variance,," + ";".join(f"{v:.17g}" for v in curve))
    _write(outdir / "basis" / "eigenvalues.csv", ("\n".join(lines) + "\n").encode())
    _echo_config(cfg, outdir)
    return 0


def _load_tables(cfg: dict):
    outdir = Path(cfg["output_dir"])
    prim = RadialTable.from_bytes((outdir / "basis" / "table_primitive.rtab").read_bytes())
    contracted = None
    p = outdir / "basis" / "table_contracted.rtab"
    if p.exists():
        contracted = RadialTable.from_bytes(p.read_bytes())
    return prim, contracted


def cmd_compute_features(cfg: dict) -> int:
    outdir = Path(cfg["output_dir"])
    structures, _species = _load_dataset(cfg)
    prim, contracted = _load_tables(cfg)
    table = contracted if (contracted is not None and cfg["contraction"]["enabled"]) else prim
    envs = neighbor_lists(structures, table.spec.rcut)
    coeffs = [density_coeffs(e, table) for e in envs]
    basis_id = f"{table.spec.kind}-n{table.n_channels}" + ("-opt" if table.contracted else "")

    nu_max = int(cfg["correlations"]["nu_max"])
    fm1 = radial_spectrum_matrix(coeffs, basis_id=basis_id)
    _write(outdir / "features" / "nu1.fmat", fm1.to_bytes())
    norms = {"nu1_total_sq": float(sum(c.norm_squared() for c in coeffs))}
    if nu_max >= 2:
        fm2 = powerspectrum_matrix(coeffs, basis_id=basis_id)
        _write(outdir / "features" / "nu2.fmat", fm2.to_bytes())
    if nu_max >= 3:
        lmax_out = cfg["correlations"]["lmax_out"]
        lmax_out = table.spec.lmax if lmax_out is None else int(lmax_out)
        cg = cg_table(max(lmax_out, table.spec.lmax) + table.spec.lmax)
        n_keep = int(cfg["correlations"]["n_keep"])
        blocks = [nice_seed(c) for c in coeffs]
        for nu in range(2, nu_max + 1):
            blocks = [nice_iterate(b, c, cg, lmax_out)
                      for b, c in zip(blocks, coeffs)]
            norms[f"nu{nu}_total_sq"] = float(sum(b.total_norm_squared()
                                                  for b in blocks))
            blocks, transform = variance_truncation(blocks, n_keep)
            norms[f"nu{nu}_discarded_fraction"] = transform.discarded_fraction
            if nu >= 3:
                rows = []
                labels = None
                for b in blocks:
                    vec, lab = b.invariant_vector()
                    rows.append(vec)
                    if labels is None:
                        labels = lab
                sids = [b.structure_id for b in blocks]
                fm = stack_features(rows, labels or [], order=nu,
                                    basis_id=basis_id, structure_ids=sids)
                _write(outdir / "features" / f"nu{nu}.fmat", fm.to_bytes())
    _write(outdir / "features" / "norms.json",
           (json.dumps(norms, sort_keys=True, indent=2) + "\n").encode())
    _echo_config(cfg, outdir)
    return 0


def _load_features(path: str) -> FeatureMatrix:
    return FeatureMatrix.from_bytes(Path(path).read_bytes())


def cmd_select(cfg: dict) -> int:
    outdir = Path(cfg["output_dir"])
    sel = cfg["selection"]
    fpath = sel["features"] or str(outdir / "features" / "nu2.fmat")
    fm = _load_features(fpath)
    if sel["method"] == "cur":
        res = cur_select(fm.matrix, int(sel["k"]))
    elif sel["method"] == "fps":
        res = fps_select(fm.matrix, int(sel["k"]), start=int(sel["start"]))
    else:
        raise ConfigError(f"unknown selection method {sel['method']!r}")
    out = res.to_dict()
    out["labels"] = [list(fm.labels[i]) for i in res.indices]
    _write(outdir / "selection.json",
           (json.dumps(out, sort_keys=True, indent=2) + "\n").encode())
    return 0


def cmd_gfre(cfg: dict) -> int:
    outdir = Path(cfg["output_dir"])
    g = cfg["gfre_settings"]
    if not g["src"] or not g["dst"]:
        raise ConfigError("gfre requires src and dst feature files")
    src = _load_features(g["src"])
    dst = _load_features(g["dst"])
    val = gfre(src.matrix, dst.matrix, split=float(g["split"]),
               ridge=float(g["ridge"]), seed=int(cfg["seed"]))
    _write(outdir / "gfre.json",
           (json.dumps({"gfre": val}, sort_keys=True) + "\n").encode())
    return 0


def cmd_train(cfg: dict) -> int:
    outdir = Path(cfg["output_dir"])
    structures, _species = _load_dataset(cfg)
    mc = cfg["model"]
    fpath = mc["features"] or str(outdir / "features" / "nu2.fmat")
    fm = _load_features(fpath)
    if fm.structure_ids is None:
        raise ConfigError("feature file lacks structure ids")
    x = aggregate_structure_features(fm.matrix, fm.structure_ids, len(structures))
    y = _structure_targets(structures, mc["target"])
    lam = float(mc["lam"])

    force_weight = float(mc["force_weight"])
    if mc["kind"] == "linear" and force_weight > 0:
        prim, contracted = _load_tables(cfg)
        table = contracted if (contracted is not None and cfg["contraction"]["enabled"]) else prim
        model = _train_with_forces(cfg, structures, table, x, y, lam,
                                   force_weight, fm.order)
    elif mc["kind"] == "linear":
        model = ridge_fit(x, y, lam, target_convention=mc["target"],
                          pipeline_id=fm.basis_id)
    elif mc["kind"] == "kernel_poly":
        model = krr_fit(x, y, int(mc["zeta"]), lam,
                        target_convention=mc["target"], pipeline_id=fm.basis_id)
    else:
        raise ConfigError(f"unknown model kind {mc['kind']!r}")
    _write(outdir / "model" / "model.bin", model.to_bytes())

    zeta = int(mc["zeta"]) if mc["kind"] == "kernel_poly" else None
    folds = int(mc["folds"])
    if 2 <= folds <= len(y):
        cv = cross_validate(x, y, lam, folds=folds, seed=int(cfg["seed"]),
                            zeta=zeta)
        lines = ["fold,rmse,mae"]
        for f, (r, m) in enumerate(zip(cv["rmse_per_fold"], cv["mae_per_fold"])):
            lines.append(f"{f},{r:.17g},{m:.17g}")
        lines.append(f"all,{cv['rmse']:.17g},{cv['mae']:.17g}")
        _write(outdir / "model" / "cv.csv", ("\n".join(lines) + "\n").encode())
    _echo_config(cfg, outdir)
    return 0


def _train_with_forces(cfg, structures, table, x_e, y_e, lam, force_weight,
                       order):
    if order > 2:
        raise ConfigError("force training supports nu <= 2 features only")
    grows = []
    yf = []
    from .correlations import powerspectrum_gradients
    for sid, s in enumerate(structures):
        if s.forces is None:
            raise ConfigError(f"structure {sid} has no forces")
        envs = neighbor_lists([s], table.spec.rcut)
        egrads = []
        d = None
        for e in envs:
            c = density_coeffs(e, table)
            cg = density_coeff_gradients(e, table)
            if order == 1:
                ng, cgr = radial_spectrum_gradients(c, cg)
            else:
                ng, cgr = powerspectrum_gradients(c, cg)
            d = ng.shape[1]
            egrads.append(EnvGradients(structure_id=sid, center=e.center,
                                       neighbor_indices=e.indices,
                                       neighbor_grads=ng, center_grad=cgr))
        grows.append(gradient_rows(egrads, len(s), d))
        yf.append(s.forces.ravel())
    grad = np.vstack(grows)
    yf = np.concatenate(yf)
    return joint_energy_force_fit(x_e, y_e, grad, yf, lam,
                                  force_weight=force_weight)


def cmd_predict(cfg: dict) -> int:
    outdir = Path(cfg["output_dir"])
    pc = cfg["predict_settings"]
    mpath = pc["model"] or str(outdir / "model" / "model.bin")
    fpath = pc["features"] or (cfg["model"]["features"]
                               or str(outdir / "features" / "nu2.fmat"))
    model = Model.from_bytes(Path(mpath).read_bytes())
    fm = _load_features(fpath)
    if fm.structure_ids is None:
        raise ConfigError("feature file lacks structure ids")
    ns = int(fm.structure_ids.max()) + 1
    x = aggregate_structure_features(fm.matrix, fm.structure_ids, ns)
    pred = predict(model, x)
    lines = ["structure,prediction"]
    for i, p in enumerate(pred):
        lines.append(f"{i},{p:.17g}")
    _write(outdir / "predictions.csv", ("\n".join(lines) + "\n").encode())
    return 0


def _toy_structures(seed: int = 0):
    """Small deterministic two-species molecular dataset for self-checks."""
    from .structures import Structure
    rng = np.random.default_rng(seed)
    structures = []
    for _ in range(8):
        n = int(rng.integers(3, 6))
        pos = rng.uniform(-2.2, 2.2, size=(n, 3))
        structures.append(Structure(positions=pos,
                                    species=rng.choice([1, 6], size=n)))
    return structures


def cmd_check(cfg: dict) -> int:
    from scipy.spatial.transform import Rotation

    from .correlations import cg_table as _cgt
    from .radial import _integral_batch, primitive_functions
    from .structures import apply_rotation

    outdir = Path(cfg["output_dir"])
    report = {}
    seed = int(cfg["seed"])
    structures = _toy_structures(seed)
    species = sorted({int(z) for s in structures for z in s.species})
    spec = BasisSpec(kind="gto", nmax=4, lmax=3, rcut=4.0, sigma_a=0.4,
                     cutoff_width=0.5, species=tuple(species))
    table = build_table(spec, grid_points=300)

    # spline accuracy against direct quadrature (optionally on a user table)
    check_table = table
    if cfg["check_settings"]["table"]:
        check_table = RadialTable.from_bytes(
            Path(cfg["check_settings"]["table"]).read_bytes())
    fam = primitive_functions(check_table.spec)
    rng = np.random.default_rng(seed)
    rs = rng.uniform(0.0, check_table.spec.rcut, 200)
    vals, _ = check_table.evaluate(rs)
    if check_table.contracted:
        spline_err = None
        report["spline_accuracy"] = {"skipped": "contracted table"}
    else:
        direct = np.stack([
            _integral_batch(fam, check_table.spec.sigma_a, l, rs, False)
            if check_table.spec.sigma_a > 0 else fam.values(rs)
            for l in range(check_table.spec.lmax + 1)
        ], axis=1)
        spline_err = float(np.max(np.abs(vals[0] - direct)))
        report["spline_accuracy"] = {"max_abs_error": spline_err,
                                     "pass": spline_err < 1e-5}

    envs = neighbor_lists(structures, spec.rcut)
    coeffs = [density_coeffs(e, table) for e in envs]

    rot = Rotation.random(random_state=seed).as_matrix()
    envs_r = neighbor_lists([apply_rotation(s, rot) for s in structures], spec.rcut)
    coeffs_r = [density_coeffs(e, table) for e in envs_r]
    from .correlations import powerspectrum
    ps_err = 0.0
    for c, cr in zip(coeffs, coeffs_r):
        p, _l = powerspectrum(c)
        pr, _l = powerspectrum(cr)
        scale = max(1.0, float(np.max(np.abs(p))))
        ps_err = max(ps_err, float(np.max(np.abs(p - pr))) / scale)
    report["rotation_invariance"] = {"max_rel_error": ps_err, "pass": ps_err < 1e-8}

    # norm identities on the first few environments
    cg = _cgt(2 * spec.lmax)
    norm_err = 0.0
    for c in coeffs[:4]:
        b1 = nice_seed(c)
        b2 = nice_iterate(b1, c, cg, lmax_out=2 * spec.lmax)
        n1 = b1.total_norm_squared()
        if n1 > 0:
            norm_err = max(norm_err, abs(b2.total_norm_squared() - n1**2) / n1**2)
    report["norm_power_identity"] = {"max_rel_error": norm_err,
                                     "pass": norm_err < 1e-8}

    sum_err = 0.0
    for e in envs[:6]:
        g = density_coeff_gradients(e, table)
        resid = np.max(np.abs(g.center_grad + g.neighbor_grads.sum(axis=0)))
        sum_err = max(sum_err, float(resid))
    report["gradient_sum_rule"] = {"max_abs_error": sum_err,
                                   "pass": sum_err < 1e-10}

    ok = all(v.get("pass", True) for v in report.values())
    report["all_pass"] = ok
    _write(outdir / "check_report.json",
           (json.dumps(report, sort_keys=True, indent=2) + "\n").encode())
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0 if ok else 2


COMMANDS = {
    "fit-basis": cmd_fit_basis,
    "compute-features": cmd_compute_features,
    "select": cmd_select,
    "gfre": cmd_gfre,
    "train": cmd_train,
    "predict": cmd_predict,
    "check": cmd_check,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="densopt",
        description="Density-expansion features with data-optimal radial bases",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--output-dir", default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.output_dir is not None:
            cfg["output_dir"] = args.output_dir
        if args.seed is not None:
            cfg["seed"] = args.seed
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surfaced with module context
        print(f"error [{type(exc).__module__}.{type(exc).__name__}]: {exc}",
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
