"""Command-line interface: ``maternglm {simulate,fit,ppm,sample-prior,cv}``."""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import eb, evalsim, io, priors as pr
from .glm import Dataset, precompute_lagged
from .lattice import ball_mask, build_lattice
from .posterior import compute_ppm, summarize


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _hyperpriors(kind, cfg, sigma0):
    hp = cfg.section("hyperprior")
    if kind in ("M2", "AM2"):
        terms = [pr.PCMatern(rho0=hp["rho0"], sigma0=sigma0, xi1=hp["xi1"], xi2=hp["xi2"])]
        if kind == "AM2":
            terms.append(pr.LogNormalAniso(hp["sigma_h2"]))
        return tuple(terms)
    if kind == "M1":
        return (pr.LogNormal(),)
    if hp["tau2_prior"] == "gamma":
        return (pr.GammaPrecision(hp["gamma_scale"], hp["gamma_shape"]),)
    const = {"ICAR1": hp["icar1_constant"], "ICAR2": hp["icar2_constant"], "GS": 1.0}[kind]
    return (pr.PCPrecision(sigma0=sigma0, xi2=hp["xi2"], variance_constant=const),)


def _optimizer_config(cfg):
    return eb.OptimizerConfig(**cfg.section("optimizer"))


def _noise_prior(cfg):
    hp = cfg.section("hyperprior")
    return eb.NoisePrior(hp["noise_scale"], hp["noise_shape"], hp["tau_A2"])


def _require(cfg, key):
    path = cfg.path(key)
    if not os.path.exists(path):
        raise io.ConfigError(f"data.{key}", f"file not found: {path}")
    return path


def load_dataset(cfg):
    """Dataset, lattice and mask volume from the ``data`` section."""
    mask_path = _require(cfg, "mask")
    bold_path = _require(cfg, "bold")
    design_path = _require(cfg, "design")
    mask_vol = io.read_volume(mask_path)
    bold = io.read_volume(bold_path)
    X = io.read_design(design_path)
    if bold.data.ndim != 4:
        raise io.ConfigError("data.bold", "must be a 4D volume")
    if bold.dims != mask_vol.dims:
        raise io.ConfigError("data.mask", f"mask dims {mask_vol.dims} differ from data dims {bold.dims}")
    lat = build_lattice(np.asarray(mask_vol.data) != 0, mask_vol.voxel_size)
    Y = lat.from_volume(bold.data).T
    model = cfg.section("model")
    activity = [i - 1 for i in model.get("activity", [1])]
    if any(i >= X.shape[1] for i in activity):
        raise io.ConfigError("model.activity", f"index exceeds the {X.shape[1]} design columns")
    return Dataset(Y, X, lat, activity=tuple(activity)), mask_vol


def _kinds(cfg, dataset, override=None):
    kinds = override or cfg.section("model").get("priors", ["AM2"])
    if len(kinds) == 1:
        kinds = kinds * len(dataset.activity)
    return list(kinds)


def build_model(cfg, dataset, kinds):
    """EB model templates for the given activity prior kinds."""
    model_cfg = cfg.section("model")
    sigma0 = model_cfg["sigma0_percent"] / 100.0 * abs(dataset.global_mean)
    priors = []
    for k in range(dataset.K):
        if k in dataset.activity:
            kind = kinds[dataset.activity.index(k)]
            opt = ("tau0",) if kind == "GS" else None
            priors.append(pr.make_prior(kind, dataset.lattice, hyperpriors=_hyperpriors(kind, cfg, sigma0),
                                        optimize=opt))
        else:
            priors.append(pr.make_prior("GS", dataset.lattice))
    stats = precompute_lagged(dataset.X, dataset.Y, model_cfg["ar_order"])
    return eb.EBModel(stats, priors, _noise_prior(cfg), model_cfg["preconditioner"])


def fit_model(cfg, dataset, kinds, seed):
    model = build_model(cfg, dataset, kinds)
    oc = _optimizer_config(cfg)
    lam, A, _ = eb.init_noise(dataset.X, dataset.Y, model.stats.P, oc.lam_max, oc.A_clip)
    return eb.run_optimizer(model, lam, A, oc, seed)


def save_fit(path, fit, kinds):
    np.savez(path, lam=fit.lam, A=fit.A, mean=fit.mean, kinds=np.array(kinds),
             spatial=np.array(json.dumps([dict(d) for d in fit.state.spatial])))


def load_fit(path, cfg, dataset):
    if not os.path.exists(path):
        raise io.ConfigError("--fit", f"file not found: {path}")
    z = np.load(path)
    kinds = [str(k) for k in z["kinds"]]
    model = build_model(cfg, dataset, kinds)
    state = eb.HyperState(tuple(json.loads(str(z["spatial"]))), np.log(z["lam"]), eb.A_to_A0(z["A"]))
    priors = model.priors_at(state)
    return eb.FitResult(model, state, priors, z["mean"], eb.OptimizerTrace()), kinds


def _out_dir(cfg, override):
    out = override or cfg.raw.get("data", {}).get("output", "out")
    if not os.path.isabs(out):
        out = os.path.join(cfg.base_dir, out) if override is None else out
    os.makedirs(out, exist_ok=True)
    return out


def _hyper_rows(fit, kinds, dataset):
    rows = []
    vox = dataset.lattice.voxel_size[0]
    for k, p in enumerate(fit.priors):
        if k not in dataset.activity:
            continue
        row = {"regressor": k + 1, "kind": p.kind, "tau2": p.tau2, "kappa2": p.kappa2, "hx": p.hx, "hy": p.hy,
               "sigma": "", "rho_mm": ""}
        if p.kind in ("M2", "AM2"):
            s2, rho = p.sigma_rho()
            row["sigma"], row["rho_mm"] = s2**0.5, rho * vox
        rows.append(row)
    return rows


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args, cfg):
    sim = cfg.raw.get("simulate", {})
    seed = args.seed if args.seed is not None else cfg.seed
    dims = tuple(int(d) for d in sim.get("dims", [24, 24, 24]))
    if len(dims) != 3:
        raise io.ConfigError("simulate.dims", "needs three entries")
    vs = float(sim.get("voxel_size", 3.0))
    shape = sim.get("mask", "ball")
    if shape == "ball":
        mask = ball_mask(dims)
    elif shape == "box":
        mask = np.ones(dims, dtype=bool)
    else:
        raise io.ConfigError("simulate.mask", "must be 'ball' or 'box'")
    conds = []
    for i, c in enumerate(sim.get("conditions", [{"sigma": 2.0, "rho_mm": 9.0}])):
        try:
            conds.append(evalsim.Condition(**c))
        except TypeError as exc:
            raise io.ConfigError(f"simulate.conditions[{i}]", str(exc)) from exc
    lat = build_lattice(mask, (vs, vs, vs))
    spec = evalsim.SimulationSpec(lat, tuple(conds), T=int(sim.get("T", 100)), noise_sd=float(sim.get("noise_sd", 2.0)),
                                  ar=tuple(sim.get("ar", [0.3])), intercept=float(sim.get("intercept", 100.0)),
                                  block=int(sim.get("block", 10)), seed=seed)
    data = evalsim.simulate_dataset(spec)
    out = _out_dir(cfg, args.out)
    geom = io.Volume(np.zeros(dims), (vs, vs, vs))
    io.write_volume(os.path.join(out, "bold.nii"), geom.like(lat.to_volume(data.dataset.Y.T)))
    io.write_volume(os.path.join(out, "mask.nii"), geom.like(mask.astype(np.float32)))
    io.write_design(os.path.join(out, "design.csv"), data.dataset.X,
                    header=[f"cond{i + 1}" for i in range(len(conds))] + ["intercept"])
    for k in range(data.W.shape[0]):
        io.write_volume(os.path.join(out, f"truth_beta{k + 1}.nii"), geom.like(lat.to_volume(data.W[k])))
    np.savez(os.path.join(out, "truth.npz"), W=data.W, lam=data.lam, A=data.A)
    return 0


def cmd_fit(args, cfg):
    dataset, mask_vol = load_dataset(cfg)
    seed = args.seed if args.seed is not None else cfg.seed
    kinds = _kinds(cfg, dataset)
    fit = fit_model(cfg, dataset, kinds, seed)
    out = _out_dir(cfg, args.out)
    save_fit(os.path.join(out, "fit.npz"), fit, kinds)
    fit.trace.write_csv(os.path.join(out, "diagnostics.csv"))
    _write_rows(os.path.join(out, "hyperparameters.csv"), _hyper_rows(fit, kinds, dataset))
    noise = {"lambda": fit.lam}
    for p in range(fit.A.shape[0]):
        noise[f"a{p + 1}"] = fit.A[p]
    lat = dataset.lattice
    for name, vals in noise.items():
        io.write_volume(os.path.join(out, f"noise_{name}.nii"), mask_vol.like(lat.to_volume(vals)))
    for k in range(dataset.K):
        io.write_volume(os.path.join(out, f"mean_beta{k + 1}.nii"), mask_vol.like(lat.to_volume(fit.mean[k])))
    return 0


def cmd_ppm(args, cfg):
    dataset, mask_vol = load_dataset(cfg)
    out = _out_dir(cfg, args.out)
    fit, _ = load_fit(args.fit or os.path.join(out, "fit.npz"), cfg, dataset)
    ppm_cfg = cfg.section("ppm")
    contrast = np.zeros(dataset.K)
    given = ppm_cfg.get("contrast")
    if given is None:
        contrast[dataset.activity[0]] = 1.0
    else:
        if len(given) != dataset.K:
            raise io.ConfigError("ppm.contrast", f"needs {dataset.K} entries")
        contrast = np.asarray(given, dtype=float)
    seed = args.seed if args.seed is not None else cfg.seed
    gamma = ppm_cfg["threshold_percent"] / 100.0 * abs(dataset.global_mean)
    summ = summarize(fit.system(), np.random.default_rng(seed), n_rbmc=ppm_cfg["n_rbmc"], mean=fit.mean)
    p = compute_ppm(summ.mean, summ.cov, contrast, gamma)
    lat = dataset.lattice
    io.write_volume(os.path.join(out, "ppm.nii"), mask_vol.like(lat.to_volume(p)))
    io.write_volume(os.path.join(out, "ppm_thresholded.nii"),
                    mask_vol.like(lat.to_volume((p >= ppm_cfg["display"]).astype(np.float32))))
    return 0


def cmd_sample_prior(args, cfg):
    if args.mask:
        mvol = io.read_volume(args.mask)
        mask = np.asarray(mvol.data) != 0
        vs = mvol.voxel_size
    else:
        mask = ball_mask(tuple(args.dims)) if args.shape == "ball" else np.ones(tuple(args.dims), dtype=bool)
        vs = (args.voxel_size,) * 3
    lat = build_lattice(mask, vs)
    kind = args.kind
    if kind in ("M2", "AM2"):
        tau2, kappa2 = pr.tau2_kappa2_from(args.sigma, args.rho_mm / vs[0])
    else:
        tau2, kappa2 = args.tau2, (args.kappa2 if kind == "M1" else 0.0)
    hx, hy = (args.hx, args.hy) if kind == "AM2" else (1.0, 1.0)
    prior = pr.SpatialPrior(kind, lat, tau2=tau2, kappa2=kappa2, hx=hx, hy=hy)
    seed = args.seed if args.seed is not None else cfg.seed
    u = pr.sample_prior(prior, seed=seed, n_samples=args.n)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    geom = io.Volume(np.zeros(lat.dims), tuple(vs))
    for i in range(args.n):
        io.write_volume(os.path.join(out, f"sample_{kind}_{i + 1}.nii"), geom.like(lat.to_volume(u[:, i])))
    return 0


def cmd_cv(args, cfg):
    dataset, _ = load_dataset(cfg)
    out = _out_dir(cfg, args.out)
    seed = args.seed if args.seed is not None else cfg.seed
    cv_cfg = cfg.section("cv")
    plan = evalsim.CvPlan(cv_cfg["leave_out"], cv_cfg["n_splits"], seed, cv_cfg["n_rbmc"])
    splits = plan.splits(dataset.N)
    fits = []
    if "priors" in cv_cfg:
        for kind in cv_cfg["priors"]:
            if kind not in io.PRIOR_KINDS:
                raise io.ConfigError("cv.priors", f"unknown prior kind {kind!r}")
            kinds = [kind] * len(dataset.activity)
            fits.append((kind, fit_model(cfg, dataset, kinds, seed)))
    else:
        fit, kinds = load_fit(args.fit or os.path.join(out, "fit.npz"), cfg, dataset)
        fits.append(("+".join(kinds), fit))
    rows = []
    for name, fit in fits:
        for i, rep in enumerate(evalsim.cv_scores(fit, dataset, plan, splits)):
            rows.append({"split": i + 1, "prior": name, **rep.as_dict()})
    _write_rows(os.path.join(out, "cv_scores.csv"), rows)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="maternglm", description="Spatial Bayesian GLM with Matern GMRF priors")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="run configuration (TOML)")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--out", default=None, help="output directory (overrides data.output)")

    common(sub.add_parser("simulate", help="simulate a dataset with known activity fields"))
    common(sub.add_parser("fit", help="estimate hyperparameters and posterior means"))
    s = sub.add_parser("ppm", help="posterior probability maps from a fit")
    common(s)
    s.add_argument("--fit", default=None, help="fit.npz (default: <out>/fit.npz)")
    s = sub.add_parser("cv", help="cross-validated predictive scores")
    common(s)
    s.add_argument("--fit", default=None)
    s = sub.add_parser("sample-prior", help="draw fields from a spatial prior")
    common(s, config_required=False)
    s.add_argument("--kind", choices=io.PRIOR_KINDS, default="M2")
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--rho-mm", type=float, default=9.0)
    s.add_argument("--tau2", type=float, default=1.0)
    s.add_argument("--kappa2", type=float, default=0.1)
    s.add_argument("--hx", type=float, default=1.0)
    s.add_argument("--hy", type=float, default=1.0)
    s.add_argument("--mask", default=None)
    s.add_argument("--dims", type=int, nargs=3, default=[24, 24, 24])
    s.add_argument("--shape", choices=("ball", "box"), default="box")
    s.add_argument("--voxel-size", type=float, default=3.0)
    s.add_argument("--n", type=int, default=1)
    return p


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "ppm": cmd_ppm, "sample-prior": cmd_sample_prior,
            "cv": cmd_cv}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = io.load_config(args.config) if args.config else io.RunConfig()
        return COMMANDS[args.command](args, cfg)
    except io.ConfigError as exc:
        print(f"maternglm: invalid config: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"maternglm: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"maternglm: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
