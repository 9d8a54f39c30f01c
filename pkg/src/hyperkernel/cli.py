"""Command-line front end: one subcommand per experiment.

Settings come from the subcommand defaults, then an optional ``key=value``
config file (``--config``), then command-line flags; later sources win. A
``manifest.csv`` written by a previous run is accepted as a config file, so a
run can be repeated from its manifest. Exit codes: 0 success, 1 runtime
failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import ConfigError, HyperkernelError

# -- settings schemas ---------------------------------------------------------


def _ints(s):
    return tuple(int(v) for v in str(s).split(",") if v.strip())


def _floats(s):
    return tuple(float(v) for v in str(s).split(",") if v.strip())


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s):
    v = str(s).strip().lower()
    return None if v in ("", "none", "0") else int(v)


def _opt_str(s):
    v = str(s).strip()
    return None if v.lower() in ("", "none") else v


COMMON = {
    "seed": (int, 0, "root seed; all randomness derives from it"),
    "threads": (int, 1, "worker threads for seed ensembles and Gram assembly"),
}

TASK = {
    "images": (_opt_str, None, "IDX3 image file (synthetic images when unset)"),
    "n_images": (int, 500, "number of images to use"),
    "size": (int, 28, "synthetic image side length"),
    "N": (int, 50, "number of training samples (image, pixel) pairs"),
    "pixels_per_image": (int, 20, "pixels sampled per training image"),
    "mode": (str, "representation", "representation or inpainting"),
    "fourier": (_opt_int, 256, "Fourier feature count for pixel coordinates (0 for raw coordinates)"),
    "scale": (float, 5.0, "frequency scale applied to [0,1] coordinates before the Fourier map"),
    "n_test_images": (int, 20, "held-out images; every pixel is a test point"),
    "L": (int, 3, "meta network depth"),
    "H": (int, 2, "primary network depth"),
}

SCHEMAS = {
    "duals-check": {
        "n_pairs": (int, 50, "random covariance pairs"),
        "samples": (int, 1_000_000, "Monte Carlo samples per pair"),
        "gate": (float, 3.0, "pass threshold in standard errors"),
    },
    "kernel": {
        "input": (_opt_str, None, "CSV with columns x*, z*, xp*, zp* (one input pair per row)"),
        "L": (int, 3, "meta network depth"),
        "H": (int, 2, "primary network depth"),
    },
    "converge": {
        "widths_f": (_ints, (32, 128, 512), "meta widths"),
        "widths_g": (_ints, (32, 128, 512), "primary widths"),
        "seeds": (int, 200, "networks per width cell"),
        "n_theta": (int, 9, "angles in [-pi/2, pi/2]"),
        "L": (int, 4, "meta network depth"),
        "H": (int, 4, "primary network depth"),
    },
    "drift": {
        "widths": (_ints, (32, 64, 128, 256), "meta and primary width"),
        "seeds": (int, 20, "networks per width"),
        "mu": (float, 1.0, "learning rate of the gradient step"),
        "L": (int, 3, "meta network depth"),
        "H": (int, 2, "primary network depth"),
        "n0": (int, 4, "meta input dimension"),
        "m0": (int, 2, "primary input dimension"),
        "n_train": (int, 16, "training examples in the full-batch step"),
        "n_probe": (int, 4, "held-out inputs whose Gram matrix is tracked"),
    },
    "corr-scaling": {
        "r": (int, 2, "order of the correlation term"),
        "widths": (_ints, (64, 128, 256, 512), "network widths"),
        "seeds": (int, 200, "networks per width"),
        "L": (int, 3, "depth"),
        "n0": (int, 8, "input dimension"),
        "n_out": (int, 1, "output dimension"),
        "outputs": (str, "matched", "matched, mismatched or random output indices"),
        "fixed_input": (_bool, False, "use one input for every gradient"),
    },
    "order-scaling": {
        "r": (int, 2, "Taylor order"),
        "H": (int, 2, "primary depth (unit hidden widths)"),
        "widths": (_ints, (64, 128, 256, 512), "meta widths"),
        "seeds": (int, 200, "networks per width"),
        "L": (int, 3, "meta depth"),
        "n0": (int, 8, "meta input dimension"),
    },
    "regress": dict(TASK, **{
        "kernel": (str, "ntk", "nngp or ntk"),
        "eps": (float, 1e-3, "ridge parameter"),
        "subsets": (int, 1, "ensemble size; training samples are split into this many subsets"),
    }),
    "train-baseline": dict(TASK, **{
        "meta_width": (int, 256, "meta hidden width"),
        "primary_width": (int, 64, "primary hidden width"),
        "lr": (float, 0.01, "SGD learning rate"),
        "batch": (int, 20, "minibatch size"),
        "epochs": (int, 100, "training epochs"),
    }),
    "large-lr": {
        "widths": (_ints, (100, 1000, 10000), "hidden widths of the two-layer network"),
        "seeds": (int, 5, "runs per width"),
        "mu": (_opt_str, None, "fixed learning rate (default sqrt(width))"),
        "p": (int, 1, "loss exponent, 1 or 2"),
        "epochs": (int, 1, "training epochs"),
        "batch": (int, 1, "minibatch size"),
        "images": (_opt_str, None, "IDX3 image file (synthetic images when unset)"),
        "n_images": (int, 1200, "images; the last n_test are held out"),
        "n_test": (int, 200, "held-out images"),
        "size": (int, 14, "synthetic image side length"),
    },
}

for _schema in SCHEMAS.values():
    for _k, _v in COMMON.items():
        _schema.setdefault(_k, _v)

RESERVED = ("subcommand", "version", "rng")


def read_config(path) -> dict:
    """Parse ``key=value`` lines (``#`` comments) or a ``key,value`` manifest CSV."""
    out = {}
    with open(path, newline="") as f:
        text = f.read()
    if str(path).endswith(".csv"):
        rows = list(csv.reader(text.splitlines()))
        for row in rows[1:] if rows and rows[0] == ["key", "value"] else rows:
            if len(row) == 2:
                out[row[0].strip()] = row[1]
        return out
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(sub: str, file_values: dict, flag_values: dict) -> dict:
    """Merge defaults, config-file values and flag values for ``sub``."""
    schema = SCHEMAS[sub]
    params = {k: spec[1] for k, spec in schema.items()}
    for source in (file_values, flag_values):
        for k, raw in source.items():
            if raw is None:
                continue
            if k in RESERVED:
                if k == "subcommand" and raw != sub:
                    raise ConfigError(f"config is for subcommand {raw!r}, not {sub!r}")
                continue
            if k not in schema:
                raise ConfigError(f"unknown key {k!r} for {sub}")
            try:
                params[k] = schema[k][0](raw) if isinstance(raw, str) else raw
            except ValueError as e:
                raise ConfigError(f"bad value for {k!r}: {e}") from None
    if params["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    return params


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return "none" if v is None else str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if not isinstance(v, (np.floating, float)) else repr(float(v)) for v in row])


def write_manifest(out_dir, sub: str, params: dict) -> None:
    from .linalg import RNG_NAME

    rows = [("subcommand", sub), ("version", __version__), ("rng", RNG_NAME)]
    rows += [(k, _fmt(params[k])) for k in sorted(params) if k != "threads"]
    write_csv(os.path.join(out_dir, "manifest.csv"), ("key", "value"), rows)


# -- subcommands --------------------------------------------------------------


def _load_images(params, count_key="n_images"):
    from .datasets import load_idx, synthetic_images

    if params.get("images"):
        imgs = load_idx(params["images"])
        return imgs.subset(np.arange(min(params[count_key], imgs.count)))
    return synthetic_images(params[count_key], params["size"], params["seed"])


def _pixel_split(params):
    from .datasets import pixel_split

    imgs = _load_images(params)
    return pixel_split(imgs, params["N"], params["pixels_per_image"], params["mode"], params["fourier"],
                       params["scale"], params["n_test_images"], params["seed"])


def _kernel_cfg(params, train):
    from .kernels import HyperKernelConfig

    return HyperKernelConfig(L=params["L"], H=params["H"], n0=train.X.shape[1], m0=train.Z.shape[1])


def run_duals_check(p, out, mapper):
    from .duals import dual_relu, dual_relu_dot, mc_dual, random_cov_pair
    from .linalg import rng

    gen = rng(p["seed"], 0xDC)
    pairs = [random_cov_pair(gen) for _ in range(p["n_pairs"])]

    def one(job):
        i, lam = job
        mc = mc_dual(lam, p["samples"], seed=p["seed"] * 100_003 + i)
        a, b = dual_relu(lam), dual_relu_dot(lam)
        ok = abs(a - mc.mean) <= p["gate"] * mc.stderr and abs(b - mc.mean_dot) <= p["gate"] * mc.stderr_dot
        return (lam.s11, lam.s12, lam.s22, a, mc.mean, mc.stderr, b, mc.mean_dot, mc.stderr_dot, int(ok))

    rows = list(mapper(one, list(enumerate(pairs))))
    write_csv(os.path.join(out, "duals.csv"),
              ("s11", "s12", "s22", "dual", "mc_mean", "mc_stderr", "dual_dot", "mc_dot_mean", "mc_dot_stderr",
               "pass"), rows)
    passed = sum(r[-1] for r in rows)
    print(f"duals-check: {passed}/{len(rows)} pairs within {p['gate']} stderr")


def _read_pairs(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ConfigError(f"{path}: no input rows")
    cols = list(rows[0].keys())

    def block(prefix):
        names = [c for c in cols if c.rstrip("0123456789") == prefix]
        names.sort(key=lambda c: int(c[len(prefix):] or 0))
        if not names:
            raise ConfigError(f"{path}: no {prefix}* columns")
        return np.array([[float(r[c]) for c in names] for r in rows])

    return block("x"), block("z"), block("xp"), block("zp")


def run_kernel(p, out, mapper):
    from .kernels import HyperKernelConfig, hyper_nngp, hyper_ntk

    if not p["input"]:
        raise ConfigError("kernel needs input=<csv>")
    X, Z, Xp, Zp = _read_pairs(p["input"])
    cfg = HyperKernelConfig(L=p["L"], H=p["H"], n0=X.shape[1], m0=Z.shape[1])

    def one(i):
        u, v = (X[i], Z[i]), (Xp[i], Zp[i])
        k = hyper_ntk(u, v, cfg)
        return (i, k.theta_f, k.theta_g, k.theta_h, hyper_nngp(u, v, cfg).last.s12)

    rows = list(mapper(one, range(X.shape[0])))
    write_csv(os.path.join(out, "kernel.csv"), ("row", "theta_f", "theta_g", "theta_h", "nngp"), rows)
    print(f"kernel: {len(rows)} pairs")


def run_converge(p, out, mapper):
    from .experiments import CONVERGE_HEADER, converge_experiment, theta_grid

    res = converge_experiment(p["widths_f"], p["widths_g"], p["seeds"], theta_grid(p["n_theta"]), p["L"], p["H"],
                              root=p["seed"], mapper=mapper)
    write_csv(os.path.join(out, "converge.csv"), CONVERGE_HEADER, res.rows)
    write_csv(os.path.join(out, "converge_limit.csv"), ("theta", "theta_h"), res.limit)
    print(f"converge: {len(res.rows)} rows")


def run_drift(p, out, mapper):
    from .experiments import kernel_drift_experiment, median_by_width

    rows = kernel_drift_experiment(p["widths"], p["seeds"], p["mu"], p["L"], p["H"], p["n0"], p["m0"], p["n_train"],
                                   p["n_probe"], root=p["seed"], mapper=mapper)
    med = median_by_width(rows)
    write_csv(os.path.join(out, "drift.csv"), ("width", "seed", "rel_change"), rows)
    write_csv(os.path.join(out, "drift_summary.csv"), ("width", "median_rel_change"), med)
    for n, m in med:
        print(f"drift: width {n} median relative change {m:.4g}")


def _write_probe(out, res):
    write_csv(os.path.join(out, "raw.csv"), ("width", "seed", "term_value"), res.raw)
    write_csv(os.path.join(out, "aggregate.csv"), ("width", "mean_abs", "sd", "n"), res.aggregate)
    f = res.fit
    write_csv(os.path.join(out, "summary.csv"), ("slope", "intercept", "r2", "ci_low", "ci_high"),
              [(f.slope, f.intercept, f.r2, f.ci_low, f.ci_high)])
    m = res.median_fit
    write_csv(os.path.join(out, "summary_median.csv"), ("slope", "intercept", "r2", "ci_low", "ci_high"),
              [(m.slope, m.intercept, m.r2, m.ci_low, m.ci_high)])
    print(f"slope (mean |.|) {f.slope:.3f} [{f.ci_low:.3f}, {f.ci_high:.3f}]; slope (median |.|) {m.slope:.3f}")


def run_corr_scaling(p, out, mapper):
    from .correlation import scaling_probe_T

    res = scaling_probe_T(p["r"], p["widths"], p["seeds"], p["L"], p["n0"], p["n_out"], p["outputs"],
                          p["fixed_input"], root=p["seed"], mapper=mapper)
    _write_probe(out, res)


def run_order_scaling(p, out, mapper):
    from .correlation import scaling_probe_K

    res = scaling_probe_K(p["r"], p["H"], p["widths"], p["seeds"], p["L"], p["n0"], root=p["seed"], mapper=mapper)
    _write_probe(out, res)


def run_regress(p, out, mapper):
    from .regression import HyperKernel, ensemble_predict, mse

    if p["kernel"] not in ("nngp", "ntk"):
        raise ConfigError(f"kernel must be nngp or ntk, got {p['kernel']!r}")
    if p["subsets"] < 1:
        raise ConfigError("subsets must be >= 1")
    train, test = _pixel_split(p)
    kern = HyperKernel(_kernel_cfg(p, train), p["kernel"])
    parts = np.array_split(np.arange(len(train)), p["subsets"])
    subsets = [((train.X[i], train.Z[i]), train.y[i]) for i in parts if i.size]
    pred = ensemble_predict(subsets, test.inputs, kern, p["eps"], mapper=mapper)
    rows = [("kernel_mse", mse(pred, test.y)), ("mean_baseline_mse", mse(np.full(len(test), train.y.mean()), test.y)),
            ("n_train", len(train)), ("n_test", len(test))]
    write_csv(os.path.join(out, "regress.csv"), ("metric", "value"), rows)
    write_csv(os.path.join(out, "predictions.csv"), ("image_id", "row", "col", "label", "prediction"),
              [(int(i), int(r), int(c), y, q) for i, (r, c), y, q in zip(test.image_id, test.coords, test.y, pred)])
    print(f"regress ({p['kernel']}, {p['mode']}): test MSE {rows[0][1]:.4f}, mean predictor {rows[1][1]:.4f}")


def run_train_baseline(p, out, mapper):
    from .hypernet import init_hypernet, model_predict, sgd_train
    from .regression import mse

    train, test = _pixel_split(p)
    cfg = _kernel_cfg(p, train)
    hw = init_hypernet(cfg, p["meta_width"], p["primary_width"], p["seed"])
    res = sgd_train(hw, (train.X, train.Z, train.y), p["lr"], p["epochs"], p["batch"], 2, seed=p["seed"])
    test_mse = mse(model_predict(res.model, test.inputs), test.y)
    write_csv(os.path.join(out, "train_curve.csv"), ("epoch", "train_loss"), list(enumerate(res.losses)))
    write_csv(os.path.join(out, "baseline.csv"), ("metric", "value"),
              [("test_mse", test_mse), ("final_train_loss", res.losses[-1]), ("steps", res.steps)])
    print(f"train-baseline: test MSE {test_mse:.4f} after {res.steps} steps")


def run_large_lr(p, out, mapper):
    from .datasets import window_mean_targets
    from .experiments import large_lr_experiment

    if p["p"] not in (1, 2):
        raise ConfigError("p must be 1 or 2")
    imgs = _load_images(p)
    if p["n_test"] < 1 or p["n_test"] >= imgs.count:
        raise ConfigError("n_test must leave at least one training image")
    X = imgs.normalized.reshape(imgs.count, -1)
    y = window_mean_targets(imgs)
    cut = imgs.count - p["n_test"]
    mu = None if p["mu"] is None else float(p["mu"])
    rows = large_lr_experiment((X[:cut], y[:cut]), (X[cut:], y[cut:]), p["widths"], p["seeds"], p["epochs"],
                               p["batch"], p["p"], mu, root=p["seed"], mapper=mapper)
    write_csv(os.path.join(out, "large_lr.csv"), ("width", "seed", "mu", "final_train_loss", "test_loss", "finite"),
              [r[:5] + (int(r[5]),) for r in rows])
    summary = []
    for n in p["widths"]:
        sel = [r for r in rows if r[0] == n]
        summary.append((n, float(np.median([r[4] for r in sel])), sum(r[5] for r in sel), len(sel)))
    write_csv(os.path.join(out, "large_lr_summary.csv"), ("width", "median_test_loss", "n_finite", "n_runs"), summary)
    for n, m, k, t in summary:
        print(f"large-lr: width {n} median test loss {m:.4g} ({k}/{t} finite)")


RUNNERS = {
    "duals-check": run_duals_check,
    "kernel": run_kernel,
    "converge": run_converge,
    "drift": run_drift,
    "corr-scaling": run_corr_scaling,
    "order-scaling": run_order_scaling,
    "regress": run_regress,
    "train-baseline": run_train_baseline,
    "large-lr": run_large_lr,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyperkernel", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="subcommand", required=True)
    for name, schema in SCHEMAS.items():
        sp = subs.add_parser(name, help=RUNNERS[name].__name__.replace("run_", "").replace("_", " "))
        sp.add_argument("--config", help="key=value settings file or a previous manifest.csv")
        sp.add_argument("--out", default=None, help=f"output directory (default runs/{name})")
        for key, (_, default, text) in schema.items():
            sp.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                            help=f"{text} (default {_fmt(default)})")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    sub = args.subcommand
    flags = {k: getattr(args, k) for k in SCHEMAS[sub]}
    try:
        file_values = read_config(args.config) if args.config else {}
        params = resolve(sub, file_values, flags)
    except (ConfigError, OSError) as e:
        print(f"hyperkernel {sub}: config error: {e}", file=sys.stderr)
        return 2
    out = args.out or os.path.join("runs", sub)
    from .experiments import parallel_map

    t0 = time.time()
    try:
        os.makedirs(out, exist_ok=True)
        write_manifest(out, sub, params)
        with parallel_map(params["threads"]) as mapper:
            RUNNERS[sub](params, out, mapper)
    except ConfigError as e:
        print(f"hyperkernel {sub}: config error: {e}", file=sys.stderr)
        return 2
    except (HyperkernelError, ValueError, OSError, ArithmeticError) as e:
        print(f"hyperkernel {sub}: failed: {e}", file=sys.stderr)
        return 1
    print(f"wrote {out} in {time.time() - t0:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
