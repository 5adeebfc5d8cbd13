"""Command-line entry point: ``blindsr {synth,solve,train,eval}``.

Settings resolve as command line > ``--config`` TOML section > defaults.
Exit codes: 0 ok, 1 runtime failure, 2 usage error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import degradation, estimators, gem, imaging, kernels
from .fileio import read_png, write_png, write_text_atomic


EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


DEFAULTS = {
    "synth": {
        "hr_dir": None, "out": None, "scale": 2, "sigma": 0.01, "seed": 0,
        "components": kernels.DEFAULT_COMPONENTS, "prior_rates": None,
        "support": kernels.DEFAULT_SUPPORT, "boundary": imaging.REPLICATE,
        "anisotropic": False,
    },
    "solve": {
        "lr": None, "manifest": None, "out": None, "out_dir": None, "kernel_out": None,
        "trace": None, "b2": None, "scale": 2, "sigma": 0.01, "seed": 0,
        "components": kernels.DEFAULT_COMPONENTS, "prior_rates": None,
        "support": kernels.DEFAULT_SUPPORT, "boundary": imaging.REPLICATE,
        "max_outer": 50, "e_steps": 5, "m_cg_iters": 20, "tol_rel": 1e-5,
        "ridge": estimators.DEFAULT_RIDGE, "n_mc": 8, "jobs": None,
    },
    "train": {
        "manifest": None, "unlabeled": None, "alpha_g": 1.0, "alpha_r": 1.0,
        "epochs": 30, "batch_size": 8, "learning_rate": 0.0002, "beta1": 0.9,
        "beta2": 0.99, "n_mc": 2, "fd_step": 1e-4, "seed": 0, "out": None,
        "curve": None, "scale": 2, "sigma": 0.01,
        "components": kernels.DEFAULT_COMPONENTS, "prior_rates": None,
        "support": kernels.DEFAULT_SUPPORT, "boundary": imaging.REPLICATE,
        "restorer_iters": 5, "use_kernels": False,
    },
    "eval": {"sr_dir": None, "hr_dir": None, "out": None, "crop_border": 0},
}


def _floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _bool(text):
    if isinstance(text, bool):
        return text
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser():
    parser = argparse.ArgumentParser(prog="blindsr", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="TOML file with [synth]/[solve]/[train]/[eval] sections")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    def common_model(p):
        p.add_argument("--scale", type=int, help="integer scale factor s")
        p.add_argument("--sigma", type=float, help="noise standard deviation (intensity units)")
        p.add_argument("--seed", type=int, help="master random seed")
        p.add_argument("--components", type=int, help="number of mixture components L")
        p.add_argument("--prior-rates", type=_floats, help="comma-separated prior rates (default 0.5 each)")
        p.add_argument("--support", type=int, help="odd kernel support P")
        p.add_argument("--boundary", choices=imaging.BOUNDARY_MODES, help="convolution boundary")

    p = sub.add_parser("synth", help="synthesize an LR dataset from HR PNGs")
    p.add_argument("--hr-dir", type=Path, help="directory of HR PNG images")
    p.add_argument("--out", type=Path, help="output dataset directory")
    common_model(p)
    p.add_argument("--anisotropic", type=_bool, help="use random anisotropic Gaussian kernels")

    p = sub.add_parser("solve", help="blind (or non-blind with --b2) super-resolution")
    p.add_argument("--lr", type=Path, help="single LR PNG input")
    p.add_argument("--manifest", type=Path, help="JSON-lines manifest of LR inputs")
    p.add_argument("--out", type=Path, help="SR output PNG (single-image mode)")
    p.add_argument("--out-dir", type=Path, help="output directory (manifest mode)")
    p.add_argument("--kernel-out", type=Path, help="kernel text output (single-image mode)")
    p.add_argument("--trace", type=Path, help="ELBO trace CSV (single-image mode)")
    p.add_argument("--b2", type=_floats, help="known bandwidths: switches to non-blind mode")
    common_model(p)
    p.add_argument("--max-outer", type=int, help="maximum GEM iterations")
    p.add_argument("--e-steps", type=int, help="line-search ascent steps per E-step")
    p.add_argument("--m-cg-iters", type=int, help="CG iterations per M-step")
    p.add_argument("--tol-rel", type=float, help="relative ELBO change stopping tolerance")
    p.add_argument("--ridge", type=float, help="weight of the bicubic anchor term")
    p.add_argument("--n-mc", type=int, help="Monte Carlo draws")
    p.add_argument("--jobs", type=int, help="worker processes (default: logical cores)")

    p = sub.add_parser("train", help="train the amortized estimators")
    p.add_argument("--manifest", type=Path, help="labeled manifest (records with hr_path)")
    p.add_argument("--unlabeled", type=Path, help="unlabeled manifest (LR only)")
    p.add_argument("--alpha-g", type=float, help="weight of the unsupervised ELBO term")
    p.add_argument("--alpha-r", type=float, help="weight of the supervised term")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--batch-size", type=int, help="images per step")
    p.add_argument("--learning-rate", type=float, help="Adam learning rate")
    p.add_argument("--beta1", type=float, help="Adam first-moment decay")
    p.add_argument("--beta2", type=float, help="Adam second-moment decay")
    p.add_argument("--n-mc", type=int, help="Monte Carlo draws per image")
    p.add_argument("--fd-step", type=float, help="finite-difference step for gradients")
    p.add_argument("--restorer-iters", type=int, help="unrolled CG iterations T")
    p.add_argument("--use-kernels", type=_bool, help="add the kernel-matching term when kernels exist")
    p.add_argument("--out", type=Path, help="output params JSON")
    p.add_argument("--curve", type=Path, help="learning-curve CSV")
    common_model(p)

    p = sub.add_parser("eval", help="PSNR/SSIM on the Y channel")
    p.add_argument("--sr-dir", type=Path, help="directory of SR PNGs")
    p.add_argument("--hr-dir", type=Path, help="directory of HR PNGs")
    p.add_argument("--out", type=Path, help="metrics CSV")
    p.add_argument("--crop-border", type=int, help="pixels cropped from each border first")
    return parser


def resolve_settings(command, args, config_path):
    """Merge defaults, the config-file section and explicit flags."""
    settings = dict(DEFAULTS[command])
    if config_path is not None:
        with open(config_path, "rb") as fh:
            section = tomllib.load(fh).get(command, {})
        for key, value in section.items():
            key = key.replace("-", "_")
            if key not in settings:
                raise UsageError(f"unknown setting {key!r} in [{command}] of {config_path}")
            settings[key] = value
    for key, value in vars(args).items():
        if key in settings and value is not None:
            settings[key] = value
    return settings


def _prior(s):
    """Prior rates; explicit ``prior_rates`` also fix the component count."""
    if s["prior_rates"] is None:
        return kernels.default_prior(s["components"])
    return kernels.as_rates(s["prior_rates"])


def _degradation(s):
    return degradation.DegradationConfig(
        scale=s["scale"], sigma_n=s["sigma"], support=s["support"],
        boundary=s["boundary"], seed=s["seed"],
    )


def _fail(message, code=EXIT_RUNTIME):
    print(f"blindsr: error: {message}", file=sys.stderr)
    return code


def _require(s, *keys):
    missing = [k for k in keys if s.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def cmd_synth(s):
    _require(s, "hr_dir", "out")
    hr_dir = Path(s["hr_dir"])
    if not hr_dir.is_dir():
        return _fail(f"HR directory not found: {hr_dir}")
    paths = sorted(hr_dir.glob("*.png"))
    if not paths:
        return _fail(f"no PNG images in {hr_dir}")
    records = degradation.synth_dataset(
        paths, _degradation(s), _prior(s), s["out"], anisotropic=bool(s["anisotropic"])
    )
    print(f"wrote {len(records)} records to {Path(s['out']) / 'manifest.jsonl'}")
    return EXIT_OK


def trace_csv(state):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "value", "data_term", "kl_term"])
    for i, e in enumerate(state.elbo_trace, start=1):
        w.writerow([i, repr(e.value), repr(e.data_term), repr(e.kl_term)])
    return buf.getvalue()


def _gem_config(s, seed):
    prior = _prior(s)
    return gem.GemConfig(
        max_outer=s["max_outer"], e_steps=s["e_steps"], m_cg_iters=s["m_cg_iters"],
        tol_rel=s["tol_rel"], ridge=s["ridge"], n_mc=s["n_mc"], seed=seed,
        prior=tuple(prior), degradation=_degradation(s),
    )


def _solve_one(task):
    """Solve one LR image; returns (id, error message or None)."""
    rid, lr_path, out, kernel_out, trace_path, s = task
    try:
        y = read_png(lr_path)
        cfg = _gem_config(s, estimators.derive_seed(s["seed"], f"solve:{rid}"))
        if s["b2"] is not None:
            b2 = kernels.as_bandwidths(s["b2"])
            x = gem.solve_nonblind(y, b2, cfg)
            k = kernels.make_mixture_kernel(b2, cfg.degradation.support)
            state = None
        else:
            state = gem.solve_blind(y, cfg)
            x = state.x_hat
            k = kernels.make_mixture_kernel(
                kernels.posterior_mean_bandwidth(state.lambda_hat), cfg.degradation.support
            )
        write_png(out, x)
        if kernel_out is not None:
            kernels.write_kernel(kernel_out, k)
        if trace_path is not None and state is not None:
            write_text_atomic(trace_path, trace_csv(state))
        return rid, None
    except Exception as exc:  # reported per image, run continues
        return rid, f"{type(exc).__name__}: {exc}"


def _run_pool(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def cmd_solve(s):
    if (s["lr"] is None) == (s["manifest"] is None):
        raise UsageError("give exactly one of --lr or --manifest")
    if s["lr"] is not None:
        _require(s, "out")
        if not Path(s["lr"]).is_file():
            return _fail(f"input not found: {s['lr']}")
        tasks = [(Path(s["lr"]).stem, s["lr"], s["out"], s["kernel_out"], s["trace"], s)]
    else:
        _require(s, "out_dir")
        if not Path(s["manifest"]).is_file():
            return _fail(f"input not found: {s['manifest']}")
        out_dir = Path(s["out_dir"])
        tasks = []
        for rec in degradation.read_manifest(s["manifest"]):
            lr = degradation.resolve(s["manifest"], rec.lr_path)
            tasks.append((
                rec.id, lr, out_dir / "sr" / f"{rec.id}.png",
                out_dir / "kernels" / f"{rec.id}.txt", out_dir / "traces" / f"{rec.id}.csv", s,
            ))
    for t in tasks:
        if not Path(t[1]).is_file():
            return _fail(f"input not found: {t[1]}")
    jobs = s["jobs"] or os.cpu_count() or 1
    failed = 0
    for rid, err in _run_pool(_solve_one, tasks, jobs):
        if err is not None:
            failed += 1
            _fail(f"{rid} failed: {err}")
    print(f"solved {len(tasks) - failed}/{len(tasks)} images")
    return EXIT_RUNTIME if failed else EXIT_OK


def _load_labeled(manifest, use_kernels):
    items = []
    for rec in degradation.read_manifest(manifest):
        y = read_png(degradation.resolve(manifest, rec.lr_path))
        if rec.hr_path is None:
            continue
        x = read_png(degradation.resolve(manifest, rec.hr_path))
        if use_kernels and rec.kernel_path is not None:
            items.append((x, y, kernels.read_kernel(degradation.resolve(manifest, rec.kernel_path))))
        else:
            items.append((x, y))
    return items


def cmd_train(s):
    _require(s, "out")
    for key in ("manifest", "unlabeled"):
        if s[key] is not None and not Path(s[key]).is_file():
            return _fail(f"input not found: {s[key]}")
    if s["manifest"] is None and s["unlabeled"] is None:
        raise UsageError("give --manifest and/or --unlabeled")
    labeled = _load_labeled(s["manifest"], s["use_kernels"]) if s["manifest"] else []
    unlabeled = []
    if s["unlabeled"]:
        unlabeled = [read_png(degradation.resolve(s["unlabeled"], r.lr_path))
                     for r in degradation.read_manifest(s["unlabeled"])]
    weights = estimators.LossWeights(s["alpha_g"], s["alpha_r"])
    tcfg = estimators.TrainConfig(
        epochs=s["epochs"], batch_size=s["batch_size"], learning_rate=s["learning_rate"],
        beta1=s["beta1"], beta2=s["beta2"], seed=s["seed"], n_mc=s["n_mc"], fd_step=s["fd_step"],
    )
    prior = _prior(s)
    init = estimators.EstimatorParams.initial(prior, T=s["restorer_iters"], support=s["support"])
    eta = estimators.unsupervised_rate(len(labeled), len(unlabeled))
    print(f"N={len(labeled)} M={len(unlabeled)} eta={eta!r}")
    try:
        result = estimators.train(labeled, unlabeled, weights, tcfg, prior, _degradation(s), init)
    except estimators.TrainingDiverged as exc:
        return _fail(f"training diverged: {exc}", EXIT_DIVERGED)
    result.params.save(s["out"])
    if s["curve"] is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for epoch, value in enumerate(result.curve):
            w.writerow([epoch, repr(value)])
        write_text_atomic(s["curve"], buf.getvalue())
    print(f"final loss {result.curve[-1]!r}")
    return EXIT_OK


def evaluate_dirs(sr_dir, hr_dir, crop_border=0):
    """Return ``(rows, unmatched_ids)`` with rows ``(id, psnr_db, ssim)``."""
    sr = {p.stem: p for p in Path(sr_dir).glob("*.png")}
    hr = {p.stem: p for p in Path(hr_dir).glob("*.png")}
    rows = []
    for rid in sorted(sr.keys() & hr.keys()):
        a = imaging.rgb_to_y(read_png(sr[rid]))
        b = imaging.rgb_to_y(read_png(hr[rid]))
        rows.append((rid, imaging.psnr(a, b, crop_border), imaging.ssim(a, b, crop_border)))
    return rows, sorted(sr.keys() ^ hr.keys())


def cmd_eval(s):
    _require(s, "sr_dir", "hr_dir", "out")
    for key in ("sr_dir", "hr_dir"):
        if not Path(s[key]).is_dir():
            return _fail(f"input not found: {s[key]}")
    rows, unmatched = evaluate_dirs(s["sr_dir"], s["hr_dir"], s["crop_border"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "psnr_db", "ssim"])
    for rid, p, q in rows:
        w.writerow([rid, repr(p), repr(q)])
    write_text_atomic(s["out"], buf.getvalue())
    if unmatched:
        print("unmatched ids: " + ", ".join(unmatched), file=sys.stderr)
    if not rows:
        return _fail("no image ids in common")
    mean_p = float(np.mean([r[1] for r in rows]))
    mean_s = float(np.mean([r[2] for r in rows]))
    print(f"images={len(rows)} mean_psnr_db={mean_p:.4f} mean_ssim={mean_s:.4f}")
    return EXIT_RUNTIME if unmatched else EXIT_OK


COMMANDS = {"synth": cmd_synth, "solve": cmd_solve, "train": cmd_train, "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        settings = resolve_settings(args.command, args, args.config)
        return COMMANDS[args.command](settings)
    except (UsageError, kernels.DomainError) as exc:
        print(f"blindsr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError) as exc:
        print(f"blindsr {args.command}: invalid setting: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"blindsr {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
