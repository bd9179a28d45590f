"""Command-line surface: synthesize, train, segment, evaluate, cross-validate.

Every command reads an optional key=value config file plus flag overrides,
writes its effective configuration next to its outputs, exits 0 on success
and prints a single machine-parsable ``ERROR: ...`` line on failure.
Reports and segmentations contain no timestamps, so identical seeds and
configs reproduce them bit-for-bit; wall-clock timing lives only in the
optional trace/log files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as lio
from .appearance import fit_appearance_set, fit_projector
from .config import RunConfig, dump_config, inference_settings, load_config
from .geometry import BoundaryField
from .inference import segment as run_segment
from .metrics import aggregate_reports, cross_validate, unsigned_error
from .shape import fit_ppca
from .synth import SynthConfig, generate_dataset

CSV_FMT = "%.17g"


def _load_run_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    return config.with_overrides(**overrides)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_effective_config(out: Path, config) -> None:
    (out / "effective_config.cfg").write_text(dump_config(config))


def _load_dataset(data_dir):
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    scans, truths = [], []
    for name in manifest["files"]:
        scan, truth = lio.load_scan(data_dir / name)
        if truth is None:
            raise ValueError(f"{name}: scan file carries no ground truth")
        scans.append(scan)
        truths.append(truth)
    return scans, truths, manifest


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _report_text(report) -> str:
    lines = ["boundary  error_px     error_um"]
    for k, (px, um) in enumerate(
        zip(report.per_boundary_px, report.per_boundary_um), start=1
    ):
        lines.append(f"{k:>8d}  {px:>11.6f}  {um:>11.6f}")
    lines.append(
        f"mean      {report.mean_px:>11.6f}  {report.mean_um:>11.6f}  "
        f"(sd {report.sd_um:.6f} um over {report.n_scans} scans)"
    )
    if report.per_region_um.size:
        regions = "  ".join(f"{v:.6f}" for v in report.per_region_um)
        lines.append(f"per-region um: {regions}")
    return "\n".join(lines) + "\n"


def _write_report(out: Path, report) -> None:
    (out / "report.txt").write_text(_report_text(report))
    with open(out / "report.json", "w") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    synth_cfg = (
        load_config(args.config, SynthConfig) if args.config else SynthConfig()
    )
    if args.seed is not None:
        from dataclasses import replace

        synth_cfg = replace(synth_cfg, seed=args.seed)
    prior = lio.load_shape_prior(_require_file(args.prior, "prior model")) if args.prior else None
    out = _out_dir(args)
    manifest = generate_dataset(synth_cfg, args.n_scans, out, prior=prior)
    (out / "effective_config.cfg").write_text(dump_config(synth_cfg))
    print(f"wrote {manifest['n_scans']} scans to {out}")
    return 0


def cmd_train_shape(args) -> int:
    config = _load_run_config(args)
    _, truths, _ = _load_dataset(args.data)
    prior = fit_ppca(
        truths, q_ppca=config.q_ppca, variance_inflation=config.variance_inflation
    )
    out = _out_dir(args)
    lio.save_shape_prior(prior, out / "shape_model.lsm")
    _write_effective_config(out, config)
    print(
        f"shape prior: dim={prior.gaussian.dim} rank={prior.gaussian.rank} "
        f"sigma2={prior.gaussian.noise_variance:.6g} -> {out / 'shape_model.lsm'}"
    )
    return 0


def cmd_train_appearance(args) -> int:
    config = _load_run_config(args)
    scans, truths, _ = _load_dataset(args.data)
    projector = fit_projector(
        scans,
        n_samples=config.projector_samples,
        patch_size=config.patch_size,
        q_pca=config.q_pca,
        rng_seed=config.seed,
    )
    models = fit_appearance_set(
        scans,
        truths,
        projector,
        shared=config.shared_appearance,
        alpha_glasso=config.alpha_glasso,
        patches_per_class=config.patches_per_class,
        beta_layer=config.beta_layer,
        beta_transition=config.beta_transition,
        mode=config.appearance_mode,
        rng_seed=config.seed,
        glasso_tol=config.glasso_tol,
        glasso_max_iter=config.glasso_max_iter,
    )
    out = _out_dir(args)
    lio.save_appearance(models, out / "appearance_model.lsm")
    _write_effective_config(out, config)
    print(
        f"appearance: {len(models.models)} model(s), "
        f"{models.models[0].n_classes} classes -> {out / 'appearance_model.lsm'}"
    )
    return 0


def cmd_segment(args) -> int:
    config = _load_run_config(args)
    scan, _ = lio.load_scan(_require_file(args.scan, "scan file"))
    prior = lio.load_shape_prior(_require_file(args.shape_model, "shape model"))
    appearance = lio.load_appearance(
        _require_file(args.appearance_model, "appearance model")
    )
    settings = inference_settings(config)
    qc, qb, estimate, diag = run_segment((prior, appearance), scan, settings)
    out = _out_dir(args)
    np.savetxt(out / "est_boundaries.csv", estimate.values, fmt=CSV_FMT, delimiter=",")
    np.savetxt(out / "est_std.csv", estimate.std, fmt=CSV_FMT, delimiter=",")
    _write_effective_config(out, config)
    (out / "inference.log").write_text("\n".join(diag.log_lines()) + "\n")
    if args.trace:
        with open(out / "trace.json", "w") as fh:
            json.dump(diag.trace, fh, indent=2)
            fh.write("\n")
    print(
        f"segmented {args.scan}: {diag.n_iterations} iterations, "
        f"converged={diag.converged} -> {out / 'est_boundaries.csv'}"
    )
    return 0


def cmd_eval(args) -> int:
    config = _load_run_config(args)
    est = np.loadtxt(_require_file(args.estimate, "estimate csv"), delimiter=",", ndmin=2)
    scan, truth = lio.load_scan(_require_file(args.truth, "truth scan file"))
    if truth is None:
        raise ValueError(f"{args.truth}: scan file carries no ground truth")
    report = unsigned_error(est, truth, n_regions=config.eval_regions)
    out = _out_dir(args)
    _write_report(out, report)
    _write_effective_config(out, config)
    print(_report_text(report), end="")
    return 0


def cmd_xval(args) -> int:
    config = _load_run_config(args)
    scans, truths, _ = _load_dataset(args.data)
    settings = inference_settings(config)

    def train_fn(train_scans, train_truths):
        prior = fit_ppca(
            train_truths,
            q_ppca=min(config.q_ppca, len(train_truths) - 1),
            variance_inflation=config.variance_inflation,
        )
        projector = fit_projector(
            train_scans,
            n_samples=config.projector_samples,
            patch_size=config.patch_size,
            q_pca=config.q_pca,
            rng_seed=config.seed,
        )
        models = fit_appearance_set(
            train_scans,
            train_truths,
            projector,
            shared=config.shared_appearance,
            alpha_glasso=config.alpha_glasso,
            patches_per_class=config.patches_per_class,
            beta_layer=config.beta_layer,
            beta_transition=config.beta_transition,
            mode=config.appearance_mode,
            rng_seed=config.seed,
            glasso_tol=config.glasso_tol,
            glasso_max_iter=config.glasso_max_iter,
        )
        return prior, models

    def segment_fn(models, scan):
        _, _, estimate, _ = run_segment(models, scan, settings)
        return estimate

    aggregate, folds = cross_validate(
        scans,
        truths,
        folds=args.folds,
        train_fn=train_fn,
        segment_fn=segment_fn,
        seed=config.seed,
        n_regions=config.eval_regions,
        threads=config.threads,
    )
    out = _out_dir(args)
    _write_report(out, aggregate)
    with open(out / "folds.json", "w") as fh:
        json.dump([r.as_dict() for r in folds], fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_effective_config(out, config)
    print(_report_text(aggregate), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layerseg",
        description="Probabilistic ordered-boundary segmentation of layered images",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, trace=False):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=None)
        if trace:
            p.add_argument("--trace", action="store_true", help="write trace.json")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--n-scans", type=int, default=20)
    p.add_argument("--prior", help="optional fitted shape model to sample from")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train-shape", help="fit the shape prior from a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory with manifest.json")
    p.set_defaults(fn=cmd_train_shape)

    p = sub.add_parser("train-appearance", help="fit appearance models from a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_train_appearance)

    p = sub.add_parser("segment", help="segment one scan")
    common(p, trace=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--shape-model", required=True)
    p.add_argument("--appearance-model", required=True)
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("eval", help="compare an estimate against ground truth")
    common(p)
    p.add_argument("--estimate", required=True, help="est_boundaries.csv")
    p.add_argument("--truth", required=True, help="scan file with ground truth")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("xval", help="k-fold cross-validation on a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, required=True)
    p.set_defaults(fn=cmd_xval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # single machine-parsable failure line
        print(f"ERROR: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
