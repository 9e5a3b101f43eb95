"""Command-line entry point: ``camfreepano <command> [options]``.

Every command accepts ``--config FILE`` (a JSON object whose keys are
option names, with dashes or underscores), ``--seed`` and ``--out``;
explicit flags override the file.  The fully resolved options are
written to ``<out>/config.resolved.json``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import estimator as est
from .dataset import load_manifest, warp_seed, write_dataset
from .geometry import CameraParams, canonical_params, homography_from_params
from .pano import PanoLayout, build_correspondence, equirect_to_views, save_cmap, views_to_equirect
from .raster import ImageRaster, psnr, read_png, unwarp_to_canonical, write_mask_png, write_png
from .synth import room_panorama
from .verify import SUITES

log = logging.getLogger("camfreepano")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

SWEEP_ERRORS_DEG = (0.0, 0.5, 1.0, 2.0, 4.0, 8.0)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="camfreepano", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-dataset", help="random-warp views of panoramas into a training set")
    _common(p)
    p.add_argument("--src", help="directory of 2:1 equirect PNGs or square view PNGs")
    p.add_argument("--synthetic", type=int, default=0, help="render this many procedural rooms instead")
    p.add_argument("--n-per-pano", type=int, default=1, help="warps per view")
    p.add_argument("--view-size", type=int, default=512)

    p = sub.add_parser("train", help="train the camera estimator")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--objective", choices=est.OBJECTIVES, default=est.CE)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--val-fraction", type=float, default=0.1)

    p = sub.add_parser("eval", help="MAE report for one or more models")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", action="append", required=True)

    p = sub.add_parser("unwarp", help="rectify an input view (or feature grid) to the canonical view")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image")
    src.add_argument("--features", help=".npy H x W x C feature grid")
    p.add_argument("--params")
    p.add_argument("--model")
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--reference", help="canonical PNG to score the rectification against")
    p.add_argument("--sweep", action="store_true", help="also write PSNR vs injected parameter error")

    p = sub.add_parser("correspondences", help="input -> canonical-view correspondence maps")
    _common(p)
    p.add_argument("--params")
    p.add_argument("--model")
    p.add_argument("--image", help="input image (needed with --model)")
    p.add_argument("--view-size", type=int, default=512)

    p = sub.add_parser("slice", help="equirect panorama -> 8 perspective views")
    _common(p)
    p.add_argument("--pano", required=True)
    p.add_argument("--view-size", type=int, default=512)

    p = sub.add_parser("stitch", help="8 perspective views -> equirect panorama")
    _common(p)
    p.add_argument("--views", required=True, help="directory with view_0.png .. view_7.png")
    p.add_argument("--height", type=int)

    p = sub.add_parser("caa-check", help="attention oracle and gradient checks")
    _common(p)
    p.add_argument("--grad-seeds", type=int, default=20)

    p = sub.add_parser("verify", help="run an invariant suite")
    _common(p)
    p.add_argument("--suite", required=True)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: List[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config = pre.parse_known_args(argv)[0].config
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subparsers), None)
    if not config or command is None:
        return parser.parse_args(argv)
    try:
        with open(config) as fh:
            values = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {config}: {exc}") from exc
    if not isinstance(values, dict):
        raise UsageError("config file must hold a JSON object")
    sub = subparsers[command]
    known = {a.dest for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest == "command":
            # resolved-config echoes name their command
            if value != command:
                raise UsageError(f"config is for {value!r}, not {command}")
            continue
        if dest not in known or dest == "config":
            raise UsageError(f"unknown config key {key!r} for {command}")
        defaults[dest] = value
    sub.set_defaults(**defaults)
    # required options satisfied by the config file
    for action in sub._actions:
        if action.required and action.dest in defaults:
            action.required = False
    return parser.parse_args(argv)


def _write_resolved(args: argparse.Namespace, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("config", "verbose")}
    (out / "config.resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _load_params_or_predict(args, image: Optional[ImageRaster]) -> CameraParams:
    if args.params:
        try:
            return CameraParams.load(args.params)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot read params {args.params}: {exc}") from exc
    if args.model:
        if image is None:
            raise UsageError("--model needs an input image")
        model = _load_model(args.model)
        try:
            pred = est.predict(model, image)
        except est.EstimatorError as exc:
            raise DataError(str(exc)) from exc
        return pred.params(image.width, image.height)
    raise UsageError("either --params or --model is required")


def _load_model(path) -> est.EstimatorModel:
    try:
        return est.load_model(path)
    except (OSError, est.EstimatorError) as exc:
        raise DataError(f"cannot load model {path}: {exc}") from exc


def _load_dataset(path):
    try:
        data = load_manifest(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not data:
        raise DataError(f"manifest {path} is empty")
    return data


# ---------------------------------------------------------------------------
# commands

def cmd_gen_dataset(args) -> int:
    out = Path(args.out)
    layout = PanoLayout(view_size=args.view_size)
    if args.synthetic:
        sources = ((f"room{i:04d}", room_panorama(2 * args.view_size, warp_seed(args.seed, 0x5EED, i)))
                   for i in range(args.synthetic))
    elif args.src:
        paths = sorted(Path(args.src).glob("*.png"))
        if not paths:
            raise DataError(f"no PNG files in {args.src}")

        def sources_from_dir():
            for path in paths:
                try:
                    yield path.stem, read_png(path)
                except OSError as exc:
                    log.warning("unreadable %s: %s", path, exc)
        sources = sources_from_dir()
    else:
        raise UsageError("gen-dataset needs --src or --synthetic")
    manifest, errors = write_dataset(out, sources, args.n_per_pano, args.seed, layout)
    for e in errors:
        print(f"skipped {e}", file=sys.stderr)
    n = sum(1 for _ in open(manifest))
    print(f"wrote {n} samples to {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    data = _load_dataset(args.manifest)
    size = data[0][0].width
    n_val = int(round(len(data) * args.val_fraction)) if len(data) > 1 else 0
    order = np.random.default_rng(args.seed).permutation(len(data))
    val = [data[i] for i in order[:n_val]]
    trn = [data[i] for i in order[n_val:]]
    cfg = est.TrainConfig(objective=args.objective, epochs=args.epochs, learning_rate=args.lr,
                          batch_size=args.batch_size, seed=args.seed, optimizer=args.optimizer,
                          image_size=size)
    history: list = []
    try:
        model = est.train(trn, cfg, val=val or None, history=history)
    except est.EstimatorError as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    est.save_model(model, out / f"model_{args.objective}.cfde")
    with open(out / f"train_log_{args.objective}.jsonl", "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")
    print(f"saved {out / f'model_{args.objective}.cfde'}")
    return EXIT_OK


def evaluate_models(models, data, out: Path) -> dict:
    """Score each model on ``data``; write per-sample CSVs and return the report dict."""
    rows = []
    truth = np.array([[p.fov_deg, p.phi_deg, p.psi_deg] for _, p in data])
    feature_cache = {}
    for name, model in models:
        key = (model.image_size, model.extractor.seed)
        if key not in feature_cache:
            feature_cache[key] = model.extractor([img for img, _ in data])
        pred, _ = est.predict_features(model, feature_cache[key])
        err = np.abs(pred - truth)
        rows.append({"model": name, "objective": model.objective, "n": len(data),
                     "mae_fov": float(err[:, 0].mean()), "mae_phi": float(err[:, 1].mean()),
                     "mae_psi": float(err[:, 2].mean())})
        with open(out / f"errors_{Path(name).stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "fov_true", "phi_true", "psi_true", "fov_pred", "phi_pred", "psi_pred",
                        "err_fov", "err_phi", "err_psi"])
            for i in range(len(data)):
                w.writerow([i, *truth[i].tolist(), *pred[i].tolist(), *err[i].tolist()])
    report = {"rows": rows,
              "reference_mae": {k: dict(zip(("fov", "phi", "psi"), v))
                                      for k, v in est.REFERENCE_MAE.items()}}
    if len(rows) == 1:
        report.update({k: rows[0][k] for k in ("mae_fov", "mae_phi", "mae_psi", "objective", "n")})
    return report


def cmd_eval(args) -> int:
    data = _load_dataset(args.manifest)
    models = [(m, _load_model(m)) for m in args.model]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_models(models, data, out)
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    for r in report["rows"]:
        print(f"{r['objective']:>4}  fov {r['mae_fov']:.2f}  phi {r['mae_phi']:.2f}  psi {r['mae_psi']:.2f}  "
              f"(n={r['n']}, {r['model']})")
    return EXIT_OK


def _perturbed(params: CameraParams, which: str, delta: float) -> CameraParams:
    fov, phi, psi = params.fov_deg, params.phi_deg, params.psi_deg
    if which == "fov":
        fov = min(max(fov + delta, 1.0), 179.0)
    elif which == "phi":
        phi += delta
    else:
        psi += delta
    return CameraParams(fov, phi, psi, params.width, params.height)


def cmd_unwarp(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.image:
        try:
            img = read_png(args.image)
        except OSError as exc:
            raise DataError(f"cannot read {args.image}: {exc}") from exc
    else:
        try:
            grid = np.load(args.features)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read {args.features}: {exc}") from exc
        img = ImageRaster(grid)
    params = _load_params_or_predict(args, img if args.image else None)
    if (params.width, params.height) != (img.width, img.height):
        params = CameraParams(params.fov_deg, params.phi_deg, params.psi_deg, img.width, img.height)
    rect = unwarp_to_canonical(img, params, args.size)
    inpaint = ~rect.mask
    if args.image:
        write_png(rect, out / "unwarped.png")
    else:
        np.save(out / "unwarped.npy", rect.data)
    write_mask_png(inpaint, out / "inpaint_mask.png")
    summary = {"params": json.loads(params.to_json()), "valid_fraction": float(rect.mask.mean()),
               "homography": homography_from_params(params, canonical_params(args.size)).to_list()}
    reference = None
    if args.reference:
        reference = read_png(args.reference)
        summary["psnr_vs_reference"] = psnr(rect, reference)
    if args.sweep:
        baseline = reference or rect
        with open(out / "error_sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "error_deg", "psnr_db", "valid_fraction"])
            for which in ("fov", "phi", "psi"):
                for delta in SWEEP_ERRORS_DEG:
                    r = unwarp_to_canonical(img, _perturbed(params, which, delta), args.size)
                    try:
                        value = psnr(r, baseline)
                    except ValueError:
                        value = float("nan")
                    w.writerow([which, delta, value, float(r.mask.mean())])
    (out / "unwarp.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_correspondences(args) -> int:
    image = None
    if args.image:
        try:
            image = read_png(args.image)
        except OSError as exc:
            raise DataError(f"cannot read {args.image}: {exc}") from exc
    params = _load_params_or_predict(args, image)
    layout = PanoLayout(view_size=args.view_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    coverage = {}
    for view in range(layout.num_views):
        cmap = build_correspondence(params, view, layout)
        save_cmap(cmap, out / f"view_{view}.cmap")
        coverage[str(view)] = {"visible_fraction": cmap.visible_fraction,
                               "column_coverage": cmap.column_coverage}
    (out / "coverage.json").write_text(json.dumps(coverage, indent=2) + "\n")
    print(json.dumps({k: round(v["visible_fraction"], 4) for k, v in coverage.items()}))
    return EXIT_OK


def cmd_slice(args) -> int:
    try:
        pano = read_png(args.pano)
    except OSError as exc:
        raise DataError(f"cannot read {args.pano}: {exc}") from exc
    try:
        views = equirect_to_views(pano, PanoLayout(view_size=args.view_size))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out)
    for i, v in enumerate(views):
        write_png(v, out / f"view_{i}.png")
    print(f"wrote {len(views)} views to {out}")
    return EXIT_OK


def cmd_stitch(args) -> int:
    src = Path(args.views)
    try:
        views = [read_png(src / f"view_{i}.png") for i in range(8)]
    except OSError as exc:
        raise DataError(f"cannot read views from {src}: {exc}") from exc
    size = views[0].width
    pano = views_to_equirect(views, PanoLayout(view_size=size), args.height)
    write_png(pano, Path(args.out) / "pano.png")
    write_mask_png(pano.mask, Path(args.out) / "pano_valid.png")
    print(f"wrote {Path(args.out) / 'pano.png'} ({pano.width}x{pano.height})")
    return EXIT_OK


def _report_checks(checks, out: Path, name: str) -> int:
    for c in checks:
        print(c.line())
    ok = all(c.passed for c in checks)
    report = {"suite": name, "passed": ok,
              "checks": [{"name": c.name, "observed": c.observed, "tolerance": c.tolerance,
                          "kind": c.kind, "passed": c.passed} for c in checks]}
    (out / f"verify_{name}.json").write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_caa_check(args) -> int:
    out = Path(args.out)
    return _report_checks(SUITES["caa"](args.seed, args.grad_seeds), out, "caa")


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    for n in names:
        if n not in SUITES:
            raise UsageError(f"unknown suite {n!r}; choose from {', '.join(SUITES)} or all")
    code = EXIT_OK
    for n in names:
        print(f"== {n}")
        code = max(code, _report_checks(SUITES[n](args.seed), Path(args.out), n))
    return code


COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "unwarp": cmd_unwarp,
    "correspondences": cmd_correspondences,
    "slice": cmd_slice,
    "stitch": cmd_stitch,
    "caa-check": cmd_caa_check,
    "verify": cmd_verify,
}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        print(f"camfreepano: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify" and args.suite != "all" and args.suite not in SUITES:
            raise UsageError(f"unknown suite {args.suite!r}; choose from {', '.join(SUITES)} or all")
        _write_resolved(args, Path(args.out))
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"camfreepano: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"camfreepano: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
