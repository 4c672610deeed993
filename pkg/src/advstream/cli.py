"""Command-line entry point.

Subcommands: bound, simulate, calibrate, detect, synth, bench. Reports go to
standard output (CSV by default, JSON with --format json); diagnostics to
standard error. Exit codes: 0 success, 1 usage error, 2 data/validation error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

from .calibration import ThresholdPolicy, roc_csv, roc_curve, select_threshold
from .classifier import ClassifierError, LinearClassifier, SidecarClassifier, load_linear_model
from .detectors import (
    DenoiseConfig,
    DetectorError,
    DivergenceConfig,
    denoise_detect,
    divergence_score,
    fit_mahalanobis,
    mahalanobis_score,
)
from .imaging import BrightnessSpec, ImageError, load_ppm
from .pipeline import (
    CalibrationProfile,
    PipelineError,
    SynthSpec,
    generate_synthetic,
    load_manifest,
    load_profile,
    report_csv,
    run_sequence,
    save_profile,
)
from .theory import TheoryError, bound_curve, exact_majority_accuracy, min_window_length, simulate_majority
from .timeseries import ALL, WindowState

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _open_classifier(model: str):
    if model.startswith("tcp:"):
        _, host, port = model.split(":")
        return SidecarClassifier.connect(host, int(port))
    if model.startswith("cmd:"):
        return SidecarClassifier.spawn(model[4:].split())
    return LinearClassifier(load_linear_model(model))


def _parse_window(text: str):
    if text.lower() == "all":
        return ALL
    value = int(text)
    if value < 0:
        raise DataError("window must be >= 0 or 'all'")
    return value


def _emit(args, rows, header):
    if args.format == "json":
        print(json.dumps([dict(zip(header, r)) for r in rows]))
    else:
        print(",".join(header))
        for r in rows:
            print(",".join(str(v) for v in r))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_bound(args) -> int:
    if args.grid:
        grid = [float(x) for x in args.grid.split(",")]
        sys.stdout.write(bound_curve(grid))
        return EXIT_OK
    rep = min_window_length(args.p_hat)
    exact = exact_majority_accuracy(args.p_hat, rep.min_l) if args.p_hat < 1 else 1.0
    _emit(args, [(f"{rep.p_hat:.6g}", f"{rep.raw_bound:.6g}", rep.min_l, f"{exact:.6g}")],
          ["p_hat", "raw_bound", "min_L", "exact_p"])
    return EXIT_OK


def cmd_simulate(args) -> int:
    res = simulate_majority(args.p_hat, args.window, args.trials, args.seed, args.side)
    status = "PASS" if abs(res.estimate - res.exact) <= 3 * max(
        res.half_width / 1.96, 1e-12
    ) else "FAIL"
    _emit(args, [(f"{res.estimate:.6g}", f"{res.exact:.6g}", f"{res.half_width:.6g}",
                  res.trials, status)],
          ["estimate", "exact", "ci_half_width", "trials", "status"])
    return EXIT_OK


def _frames_of(manifests):
    for path in manifests:
        manifest = load_manifest(path)
        for f in manifest.frames:
            if f.present:
                yield load_ppm(f.path)


def cmd_calibrate(args) -> int:
    if not args.clean or not args.adv:
        raise DataError("need at least one clean and one adversarial manifest")
    clf = _open_classifier(args.model)
    policy = ThresholdPolicy.parse(args.policy)
    notes = {"policy": args.policy, "source_clean": args.clean, "source_adv": args.adv}
    os.makedirs(args.output, exist_ok=True)
    if args.detector == "kl":
        cfg = DivergenceConfig(
            transform=BrightnessSpec(args.brightness_mode, args.brightness_value),
            combiner=args.combiner,
        )
        score = lambda img: divergence_score(clf, img, cfg)
    elif args.detector == "md":
        # no labeled training set on the CLI path: pseudo-label clean frames
        # with the classifier's own predictions
        labeled = []
        for img in _frames_of(args.clean):
            labeled.append((img, clf.labels[clf.softmax_of(img).argmax]))
        stats = fit_mahalanobis(clf, labeled)
        cfg = stats
        score = lambda img: mahalanobis_score(clf, stats, img)
    else:
        cfg = DenoiseConfig()
        score = lambda img: float(denoise_detect(clf, img, cfg)[0])
    clean_scores = [score(img) for img in _frames_of(args.clean)]
    adv_scores = [score(img) for img in _frames_of(args.adv)]
    curve = roc_curve(clean_scores, adv_scores)
    chosen = select_threshold(curve, policy)
    if args.detector == "kl":
        cfg = DivergenceConfig(cfg.transform, cfg.combiner, max(chosen.threshold, 0.0)
                               if math.isfinite(chosen.threshold) else 0.0)
    threshold = None if args.detector == "ed" else (
        chosen.threshold if math.isfinite(chosen.threshold) else 0.0
    )
    profile = CalibrationProfile(args.detector, cfg, threshold, clf.fingerprint(), notes)
    profile_path = os.path.join(args.output, "profile.json")
    save_profile(profile, profile_path)
    with open(os.path.join(args.output, "roc.csv"), "w", encoding="utf-8") as fh:
        fh.write(roc_csv(curve))
    print(f"profile: {profile_path}", file=sys.stderr)
    _emit(args, [(f"{curve.auroc:.6g}", f"{chosen.threshold:.6g}",
                  f"{chosen.tpr:.6g}", f"{chosen.fpr:.6g}", int(chosen.feasible))],
          ["auroc", "threshold", "tpr", "fpr", "feasible"])
    return EXIT_OK


def cmd_detect(args) -> int:
    profile = load_profile(args.profile)
    clf = _open_classifier(args.model)
    manifest = load_manifest(args.manifest)
    report = run_sequence(manifest, profile, clf, _parse_window(args.window))
    sys.stdout.write(report_csv(report))
    return EXIT_OK


def cmd_synth(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        spec = SynthSpec.from_json(json.load(fh))
    clean, adv = generate_synthetic(spec, args.seed, args.output)
    print(f"clean: {len(clean.frames)} frames, adversarial: {len(adv.frames)} frames",
          file=sys.stderr)
    return EXIT_OK


def _percentiles(samples):
    ordered = sorted(samples)
    p50 = ordered[len(ordered) // 2]
    p95 = ordered[min(len(ordered) - 1, int(len(ordered) * 0.95))]
    return p50, p95


def cmd_bench(args) -> int:
    if args.iters < 1:
        raise UsageError("--iters must be >= 1")
    clf = _open_classifier(args.model)
    img = load_ppm(args.image)
    cfg = DivergenceConfig()
    if args.detector == "kl":
        work = lambda: divergence_score(clf, img, cfg)
    elif args.detector == "ed":
        ed_cfg = DenoiseConfig()
        work = lambda: denoise_detect(clf, img, ed_cfg)
    else:
        raise DataError("bench supports detectors kl and ed")
    samples = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        work()
        samples.append(time.perf_counter() - t0)
    det_p50, det_p95 = _percentiles(samples)
    state = WindowState(capacity=10)
    votes = []
    for i in range(args.iters):
        t0 = time.perf_counter()
        state, _ = state.step(i % 2)
        votes.append(time.perf_counter() - t0)
    vote_p50, vote_p95 = _percentiles(votes)
    _emit(args, [
        ("detect", f"{det_p50 * 1e3:.4g}", f"{det_p95 * 1e3:.4g}"),
        ("vote_step", f"{vote_p50 * 1e3:.4g}", f"{vote_p95 * 1e3:.4g}"),
    ], ["stage", "p50_ms", "p95_ms"])
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="advstream", description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--output", default=".")
    parser.add_argument("--format", choices=["csv", "json"], default="csv")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bound", help="window-length bound for a given per-frame accuracy")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--p-hat", type=float)
    g.add_argument("--grid")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("simulate", help="Monte-Carlo check of the voted accuracy")
    p.add_argument("--p-hat", type=float, required=True)
    p.add_argument("--window", type=int, required=True)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--side", choices=["adversarial", "clean"], default="adversarial")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="fit a detector profile from scored manifests")
    p.add_argument("--detector", choices=["kl", "md", "ed"], required=True)
    p.add_argument("--model", required=True,
                   help="linear model JSON, 'tcp:HOST:PORT', or 'cmd:...'")
    p.add_argument("--clean", nargs="+", required=True)
    p.add_argument("--adv", nargs="+", required=True)
    p.add_argument("--policy", default="youden")
    p.add_argument("--combiner", choices=["min", "max"], default="min")
    p.add_argument("--brightness-mode", choices=["set", "add"], default="set")
    p.add_argument("--brightness-value", type=int, default=200)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("detect", help="run a calibrated detector over a sequence")
    p.add_argument("--profile", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--window", default="all")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("synth", help="generate a clean/adversarial sequence pair")
    p.add_argument("--spec", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="latency percentiles for detection and voting")
    p.add_argument("--detector", choices=["kl", "ed"], default="kl")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--iters", type=int, default=100)
    p.set_defaults(func=cmd_bench)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DetectorError, TheoryError, ImageError, ClassifierError,
            PipelineError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
