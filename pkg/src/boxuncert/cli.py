"""Subcommand front-end: synth -> decode -> match -> calibrate -> evaluate
-> correlate -> bench.

Every subcommand is deterministic given its flags and seeds, writes its
artifacts under --out, and exits non-zero with a single-line diagnostic on
contract violations. Report-producing subcommands render matplotlib
figures next to their delimited outputs.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import anchors as anchors_mod
from . import calibration, dataio, metrics, synth
from .errors import BoxUncertError, ConfigError, FormatError
from .matching import Detection, match_by_mse

_SCHEME_FLAGS = {
    "ir": "ir",
    "ir-pco": "ir_pco",
    "ir-cl": "ir_cl",
    "ir-pco-cl": "ir_pco_cl",
    "fs": "fs",
}
_MODE_FLAGS = {"abs": "absolute", "rel": "relative"}
_BY_FLAGS = {
    "area": "area",
    "occlusion": "occlusion",
    "quality": "quality",
    "iou": "iou",
    "rmse": "rmse_per_obj",
}


def _out_dir(arg: str) -> Path:
    path = Path(arg)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synth

def _cmd_synth(args) -> int:
    kv = dataio.read_key_value_file(args.config) if args.config else {}
    overrides = {
        "seed": args.seed,
        "n_images": args.images,
        "n_objects_per_image": args.objects,
        "k": args.k,
        "area_exponent": args.area_exponent,
        "occlusion_multiplier": args.occlusion_multiplier,
        "quality_coupling": args.quality_coupling,
        "surplus_rate": args.surplus_rate,
        "missed_rate": args.missed_rate,
        "base_sigma": args.base_sigma,
        "occlusion_probs": args.occlusion_probs,
        "class_size_ranges": args.size_range,
    }
    for key, value in overrides.items():
        if value is not None:
            kv[key] = value
    if args.image_size is not None:
        h, _, w = args.image_size.partition("x")
        kv["image_height"], kv["image_width"] = h, w
    config = synth.SynthConfig.from_mapping(kv)
    scenario = synth.generate(config)
    out = _out_dir(args.out)
    dataio.write_ground_truth(out / "gt.txt", scenario.ground_truths)
    dataio.write_detections(out / "detections.txt", scenario.detections)
    dataio.write_sigma_true(out / "sigma_true.txt", scenario.sigma_true)
    print(
        f"synth: {len(scenario.ground_truths)} ground truths, "
        f"{len(scenario.detections)} detections -> {out}"
    )
    return 0


# ---------------------------------------------------------------------------
# decode

def _cmd_decode(args) -> int:
    variant = anchors_mod.parse_variant(args.variant, seed=args.seed)
    det_file = dataio.read_detections(args.infile, expect_space="anchor_relative")
    grid_cfg = anchors_mod.AnchorGridConfig.from_mapping(
        dataio.read_key_value_file(args.anchors)
    )
    grid = anchors_mod.anchors_to_array(anchors_mod.build_anchor_grid(grid_cfg))
    records = det_file.records
    if records:
        idx = np.array([r.anchor_index for r in records])
        if np.any(idx < 0) or np.any(idx >= grid.shape[0]):
            raise FormatError(
                f"anchor index out of range for a grid of {grid.shape[0]} anchors"
            )
        mus = np.stack([r.offsets.mu_array() for r in records])
        variances = np.stack([r.offsets.var_array() for r in records])
        means, sds = anchors_mod.decode_batch(
            mus, variances, grid[idx], variant, train_correction=args.train_correction
        )
    out = _out_dir(args.out)
    decoded = [
        Detection(
            image_id=r.image_id,
            class_id=r.class_id,
            box=anchors_mod.DecodedBox.from_arrays(means[i], sds[i]),
            score=r.score,
            quality=r.quality,
        )
        for i, r in enumerate(records)
    ]
    dataio.write_detections(out / "detections.txt", decoded)
    print(f"decode[{args.variant}]: {len(decoded)} detections -> {out / 'detections.txt'}")
    return 0


# ---------------------------------------------------------------------------
# match

def _cmd_match(args) -> int:
    profile = dataio.get_profile(args.profile)
    det_file = dataio.read_detections(args.detections, expect_space="image")
    gts = dataio.read_ground_truth(args.ground_truth, profile)
    result = match_by_mse(det_file.records, gts)
    out = _out_dir(args.out)
    dataio.write_pairs(out / "pairs.txt", result.pairs)
    dataio.write_detections(out / "unmatched_detections.txt", result.unmatched_detections)
    dataio.write_ground_truth(out / "unmatched_ground_truth.txt", result.unmatched_ground_truths)
    _write_json(
        out / "match_summary.json",
        {
            "pairs": len(result.pairs),
            "unmatched_detections": len(result.unmatched_detections),
            "unmatched_ground_truths": len(result.unmatched_ground_truths),
        },
    )
    print(
        f"match: {len(result.pairs)} pairs, "
        f"{len(result.unmatched_detections)} surplus detections, "
        f"{len(result.unmatched_ground_truths)} unmatched ground truths -> {out}"
    )
    return 0


# ---------------------------------------------------------------------------
# calibrate

def _cmd_calibrate(args) -> int:
    pairs = dataio.read_pairs(args.pairs)
    scheme = _SCHEME_FLAGS[args.scheme]
    mode = _MODE_FLAGS[args.mode]
    if scheme == "fs":
        model = calibration.fit_factor(
            pairs,
            loss=args.loss,
            mode=mode,
            epochs=args.epochs,
            lr=args.lr,
            target_scale=args.target_scale,
        )
    else:
        model = calibration.fit_isotonic(
            pairs, scheme=scheme, mode=mode, target_scale=args.target_scale
        )
    out = _out_dir(args.out)
    dataio.write_calibration_model(out / "model.txt", model)
    summary = {
        "scheme": scheme,
        "mode": mode,
        "target_scale": model.target_scale,
        "n_pairs": len(pairs),
    }
    if scheme == "fs":
        summary["loss"] = args.loss
        summary["factor"] = model.factor
    else:
        summary["n_maps"] = len(model.maps)
        summary["fallback_groups"] = [
            f"{c if c else '*'}:{k if k is not None else '*'}"
            for c, k in model.fallback_groups
        ]
    _write_json(out / "calibrate_summary.json", summary)
    print(f"calibrate[{args.scheme}/{args.mode}]: model -> {out / 'model.txt'}")
    return 0


# ---------------------------------------------------------------------------
# evaluate

def _cmd_evaluate(args) -> int:
    from .plots import save_md_cd_plot, save_reliability_diagram

    pairs = dataio.read_pairs(args.pairs)
    out = _out_dir(args.out)
    report = metrics.compute_report(pairs, ece_levels=args.levels)
    payload = {"uncalibrated": report.to_dict()}
    curves = {"uncalibrated": pairs}
    text = metrics.report_to_text(report, title="uncalibrated")

    if args.model:
        model = dataio.read_calibration_model(args.model)
        cal_pairs = calibration.calibrate_pairs(
            model, pairs, class_source=args.class_source.replace("-", "_")
        )
        cal_report = metrics.compute_report(cal_pairs, ece_levels=args.levels)
        payload["calibrated"] = cal_report.to_dict()
        payload["ece_ratio"] = (
            report.ece / cal_report.ece if cal_report.ece > 0 else float("inf")
        )
        curves["calibrated"] = cal_pairs
        text += metrics.report_to_text(cal_report, title="calibrated")
        pairs_for_mdcd = cal_pairs
    else:
        pairs_for_mdcd = pairs

    if args.md_cd_thresholds:
        thresholds = [float(v) for v in args.md_cd_thresholds.split(",")]
        rows = metrics.md_cd_uncertainty(pairs_for_mdcd, thresholds)
        payload["md_cd"] = rows
        csv_lines = ["threshold,md_count,md_mean,md_sd,cd_count,cd_mean,cd_sd"]
        for r in rows:
            csv_lines.append(
                ",".join(
                    "" if r[k] is None else repr(r[k])
                    for k in ("threshold", "md_count", "md_mean", "md_sd",
                              "cd_count", "cd_mean", "cd_sd")
                )
            )
        (out / "md_cd.csv").write_text("\n".join(csv_lines) + "\n")
        save_md_cd_plot(out / "md_cd.png", rows)

    _write_json(out / "report.json", payload)
    (out / "report.txt").write_text(text)
    save_reliability_diagram(out / "reliability.png", curves, levels=args.levels)
    line = f"evaluate: ece={report.ece:.4f}"
    if "calibrated" in payload:
        line += f" calibrated_ece={payload['calibrated']['ece']:.4f}"
        line += f" ratio={payload['ece_ratio']:.2f}"
    print(line + f" -> {out}")
    return 0


# ---------------------------------------------------------------------------
# correlate

def _cmd_correlate(args) -> int:
    from .plots import save_correlation_plot

    pairs = dataio.read_pairs(args.pairs)
    if args.model:
        model = dataio.read_calibration_model(args.model)
        pairs = calibration.calibrate_pairs(
            model, pairs, class_source=args.class_source.replace("-", "_")
        )
    conditioning = _BY_FLAGS[args.by]
    binned = metrics.correlate(pairs, conditioning, bins=args.bins)
    out = _out_dir(args.out)
    stem = f"correlation_{args.by}"
    (out / f"{stem}.csv").write_text(binned.to_csv())
    _write_json(out / f"{stem}.json", binned.to_dict())
    width = 12
    lines = [
        f"# sigma_obj vs {conditioning} ({len(binned.centers)} bins)",
        f"{'bin_center':>{width}} {'count':>7} {'mean':>{width}} "
        f"{'sd':>{width}} {'normalized':>{width}}",
    ]
    for c, n, m, s, nm in zip(
        binned.centers, binned.counts, binned.means, binned.sds, binned.normalized_means
    ):
        lines.append(f"{c:>{width}.4f} {n:>7d} {m:>{width}.6f} {s:>{width}.6f} {nm:>{width}.6f}")
    (out / f"{stem}.txt").write_text("\n".join(lines) + "\n")
    save_correlation_plot(out / f"{stem}.png", binned)
    print(f"correlate[{args.by}]: {len(binned.centers)} bins -> {out / (stem + '.csv')}")
    return 0


# ---------------------------------------------------------------------------
# bench

def _bench_workload(batch: int, seed: int):
    rng = np.random.default_rng(seed)
    mus = np.empty((batch, 4))
    mus[:, :2] = rng.uniform(-1.0, 1.0, size=(batch, 2))
    mus[:, 2:] = rng.uniform(-0.5, 0.5, size=(batch, 2))
    variances = rng.uniform(0.001, 0.5, size=(batch, 4))
    anchors = np.empty((batch, 4))
    anchors[:, 0] = rng.uniform(0.0, 512.0, size=batch)
    anchors[:, 1] = rng.uniform(0.0, 1024.0, size=batch)
    anchors[:, 2:] = rng.uniform(8.0, 512.0, size=(batch, 2))
    return mus, variances, anchors


def _cmd_bench(args) -> int:
    from .plots import save_bench_plot

    variant_specs = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variant_specs:
        raise ConfigError("bench needs at least one variant")
    mus, variances, anchor_arr = _bench_workload(args.batch, args.seed)
    results = {}
    for spec in variant_specs:
        variant = anchors_mod.parse_variant(spec, seed=args.seed)
        times = []
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            anchors_mod.decode_batch(mus, variances, anchor_arr, variant)
            times.append(time.perf_counter() - t0)
        median = statistics.median(times)
        results[spec] = {
            "times_s": times,
            "median_s": median,
            "median_s_per_1e5": median * (1e5 / args.batch),
        }
    out = _out_dir(args.out)
    payload = {
        "batch": args.batch,
        "repeat": args.repeat,
        "seed": args.seed,
        "variants": results,
    }
    _write_json(out / "bench.json", payload)
    name_w = max(len(s) for s in results)
    lines = [f"# decode wall time, batch={args.batch}, median of {args.repeat} repeats"]
    for spec, r in results.items():
        lines.append(f"{spec:<{name_w}}  {r['median_s_per_1e5']:.4f} s / 1e5 decodes")
    (out / "bench.txt").write_text("\n".join(lines) + "\n")
    save_bench_plot(
        out / "bench.png", {s: r["median_s_per_1e5"] for s, r in results.items()}
    )
    print("; ".join(f"{s}: {r['median_s_per_1e5']:.4f}s/1e5" for s, r in results.items()))
    return 0


# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boxuncert",
        description="Propagate, calibrate, and evaluate box localization uncertainty.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic detection scenario")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value config file (field names as keys)")
    p.add_argument("--seed", type=int)
    p.add_argument("--images", type=int)
    p.add_argument("--objects", type=int)
    p.add_argument("--image-size", help="HxW, e.g. 512x1024")
    p.add_argument("--k", type=float, help="reported sigma = sigma_true / k")
    p.add_argument("--base-sigma")
    p.add_argument("--size-range", help="lo:hi object size range (single class)")
    p.add_argument("--area-exponent", type=float)
    p.add_argument("--occlusion-multiplier", type=float)
    p.add_argument("--occlusion-probs")
    p.add_argument("--quality-coupling", type=float)
    p.add_argument("--surplus-rate", type=float)
    p.add_argument("--missed-rate", type=float)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("decode", help="decode anchor-relative offset distributions")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--anchors", required=True, help="anchor grid key=value config")
    p.add_argument("--variant", required=True,
                   help="baseline | lnorm | chain | samp:K | falsedec")
    p.add_argument("--train-correction", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("match", help="allocate detections to ground truth by MSE")
    p.add_argument("--detections", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--profile", default="kitti", choices=sorted(dataio._PROFILES))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("calibrate", help="fit a calibration model on matched pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--scheme", required=True, choices=sorted(_SCHEME_FLAGS))
    p.add_argument("--mode", default="abs", choices=sorted(_MODE_FLAGS))
    p.add_argument("--loss", default="rmsue", choices=sorted(calibration.FS_LOSSES))
    p.add_argument("--target-scale", type=float,
                   default=calibration.GAUSSIAN_TARGET_SCALE,
                   help="residual target multiplier (1.0 = raw residuals)")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("evaluate", help="metric report for matched pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--model", help="apply this calibration model before reporting")
    p.add_argument("--class-source", default="ground-truth",
                   choices=("ground-truth", "predicted"))
    p.add_argument("--levels", type=int, default=10)
    p.add_argument("--md-cd-thresholds",
                   help="comma-separated IoU thresholds for the MD/CD table")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("correlate", help="binned sigma_obj correlation report")
    p.add_argument("--pairs", required=True)
    p.add_argument("--by", required=True, choices=sorted(_BY_FLAGS))
    p.add_argument("--bins", type=int, default=5)
    p.add_argument("--model", help="apply this calibration model first")
    p.add_argument("--class-source", default="ground-truth",
                   choices=("ground-truth", "predicted"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_correlate)

    p = sub.add_parser("bench", help="time the decode variants")
    p.add_argument("--variants", required=True, help="comma list, e.g. lnorm,samp:1000")
    p.add_argument("--batch", type=int, default=100_000)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench)

    return parser


def run(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BoxUncertError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: missing input file: {e.filename}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
