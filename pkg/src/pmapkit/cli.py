"""Command line front end.

Results go to stdout or files with fixed numeric formatting; logs go to
stderr. Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import report as rpt
from .calibration import (
    coverage_histogram,
    default_temperature_grid,
    fit_temperature,
    presence_reliability,
)
from .cropgen import build_cropset
from .decoder import (
    DecodeMethod,
    argmax_decode,
    expected_oks_decode,
    fuse_double,
    udp_decode,
)
from .fitlab import FitConfig, Normalizer, fit_map
from .geometry import ActivationWindow, ImageExtent, Rect, WindowConfig, domain_vector
from .instances import KEYPOINT_NAMES, NUM_KEYPOINTS, object_scale_from_bbox
from .interop import (
    FormatError,
    GtAnnotation,
    GtDocument,
    GtImage,
    PmapFile,
    PredictionDocument,
    PredInstance,
    parse_gt,
    parse_predictions,
    read_pmap,
    serialize_gt,
    serialize_predictions,
    write_pmap,
)
from .metrics import evaluate_dataset, match_dataset, presence_sweep
from .oks import COCO_KAPPAS, KAPPA_TABLE_ENV, LossConfig, OksParams, load_kappa_table
from .probmap import ProbabilityMap, temperature_scale

log = logging.getLogger("pmapkit")

AREA_ORDER = "ABCDE"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: A003 - argparse API
        raise UsageError(message)


def _parse_aspect(text: str) -> float:
    if ":" in text:
        w, _, h = text.partition(":")
        return float(w) / float(h)
    return float(text)


def _parse_grid(text: str) -> tuple[int, int]:
    w, _, h = text.lower().partition("x")
    return int(w), int(h)


def _load_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    return values


def _resolve_settings(args) -> tuple[WindowConfig, np.ndarray]:
    """Merge defaults, config file, and flags (flags win)."""
    filecfg: dict[str, str] = {}
    if getattr(args, "config", None):
        filecfg = _load_config_file(args.config)

    aspect = None
    if getattr(args, "aspect", None) is not None:
        aspect = _parse_aspect(args.aspect)
    elif "aspect" in filecfg:
        aspect = _parse_aspect(filecfg["aspect"])

    if getattr(args, "padding", None) is not None:
        padding = args.padding
    elif "padding" in filecfg:
        padding = float(filecfg["padding"])
    else:
        padding = WindowConfig().padding

    if getattr(args, "grid", None) is not None:
        grid = _parse_grid(args.grid)
    elif "grid" in filecfg:
        grid = _parse_grid(filecfg["grid"])
    else:
        grid = (WindowConfig().grid_w, WindowConfig().grid_h)

    window_cfg = WindowConfig(aspect=aspect, padding=padding, grid_w=grid[0], grid_h=grid[1])

    kappa_path = (
        getattr(args, "kappa_table", None)
        or filecfg.get("kappa_table")
        or os.environ.get(KAPPA_TABLE_ENV)
    )
    kappas = load_kappa_table(kappa_path) if kappa_path else COCO_KAPPAS.copy()
    return window_cfg, kappas


def _read(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)


def _out_dir(args) -> Path | None:
    if getattr(args, "out_dir", None) is None:
        return None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(text: str) -> None:
    sys.stdout.write(text + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_eval(args) -> int:
    window_cfg, kappas = _resolve_settings(args)
    gt_doc = parse_gt(_read(args.gt))
    pred_doc = parse_predictions(_read(args.pred))
    gts = gt_doc.instances()
    preds = [p.to_instance() for p in pred_doc.instances]
    report = evaluate_dataset(gts, preds, kappas, metric="oks", jobs=args.jobs)

    for t, ap in zip(report.curve.thresholds, report.curve.ap_per_threshold):
        _emit(f"AP@{t:.2f} {ap:.6f}")
    _emit(f"mAP {report.curve.ap:.6f}")

    out = _out_dir(args)
    if out is not None:
        _write(out / "report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True).encode())
        rpt.write_pr_curves(report.curve, out / "pr_curves.csv", figures=not args.no_figures)
    return 0


def _presence_pairs(gts, preds, kappas, window_cfg, jobs):
    """(gt in-window flag, predicted presence score) over matched keypoints."""
    matches = match_dataset(gts, preds, kappas, metric="oks", jobs=jobs)
    flags: list[bool] = []
    scores: list[float] = []
    for image in matches:
        for entry in image.entries:
            if entry.gt is None:
                continue
            gt = entry.gt
            window = window_cfg.window_for(gt.bbox)
            labeled = gt.labeled_mask()
            for k in range(NUM_KEYPOINTS):
                if not labeled[k]:
                    continue
                if gt.presence is not None:
                    flags.append(bool(gt.presence[k] > 0.5))
                else:
                    flags.append(window.contains(gt.xy[k]))
                scores.append(
                    float(entry.pred.presence[k]) if entry.pred.presence is not None else 1.0
                )
    return np.array(flags, dtype=bool), np.array(scores, dtype=float)


def cmd_exeval(args) -> int:
    window_cfg, kappas = _resolve_settings(args)
    gt_doc = parse_gt(_read(args.gt))
    pred_doc = parse_predictions(_read(args.pred))
    gts = gt_doc.instances()
    preds = [p.to_instance() for p in pred_doc.instances]
    out = _out_dir(args)

    if args.presence_threshold is not None:
        threshold = args.presence_threshold
    else:
        flags, scores = _presence_pairs(gts, preds, kappas, window_cfg, args.jobs)
        if flags.size == 0:
            raise ValueError("no matched keypoints to sweep the presence threshold on")
        sweep = presence_sweep(flags, scores)
        threshold = sweep.optimal_threshold
        if sweep.degenerate:
            log.warning("presence sweep is degenerate: only one class observed")
        _emit(f"sweep_accuracy {sweep.optimal_accuracy:.6f}")
        if out is not None:
            rpt.write_sweep(sweep, out / "presence_sweep.csv", figures=not args.no_figures)
    _emit(f"presence_threshold {threshold:.6f}")

    report = evaluate_dataset(
        gts,
        preds,
        kappas,
        metric="ex_oks",
        window_cfg=window_cfg,
        presence_threshold=threshold,
        jobs=args.jobs,
    )
    for t, ap in zip(report.curve.thresholds, report.curve.ap_per_threshold):
        _emit(f"AP@{t:.2f} {ap:.6f}")
    _emit(f"Ex-mAP {report.curve.ap:.6f}")

    if out is not None:
        _write(out / "report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True).encode())
        rpt.write_pr_curves(report.curve, out / "pr_curves.csv", figures=not args.no_figures)
    return 0


def _decode_params(pmap_file: PmapFile, kappas, k, object_scale) -> OksParams:
    scale = object_scale if object_scale else object_scale_from_bbox(pmap_file.window_rect)
    return OksParams(scale, float(kappas[k]))


def cmd_decode(args) -> int:
    _, kappas = _resolve_settings(args)
    pmap_file = read_pmap(_read(args.pmap))
    maps = pmap_file.as_probability_maps()
    if len(maps) != NUM_KEYPOINTS:
        raise ValueError(
            f"decoding to a prediction document needs {NUM_KEYPOINTS} maps, "
            f"file has {len(maps)}"
        )

    expert_maps = None
    if args.method == "double":
        if args.expert is None:
            raise UsageError("--method double requires --expert")
        expert_file = read_pmap(_read(args.expert))
        expert_maps = expert_file.as_probability_maps()
        if len(expert_maps) != NUM_KEYPOINTS:
            raise ValueError("expert file must hold the same number of maps")

    keypoints = np.zeros((NUM_KEYPOINTS, 3))
    for k, pmap in enumerate(maps):
        params = _decode_params(pmap_file, kappas, k, args.object_scale)
        if args.method == "argmax":
            decoded = argmax_decode(pmap)
        elif args.method == "udp":
            decoded = udp_decode(pmap, blur_sigma=args.blur_sigma)
        elif args.method == "expected_oks":
            decoded = expected_oks_decode(pmap, params)
        else:
            decoded, _ = fuse_double(pmap, expert_maps[k], params)
        keypoints[k] = (decoded.x, decoded.y, min(max(decoded.score, 0.0), 1.0))

    doc = PredictionDocument(
        [
            PredInstance(
                image_id=args.image_id,
                score=args.score,
                keypoints=keypoints,
                presence=pmap_file.presence.astype(float),
            )
        ]
    )
    payload = serialize_predictions(doc)
    if args.out:
        _write(Path(args.out), payload)
    else:
        sys.stdout.buffer.write(payload + b"\n")
    return 0


def cmd_cropgen(args) -> int:
    window_cfg, _ = _resolve_settings(args)
    gt_doc = parse_gt(_read(args.gt))
    extents = gt_doc.extents()
    instances = gt_doc.instances()
    extended, crop_report = build_cropset(
        extents, instances, tuple(args.strength), args.seed, window_cfg
    )

    crops = {c.image_id: c for c in crop_report.crops}
    images_out = []
    for img in gt_doc.images:
        crop = crops[img.id]
        images_out.append(
            GtImage(img.id, int(round(crop.rect.width)), int(round(crop.rect.height)), img.extra)
        )
    extras = {ann.id: ann.extra for ann in gt_doc.annotations}
    annotations_out = []
    for ext in extended:
        inst = ext.instance
        annotations_out.append(
            GtAnnotation(
                id=inst.ann_id,
                image_id=inst.image_id,
                bbox=inst.bbox.to_xywh(),
                keypoints=inst.keypoints,
                area=inst.area,
                presence=ext.presence,
                extra=extras.get(inst.ann_id, {}),
            )
        )
    out_doc = GtDocument(images_out, annotations_out, gt_doc.extra)
    _write(Path(args.out_gt), serialize_gt(out_doc))

    manifest = Path(args.manifest)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    rpt.write_csv(
        manifest,
        ["image_id", "x0", "y0", "x1", "y1", "seed"],
        (
            (c.image_id, int(c.rect.x0), int(c.rect.y0), int(c.rect.x1), int(c.rect.y1), c.seed)
            for c in crop_report.crops
        ),
    )

    if crop_report.dropped_annotations:
        log.info(
            "dropped %d instance(s) with no keypoints in the crop: %s",
            len(crop_report.dropped_annotations),
            crop_report.dropped_annotations,
        )
    for name, value in zip(AREA_ORDER, crop_report.domain_vector):
        _emit(f"area_{name} {value:.6f}")
    return 0


def cmd_calibrate(args) -> int:
    window_cfg, kappas = _resolve_settings(args)
    gt_doc = parse_gt(_read(args.gt))
    pred_doc = parse_predictions(_read(args.pred))
    gts = gt_doc.instances()
    base = Path(args.pred).parent

    # matched predictions supply the maps; the map's own window defines cells
    inst_list = [p.to_instance() for p in pred_doc.instances]
    refs = {id(inst): p for inst, p in zip(inst_list, pred_doc.instances)}
    matches = match_dataset(gts, inst_list, kappas, metric="oks", jobs=args.jobs)

    maps = []
    cells = []
    for image in matches:
        for entry in image.entries:
            if entry.gt is None:
                continue
            pred = refs[id(entry.pred)]
            if pred.pmap is None:
                continue
            pmap_file = read_pmap(_read(str(base / pred.pmap)))
            file_maps = pmap_file.as_probability_maps()
            gt = entry.gt
            labeled = gt.labeled_mask()
            for k in range(min(NUM_KEYPOINTS, len(file_maps))):
                if not labeled[k]:
                    continue
                window = file_maps[k].window
                if not window.contains(gt.xy[k]):
                    continue
                maps.append(file_maps[k])
                cells.append(window.cell_index(gt.xy[k]))
    if not maps:
        raise ValueError("no in-window ground-truth keypoints with maps to calibrate on")

    before = coverage_histogram(maps, cells)
    grid = default_temperature_grid(args.t_min, args.t_max, args.t_count)
    fit = fit_temperature(maps, cells, grid)
    rescaled = [temperature_scale(m, fit.temperature) for m in maps]
    after = coverage_histogram(rescaled, cells)

    _emit(f"T* {fit.temperature:.6f}")
    _emit(f"objective_before {before.flatness_error():.6f}")
    _emit(f"objective_after {after.flatness_error():.6f}")
    _emit(f"keypoints {before.total}")

    out = _out_dir(args)
    if out is not None:
        figures = not args.no_figures
        rpt.write_coverage(before, out / "coverage_before.csv", figures=figures)
        rpt.write_coverage(after, out / "coverage_after.csv", figures=figures, reference=before)
        rpt.write_temperature_objective(fit, out / "temperature_objective.csv", figures=figures)
    return 0


def cmd_fit(args) -> int:
    _, kappas = _resolve_settings(args)
    grid_w, grid_h = _parse_grid(args.grid)
    window = ActivationWindow(
        Rect(0.0, 0.0, grid_w * args.cell, grid_h * args.cell), grid_w, grid_h
    )
    if args.kappa is not None:
        kappa = args.kappa
        keypoint_type = 0
    else:
        keypoint_type = KEYPOINT_NAMES.index(args.keypoint)
        kappa = float(kappas[keypoint_type])

    cfg = FitConfig(
        params=OksParams(args.object_scale, kappa),
        loss=LossConfig(alpha=args.alpha),
        window=window,
        step=args.step,
        iterations=args.iterations,
        seed=args.seed,
        normalizer=Normalizer(args.normalizer),
        keypoint_type=keypoint_type,
    )
    if args.target is not None:
        target = (args.target[0], args.target[1])
    else:
        rng = np.random.default_rng(args.seed)
        rect = window.rect
        target = (
            float(rng.uniform(rect.x0 + 0.25 * rect.width, rect.x1 - 0.25 * rect.width)),
            float(rng.uniform(rect.y0 + 0.25 * rect.height, rect.y1 - 0.25 * rect.height)),
        )

    pmap, fit_report = fit_map(target, cfg)
    _emit(f"target {target[0]:.6f} {target[1]:.6f}")
    _emit(f"final_loss {fit_report.final_loss:.6f}")
    _emit(f"decode_error_px {fit_report.decode_error_px:.6f}")
    _emit(f"support_size {fit_report.support_size}")
    _emit(f"mass_radius_px {fit_report.mass_radius_px:.6f}")
    _emit(f"entropy {fit_report.entropy:.6f}")

    out = _out_dir(args)
    if out is not None:
        rpt.write_loss_trace(
            fit_report.loss_trace, fit_report.steps, out / "loss_trace.csv",
            figures=not args.no_figures,
        )
        pmap_file = PmapFile.from_maps([pmap], np.array([1.0]))
        _write(out / "fitted.pmap", write_pmap(pmap_file))
        if not args.no_figures:
            rpt.write_map_figure(pmap, out / "fitted_map.png", target=target)
    return 0


def cmd_sweep(args) -> int:
    window_cfg, kappas = _resolve_settings(args)
    gt_doc = parse_gt(_read(args.gt))
    pred_doc = parse_predictions(_read(args.pred))
    gts = gt_doc.instances()
    preds = [p.to_instance() for p in pred_doc.instances]

    flags, scores = _presence_pairs(gts, preds, kappas, window_cfg, args.jobs)
    if flags.size == 0:
        raise ValueError("no matched keypoints to sweep on")
    rng = None
    if args.balanced:
        if args.seed is None:
            raise UsageError("--balanced subsampling requires --seed")
        rng = np.random.default_rng(args.seed)
    sweep = presence_sweep(flags, scores, balanced=args.balanced, rng=rng)
    reliability = presence_reliability(flags, scores, n_bins=args.bins)

    _emit(f"optimal_threshold {sweep.optimal_threshold:.6f}")
    _emit(f"optimal_accuracy {sweep.optimal_accuracy:.6f}")
    _emit(f"ece {reliability.ece:.6f}")
    _emit(f"n_pos {sweep.n_pos}")
    _emit(f"n_neg {sweep.n_neg}")
    if sweep.degenerate:
        log.warning("sweep is degenerate: only one class observed")

    out = _out_dir(args)
    if out is not None:
        figures = not args.no_figures
        rpt.write_sweep(sweep, out / "presence_sweep.csv", figures=figures)
        rpt.write_reliability(reliability, out / "presence_reliability.csv", figures=figures)
    return 0


def cmd_areas(args) -> int:
    window_cfg, _ = _resolve_settings(args)
    gt_doc = parse_gt(_read(args.gt))
    extents = gt_doc.extents()
    entries = []
    for ann in gt_doc.annotations:
        inst = ann.to_instance()
        if inst.num_labeled() == 0:
            continue
        window = window_cfg.window_for(inst.bbox)
        entries.append(
            (inst.xy[inst.labeled_mask()], inst.bbox, window, extents[inst.image_id])
        )
    vector = domain_vector(entries)
    for name, value in zip(AREA_ORDER, vector):
        _emit(f"area_{name} {value:.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(parser: argparse.ArgumentParser, *, windowed: bool = True) -> None:
    parser.add_argument("--config", help="key=value settings file (flags take precedence)")
    parser.add_argument("--kappa-table", help=f"per-keypoint constants file (or ${KAPPA_TABLE_ENV})")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads over images")
    parser.add_argument("--out-dir", help="directory for reports, CSVs, and figures")
    parser.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    if windowed:
        parser.add_argument("--aspect", help="window aspect W:H (default: grid ratio)")
        parser.add_argument("--padding", type=float, help="bbox padding factor (default 1.25)")
        parser.add_argument("--grid", help="map resolution WxH (default 48x64)")


def build_parser() -> _Parser:
    parser = _Parser(prog="pmapkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("eval", help="localization mAP of predictions against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("exeval", help="presence-aware Ex-mAP with a threshold sweep")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument(
        "--presence-threshold",
        type=float,
        help="binarization threshold; omitted: pick the accuracy-optimal one",
    )
    _add_common(p)
    p.set_defaults(func=cmd_exeval)

    p = sub.add_parser("decode", help="decode packed maps to a keypoint prediction")
    p.add_argument("--pmap", required=True)
    p.add_argument("--expert", help="inner-window maps for the double method")
    p.add_argument(
        "--method",
        choices=["argmax", "udp", "expected_oks", "double"],
        default="expected_oks",
    )
    p.add_argument("--image-id", type=int, default=0)
    p.add_argument("--score", type=float, default=1.0)
    p.add_argument("--object-scale", type=float, help="sqrt object area in px (default: from window)")
    p.add_argument("--blur-sigma", type=float, default=2.0)
    p.add_argument("--out", help="output JSON path (default stdout)")
    _add_common(p, windowed=False)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("cropgen", help="generate a cropped dataset and crop manifest")
    p.add_argument("--gt", required=True)
    p.add_argument("--out-gt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--strength", type=float, nargs=2, default=(0.5, 0.9),
                   metavar=("MIN", "MAX"), help="retained side fraction range")
    p.add_argument("--seed", type=int, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_cropgen)

    p = sub.add_parser("calibrate", help="fit a coverage-flattening temperature")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True, help="predictions with pmap file references")
    p.add_argument("--t-min", type=float, default=0.25)
    p.add_argument("--t-max", type=float, default=4.0)
    p.add_argument("--t-count", type=int, default=61)
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("fit", help="fit a map to a target point by gradient descent")
    p.add_argument("--target", type=float, nargs=2, metavar=("X", "Y"))
    p.add_argument("--keypoint", choices=KEYPOINT_NAMES, default="left_wrist")
    p.add_argument("--kappa", type=float, help="override the per-keypoint constant")
    p.add_argument("--object-scale", type=float, default=64.0)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--grid", default="48x64")
    p.add_argument("--cell", type=float, default=4.0, help="cell size in px")
    p.add_argument("--step", type=float, default=0.5)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--normalizer", choices=[n.value for n in Normalizer], default="sparsemax")
    p.add_argument("--seed", type=int, default=0)
    _add_common(p, windowed=False)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sweep", help="presence accuracy vs threshold curve")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--balanced", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--bins", type=int, default=10, help="reliability diagram bins")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("areas", help="five-area census of a ground-truth file")
    p.add_argument("--gt", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_areas)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except FormatError as exc:
        log.error("%s (code %s)", exc, exc.code)
        return 2
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
