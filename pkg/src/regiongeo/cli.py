"""Command line interface: ``regiongeo <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import evaluation, proposals, receptive
from .boxes import compute_adjustments, iou_matrix
from .features import ConvNet
from .pipeline import Detection, Detector, PipelineConfig, describe_regions, detect_image, run_timing
from .synthetic import benchmark_sweep, detection_benchmark, train_detector
from .tensorio import read_tensor, write_tensor
from .training import BoxRegressor, LinearScorer, train_box_regressor

log = logging.getLogger("regiongeo")


def _write(out, text: str) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def _ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()]


def load_images(directory) -> dict[str, np.ndarray]:
    """Every ``*.bin`` tensor in ``directory``, keyed by file stem."""
    files = sorted(Path(directory).glob("*.bin"))
    if not files:
        raise SystemExit(f"no *.bin image tensors in {directory}")
    return {p.stem: read_tensor(p) for p in files}


def _infer_grid(scorer: LinearScorer, net: ConvNet) -> int:
    d = net.out_channels or 1
    grid = int(round(math.sqrt(scorer.dim / d)))
    if grid * grid * d != scorer.dim:
        raise SystemExit(f"cannot infer pyramid size from scorer dim {scorer.dim} and {d} channels")
    return grid


def cmd_rfmap(args):
    arch = receptive.load_architecture(args.arch)
    m = receptive.coord_map(arch)
    print(f"rows: alpha={m.alpha_row:g} beta={m.beta_row:g}")
    print(f"cols: alpha={m.alpha_col:g} beta={m.beta_col:g}")
    print(f"receptive field size: {receptive.receptive_field_size(arch)}")


def cmd_cluster(args):
    ann = proposals.load_annotations(args.ann)
    props = proposals.kmeans_cluster_boxes(ann, args.n, seed=args.seed)
    props.save(args.out)
    log.info("wrote %d cluster proposals to %s", len(props), args.out)


def cmd_slidewin(args):
    props = proposals.sliding_window_boxes(
        min_width=args.min_width, target_count=args.target, image_shape_prior=(args.height, args.width))
    props.save(args.out)
    log.info("wrote %d sliding-window proposals to %s", len(props), args.out)


def cmd_stats(args):
    ann = proposals.load_annotations(args.ann)
    axes = tuple(args.axes.split(","))
    if len(axes) != 2:
        raise SystemExit("--axes takes exactly two statistics, e.g. s,cmag")
    _write(args.out, proposals.collect_box_statistics(ann, axes, args.bins).to_csv())


def read_pairs(path) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Pairs tensor: rows of ``[class, features..., d_x, d_y, d_w, d_h]``."""
    t = read_tensor(path)
    if t.ndim != 2 or t.shape[1] < 6:
        raise SystemExit(f"{path}: expected an (N, 1 + D + 4) tensor, got {t.shape}")
    cls = t[:, 0].astype(np.int64)
    return {int(c): (t[cls == c, 1:-4], t[cls == c, -4:]) for c in np.unique(cls)}


def write_pairs(path, pairs: dict[int, tuple[np.ndarray, np.ndarray]]) -> None:
    rows = [np.hstack([np.full((len(X), 1), c), X, Y]) for c, (X, Y) in sorted(pairs.items())]
    write_tensor(path, np.vstack(rows), "f64")


def cmd_train_regressor(args):
    reg = train_box_regressor(read_pairs(args.pairs), args.ridge, args.prune)
    reg.save(args.out)
    log.info("trained regressor for classes %s (ridge=%g)", sorted(reg.coef), reg.ridge)


def _detector(net_path, scorer_path, reg_path) -> Detector:
    net = ConvNet.load(net_path)
    scorer = LinearScorer.load(scorer_path)
    reg = BoxRegressor.load(reg_path) if reg_path else None
    return Detector(net, scorer, reg)


def cmd_detect(args):
    det = _detector(args.net, args.scorer, args.regressor)
    config = PipelineConfig(scales=_floats(args.scales), scorer=args.scorer_kind,
                            use_regression=args.regressor is not None and not args.no_regression,
                            nms_threshold=args.nms, grid=args.grid or _infer_grid(det.scorer, det.net),
                            top_k=args.top_k)
    props = proposals.ProposalSet.load(args.proposals)
    out = []
    for image_id, img in load_images(args.images).items():
        out += [d.to_json() for d in detect_image(img, config, det, props, image_id)]
    _write(args.out, json.dumps(out))
    log.info("%d detections", len(out))


def cmd_bench(args):
    cfg_path = Path(args.config)
    cfg = json.loads(cfg_path.read_text())
    base = cfg_path.parent

    def rel(key):
        return base / cfg[key] if cfg.get(key) else None

    det = _detector(rel("net"), rel("scorer"), rel("regressor"))
    config = PipelineConfig(scales=cfg.get("scales", [1.0]), scorer=cfg.get("scorer_kind", "modified-softmax"),
                            use_regression=bool(cfg.get("regressor")), nms_threshold=cfg.get("nms", 0.3),
                            grid=cfg.get("grid") or _infer_grid(det.scorer, det.net))
    images = list(load_images(rel("images")).values())
    props = proposals.ProposalSet.load(rel("proposals"))
    timing = run_timing(images, config, det, props, repeats=args.repeats, warmup=args.warmup)
    _write(args.out, timing.to_csv())


def cmd_eval(args):
    dets = [Detection.from_json(d) for d in json.loads(Path(args.dets).read_text())]
    ann = proposals.load_annotations(args.ann)
    per_class = evaluation.evaluate(dets, ann, args.iou, args.mode)
    _write(args.out, evaluation.ap_table_csv(per_class))


def cmd_sweep(args):
    try:
        rows = benchmark_sweep(_ints(args.budgets), args.methods.split(","), args.seed, args.n_test, args.min_width)
    except ValueError as exc:
        raise SystemExit(str(exc))
    _write(args.out, evaluation.sweep_csv(rows))


def cmd_demo(args):
    """Write a trained toy detector, test images and annotations for trying the other commands."""
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    bench = detection_benchmark(n_test=args.n_test, seed=args.seed)
    props = proposals.kmeans_cluster_boxes(bench.train, 1000, seed=args.seed)
    det = train_detector(bench, props, seed=args.seed)
    det.net.save(out / "net.json")
    det.scorer.save(out / "scorer.json")
    det.regressor.save(out / "reg.json")
    props.save(out / "props.json")
    proposals.save_annotations(bench.test, out / "ann.json")
    proposals.save_annotations(bench.train, out / "train_ann.json")
    for image_id, img in bench.images(bench.test).items():
        write_tensor(out / "images" / f"{image_id}.bin", img)
    (out / "arch.json").write_text(receptive.dump_architecture(det.net.architecture()))
    (out / "bench.json").write_text(json.dumps({
        "images": "images", "net": "net.json", "scorer": "scorer.json", "regressor": "reg.json",
        "proposals": "props.json", "scales": [1.0]}))
    # regression pairs in the CLI pairs format, harvested from the GT boxes and proposals
    fit = bench.images(bench.fit)
    config = PipelineConfig()
    pairs: dict[int, tuple[list, list]] = {}
    for im in bench.fit.images[:50]:
        cand = props.denormalize(im.height, im.width)
        ov = iou_matrix(im.boxes(), cand)
        gi, ci = np.nonzero(ov >= 0.5)
        if len(ci) == 0:
            continue
        X = describe_regions(fit[im.id], cand[ci], config, det)
        Y = compute_adjustments(cand[ci], im.boxes()[gi])
        for g, x, y in zip(gi, X, Y):
            c = im.objects[g].cls
            pairs.setdefault(c, ([], []))
            pairs[c][0].append(x)
            pairs[c][1].append(y)
    write_pairs(out / "pairs.bin", {c: (np.array(X), np.array(Y)) for c, (X, Y) in pairs.items()})
    log.info("demo files written to %s", out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regiongeo", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("rfmap", help="print alpha/beta of the feature-to-image map")
    s.add_argument("--arch", required=True, help='JSON list of {"F","S","P"} layers')
    s.set_defaults(func=cmd_rfmap)

    s = sub.add_parser("cluster", help="k-means proposals from GT boxes")
    s.add_argument("--ann", required=True)
    s.add_argument("--n", type=int, default=3000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("slidewin", help="sliding-window proposals")
    s.add_argument("--w0", dest="min_width", type=float, default=40.0)
    s.add_argument("--target", type=int, default=7000)
    s.add_argument("--height", type=int, default=375)
    s.add_argument("--width", type=int, default=500)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_slidewin)

    s = sub.add_parser("stats", help="2-D histogram of normalized GT box statistics")
    s.add_argument("--ann", required=True)
    s.add_argument("--axes", default="s,cmag")
    s.add_argument("--bins", type=int, default=20)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("train-regressor", help="ridge box regressor with pruned retraining")
    s.add_argument("--pairs", required=True)
    s.add_argument("--lambda", dest="ridge", type=float, default=None)
    s.add_argument("--prune", type=float, default=0.2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_regressor)

    s = sub.add_parser("detect", help="run the detector over a directory of image tensors")
    s.add_argument("--images", required=True)
    s.add_argument("--net", required=True)
    s.add_argument("--scorer", required=True)
    s.add_argument("--scorer-kind", default="modified-softmax", choices=["svm", "softmax", "modified-softmax"])
    s.add_argument("--regressor")
    s.add_argument("--no-regression", action="store_true")
    s.add_argument("--proposals", required=True)
    s.add_argument("--scales", default="1.0")
    s.add_argument("--nms", type=float, default=0.3)
    s.add_argument("--grid", type=int, default=None)
    s.add_argument("--top-k", type=int, default=100)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("bench", help="per-stage timing")
    s.add_argument("--config", required=True)
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--warmup", type=int, default=1)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("eval", help="per-class AP and mAP")
    s.add_argument("--dets", required=True)
    s.add_argument("--ann", required=True)
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--mode", default="voc07", choices=["voc07", "continuous"])
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="mAP versus proposal budget on the synthetic benchmark")
    s.add_argument("--budgets", default="100,500,1000,3000")
    s.add_argument("--methods", default="cluster,slidewin")
    s.add_argument("--w0", dest="min_width", type=float, default=40.0, help="smallest window width for a 500 px image")
    s.add_argument("--n-test", type=int, default=150)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("demo", help="write a toy detector and synthetic data set")
    s.add_argument("--out", required=True)
    s.add_argument("--n-test", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
