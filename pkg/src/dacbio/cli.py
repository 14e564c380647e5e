"""Command-line entry point: ``dacbio generate|train|infer|evaluate|report|ablate``.

Device selection: set ``DACBIO_DEVICE`` (default ``cpu``).  Failures exit
with status 1 and a JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml


def _cmd_generate(args) -> dict:
    from .phantom import DatasetConfig, generate_dataset

    data = yaml.safe_load(Path(args.config).read_text()) if args.config else {}
    manifest = generate_dataset(DatasetConfig.from_dict(data or {}), args.out)
    return {"out": str(manifest.root), "counts": {k: len(v) for k, v in manifest.splits.items()}}


def _cmd_train(args) -> dict:
    from .config import load_config
    from .phantom import DatasetManifest
    from .trainer import train

    cfg = load_config(args.config)
    ckpt = train(cfg, DatasetManifest.load(args.data), args.out)
    return {"checkpoint": str(ckpt), "variant": cfg.variant}


def _cmd_infer(args) -> dict:
    from .biometry import compute_biometry
    from .estimator import DACSegmenter, _scaled_spacing
    from .phantom import read_image

    image = read_image(args.image)
    spacing = args.spacing
    if spacing is None:
        side = Path(args.image).with_suffix(".json")
        if not side.is_file():
            raise ValueError("pixel spacing unknown: pass --spacing SX SY or provide a sidecar .json")
        spacing = json.loads(side.read_text())["spacing"]
    est = DACSegmenter.from_checkpoint(args.checkpoint)
    p = est.predict_proba(image[None])[0]
    net_spacing = _scaled_spacing(spacing, image.shape, p.shape[1:])
    record = {"image": str(args.image), **compute_biometry(p, net_spacing).to_dict()}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "biometry.json").write_text(json.dumps(record, indent=1))
        if args.save_maps:
            import tifffile

            tifffile.imwrite(out / "probmap.tif", np.round(p * 65535).astype(np.uint16),
                             photometric="minisblack")
    return record


def _cmd_evaluate(args) -> dict:
    from .evaluation import evaluate

    report = evaluate(args.checkpoint, args.data, args.split)
    report.write(args.out)
    return report.summary()


def _cmd_report(args) -> dict:
    from .evaluation import MetricsReport, write_report

    paths = write_report([MetricsReport.read(p) for p in args.inputs], args.out)
    sys.stdout.write(Path(paths["text"]).read_text())
    return {k: str(v) for k, v in paths.items()}


def _cmd_ablate(args) -> dict:
    from .experiment import ordering_check, run_ablation

    overrides = yaml.safe_load(Path(args.config).read_text()) if args.config else {}
    results = run_ablation(args.data, args.out, args.variants, args.seeds, splits=tuple(args.splits),
                           **(overrides or {}))
    return {str(seed): ordering_check({v: r[args.splits[0]] for v, r in by_v.items()}, args.variants)
            for seed, by_v in results.items()}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dacbio", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic phantom dataset")
    p.add_argument("--config", help="YAML with counts, seed and phantom ranges")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="measure HC and TCD on one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--spacing", nargs=2, type=float, metavar=("SX", "SY"))
    p.add_argument("--out")
    p.add_argument("--save-maps", action="store_true")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("evaluate", help="MAE of a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="ablation table and distribution plots from evaluate outputs")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("ablate", help="train and evaluate several variants over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", nargs="+", default=["2", "5", "7"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--splits", nargs="+", default=["lc_test"],
                   help="splits to evaluate; the first one drives the ordering check")
    p.add_argument("--config", help="YAML of TrainConfig overrides applied to every variant")
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        record = {"status": "error", "command": args.command, "error": type(exc).__name__, "message": str(exc)}
        sys.stderr.write(json.dumps(record) + "\n")
        return 1
    if args.command != "report":
        sys.stdout.write(json.dumps({"status": "ok", **result}, default=str) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
