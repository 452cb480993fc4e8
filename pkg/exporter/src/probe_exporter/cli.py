"""Command line for the probe exporter.

Subcommands: make-checkpoint (seeded model weights), make-demo (synthetic
dataset), stats (freeze modality statistics), export (wire-format
records, optionally layer-tagged).
"""
from __future__ import annotations

import argparse
import sys

from .dataset import make_demo_dataset
from .export import ExportError, ExportJob, export_layerwise, export_records, stats_pass
from .model import ModelError, TinyLvlm


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probe-exporter",
                                     description="LVLM probe exporter")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("make-checkpoint", help="write seeded model weights")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = commands.add_parser("make-demo", help="write a synthetic VQA dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = commands.add_parser("stats", help="freeze modality noise statistics")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--modality", choices=["vision", "text"], required=True)
    p.add_argument("--out", required=True)

    p = commands.add_parser("export", help="run probes and write wire-format records")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stats-vision")
    p.add_argument("--stats-text")
    p.add_argument("--model-id", default="tiny-lvlm")
    p.add_argument("--dataset-name", default="demo")
    p.add_argument("--pooling", choices=["mean", "last", "max"], default="mean")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-tag")
    p.add_argument("--layers", type=int, nargs="*", help="logit-lens taps")
    p.add_argument("--probes", nargs="*", default=["multimodal", "vision", "text"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "make-checkpoint":
            TinyLvlm.init(args.seed).save(args.out)
            print(f"wrote {args.out}")
        elif args.command == "make-demo":
            items = make_demo_dataset(args.out, n_items=args.n, seed=args.seed)
            print(f"wrote {args.out} ({len(items)} items)")
        elif args.command == "stats":
            stats = stats_pass(args.model, args.dataset, args.modality)
            stats.save(args.out)
            print(f"wrote {args.out}")
        elif args.command == "export":
            job = ExportJob(model_path=args.model, dataset_dir=args.dataset,
                            out_path=args.out, model_id=args.model_id,
                            dataset_name=args.dataset_name, pooling=args.pooling,
                            stats_vision_path=args.stats_vision,
                            stats_text_path=args.stats_text, seed=args.seed,
                            checkpoint_tag=args.checkpoint_tag,
                            probes=tuple(args.probes),
                            layer_taps=tuple(args.layers) if args.layers else None)
            if job.layer_taps:
                paths = export_layerwise(job)
                for path in paths:
                    print(f"wrote {path}")
            else:
                path, errors = export_records(job)
                print(f"wrote {path}" + (f" ({len(errors)} failures)" if errors else ""))
    except (ExportError, ModelError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
