"""Command-line interface: finetune, generate, evaluate, serve."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import images
from .concepts import load_concept, save_concept
from .diffusion import SampleConfig, sample
from .evaluation import ToyProjectionEmbedder, evaluate_suite, load_manifest, render_text_table
from .text import GENERATION_TEMPLATE_ID, GENERATION_TEMPLATE_ID_STYLE, encode_prompt
from .training import TrainConfig, finetune

KIND_ALIASES = {"id": "identity", "identity": "identity", "style": "style"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carigen")
    parser.add_argument("--backbone", choices=["toy", "external"], default="toy")
    parser.add_argument("--backbone-seed", type=int, default=0)
    parser.add_argument("--resolution", type=int, default=64, help="toy image resolution")
    parser.add_argument("--model-path", help="external backbone weights directory")
    parser.add_argument("--adapter-path", help="external sketch adapter directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("finetune", help="learn a concept from one image")
    p.add_argument("--image", required=True)
    p.add_argument("--superclass", required=True)
    p.add_argument("--kind", choices=sorted(KIND_ALIASES), required=True)
    p.add_argument("--region-mask")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("generate", help="sketch-conditioned caricature generation")
    p.add_argument("--id", required=True, dest="id_concept", metavar="CONCEPT.dcc")
    p.add_argument("--style", dest="style_concept", metavar="CONCEPT.dcc")
    p.add_argument("--sketch")
    p.add_argument("--scale", type=float, help="identity scale; concept default if omitted")
    p.add_argument("--style-scale", type=float)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--cfg", type=float, default=9.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="score generated caricatures")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("serve", help="run the HTTP job service")
    p.add_argument("--config")
    p.add_argument("--storage")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    return parser


def _build_backbone(args):
    if args.backbone == "external":
        from .backbones import external_backbone

        return external_backbone(args.model_path, args.adapter_path)
    from .backbones import toy_backbone

    return toy_backbone(seed=args.backbone_seed, image_resolution=args.resolution)


def _cmd_finetune(args) -> None:
    backbone = _build_backbone(args)
    region = None
    if args.region_mask:
        region = images.load_region_mask(args.region_mask, backbone.image_resolution)
    config = TrainConfig(steps=args.steps, seed=args.seed)
    concept = finetune(
        args.image, args.superclass, KIND_ALIASES[args.kind], backbone, config, region
    )
    save_concept(concept, args.out)
    print(f"saved concept to {args.out}")


def _cmd_generate(args) -> None:
    backbone = _build_backbone(args)
    concepts = {"id": load_concept(args.id_concept, backbone)}
    scales = {}
    if args.scale is not None:
        scales["id"] = args.scale
    template = GENERATION_TEMPLATE_ID
    if args.style_concept:
        concepts["style"] = load_concept(args.style_concept, backbone)
        template = GENERATION_TEMPLATE_ID_STYLE
        if args.style_scale is not None:
            scales["style"] = args.style_scale
    cond = encode_prompt(template, concepts, backbone)
    uncond = encode_prompt("", {}, backbone)
    sketch = None
    if args.sketch:
        sketch = images.load_sketch(args.sketch, backbone.image_resolution)
    config = SampleConfig(steps=args.steps, cfg_scale=args.cfg, scale_overrides=scales)
    result = sample(backbone, cond, uncond, sketch, config, args.seed)
    images.save_image(result.image, args.out)
    print(f"saved image to {args.out}")


def _cmd_evaluate(args) -> None:
    tuples = load_manifest(args.manifest)
    report = evaluate_suite(tuples, ToyProjectionEmbedder())
    Path(args.out).write_text(json.dumps(report, indent=2), encoding="utf-8")
    print(render_text_table(report))
    print(f"saved report to {args.out}")


def _cmd_serve(args) -> None:
    import uvicorn

    from .service import ServiceConfig, create_app

    config = ServiceConfig.load(args.config)
    if args.storage:
        config.storage_root = args.storage
    if args.host:
        config.host = args.host
    if args.port:
        config.port = args.port
    uvicorn.run(create_app(config), host=config.host, port=config.port)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    commands = {
        "finetune": _cmd_finetune,
        "generate": _cmd_generate,
        "evaluate": _cmd_evaluate,
        "serve": _cmd_serve,
    }
    try:
        commands[args.command](args)
    except Exception as exc:  # noqa: BLE001 - report the failing stage, exit 1
        print(f"error during {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
