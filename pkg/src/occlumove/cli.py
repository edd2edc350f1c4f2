"""Command-line interface: edit, deocclude, invert, eval, serve."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import OcclumoveError, StageError


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (defaults < file < flags)")
    p.add_argument("--steps", type=int, dest="steps")
    p.add_argument("--t-m", type=int, dest="t_m")
    p.add_argument("--refine-power", type=int, dest="refine_power")
    p.add_argument("--relax", type=float, dest="relax")
    p.add_argument("--gamma", type=float, dest="gamma")
    p.add_argument("--omega", type=float, dest="omega")
    p.add_argument("--opt-iters", type=int, dest="opt_iters")
    p.add_argument("--lora-rank", type=int, dest="lora_rank")
    p.add_argument("--lora-steps", type=int, dest="lora_steps")
    p.add_argument("--lora-lr", type=float, dest="lora_lr")
    p.add_argument("--seed", type=int, dest="seed")
    p.add_argument("--backbone", choices=("toy", "pretrained"), dest="backbone")
    p.add_argument("--backbone-seed", type=int, dest="backbone_seed")
    p.add_argument("--checkpoint", dest="checkpoint")
    for flag, field in (("color-fill", "color_fill"),
                        ("attention-guidance", "attention_guidance"),
                        ("lora", "lora"),
                        ("latent-resize", "latent_resize"),
                        ("local-text-guidance", "local_text_guidance"),
                        ("noise-fill", "noise_fill")):
        p.add_argument(f"--{flag}", dest=field, action="store_true", default=None)
        p.add_argument(f"--no-{flag}", dest=field, action="store_false", default=None)


def _config_from_args(args: argparse.Namespace):
    from .pipeline import PipelineConfig

    cfg = PipelineConfig()
    if args.config:
        cfg = cfg.merged(json.loads(Path(args.config).read_text()))
    keys = PipelineConfig.__dataclass_fields__
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    return cfg.merged(overrides)


def _parse_point(text: str) -> tuple[int, int]:
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y pixel point, got {text!r}")
    return x, y


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occlumove",
                                description="Move occluded objects inside real images.")
    sub = p.add_subparsers(dest="command", required=True)

    edit = sub.add_parser("edit", help="run the full de-occlusion + movement edit")
    edit.add_argument("--image", type=Path, required=True)
    edit.add_argument("--mask", type=Path, required=True, help="single-channel PNG, 0/255")
    edit.add_argument("--target", type=_parse_point, required=True, metavar="X,Y")
    edit.add_argument("--category", required=True)
    edit.add_argument("--prompt", help="override the default prompt template")
    edit.add_argument("--out", type=Path, default=Path("occlumove-out"))
    _add_config_flags(edit)

    deocc = sub.add_parser("deocclude", help="run only the de-occlusion branch")
    deocc.add_argument("--image", type=Path, required=True)
    deocc.add_argument("--mask", type=Path, required=True)
    deocc.add_argument("--category", required=True)
    deocc.add_argument("--prompt")
    deocc.add_argument("--out", type=Path, default=Path("occlumove-deocc"))
    _add_config_flags(deocc)

    inv = sub.add_parser("invert", help="compute and persist a DDIM inversion cache")
    inv.add_argument("--image", type=Path, required=True)
    inv.add_argument("--prompt", required=True)
    inv.add_argument("--out", type=Path, required=True)
    inv.add_argument("--capture-kv", action="store_true")
    _add_config_flags(inv)

    ev = sub.add_parser("eval", help="run the evaluation harness over a dataset manifest")
    ev.add_argument("--dataset", type=Path, required=True, help="JSON-lines sample records")
    ev.add_argument("--out", type=Path, required=True)
    ev.add_argument("--embedder", default="stub")
    ev.add_argument("--embedder-seed", type=int, default=0)
    ev.add_argument("--limit", type=int, help="cap the number of cases (smoke runs)")
    _add_config_flags(ev)

    srv = sub.add_parser("serve", help="start the HTTP edit service")
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8321)
    srv.add_argument("--workers", type=int, default=1)
    srv.add_argument("--queue-size", type=int, default=16)
    srv.add_argument("--artifact-root", type=Path, default=Path("occlumove-jobs"))
    _add_config_flags(srv)

    return p


def cmd_edit(args) -> int:
    from .imgio import load_image, load_mask
    from .pipeline import EditRequest, run_edit

    config = _config_from_args(args)
    request = EditRequest(
        source_image=load_image(args.image),
        visible_mask=load_mask(args.mask).grid,
        target_xy=args.target,
        category=args.category,
        prompt_override=args.prompt,
    )
    result = run_edit(request, config, out_dir=args.out,
                      progress_sink=lambda label, done, total:
                      print(f"\r[{label}] {done}/{total}", end="", file=sys.stderr))
    print(file=sys.stderr)
    print(result.artifact_dir)
    return 0


def cmd_deocclude(args) -> int:
    from .backbone import make_backbone
    from .deocclusion import DeoccConfig, finetune_lora, prepare_input, run_branch
    from .imgio import load_image, load_mask, save_image, save_mask
    from .latent import ddim_invert
    from .seeding import derive_seed

    config = _config_from_args(args)
    bb = make_backbone(config.backbone, seed=config.backbone_seed,
                       checkpoint=config.checkpoint)
    image = load_image(args.image)
    visible = load_mask(args.mask)
    prompt = args.prompt or f"A photo of {args.category}"
    cond = bb.embed_prompt(prompt)
    span = cond.span_for(args.category)
    if span is None:
        print(f"error: category {args.category!r} not in prompt", file=sys.stderr)
        return 1
    schedule = bb.make_schedule(config.steps)
    crop_img, mv, frame = prepare_input(image, visible, config.relax,
                                        bb.native_side, bb.latent_downsample)
    z0 = bb.encode_image(crop_img)
    adapter = None
    if config.lora and config.lora_steps > 0:
        adapter = finetune_lora(bb, z0, mv, cond, schedule, steps=config.lora_steps,
                                rank=config.lora_rank, lr=config.lora_lr,
                                seed=derive_seed(config.seed, "lora"))
    with bb.lora(adapter):
        cache = ddim_invert(bb, z0, cond, schedule)
    cfg = DeoccConfig(t_m=config.resolved_t_m, refine_power=config.refine_power,
                      color_fill=config.color_fill,
                      attention_guidance=config.attention_guidance,
                      seed=derive_seed(config.seed, "deocc"))
    result = run_branch(bb, cache, mv, cond, span, schedule, cfg, frame, adapter)
    out = Path(args.out)
    save_image(result.image, out / "completed_object.png")
    save_mask(result.amodal_mask, out / "amodal_mask.png")
    (out / "frame.json").write_text(json.dumps(frame.to_dict(), indent=2))
    print(out)
    return 0


def cmd_invert(args) -> int:
    from .backbone import make_backbone
    from .imgio import load_image
    from .latent import ddim_invert

    config = _config_from_args(args)
    bb = make_backbone(config.backbone, seed=config.backbone_seed,
                       checkpoint=config.checkpoint)
    z0 = bb.encode_image(load_image(args.image))
    cond = bb.embed_prompt(args.prompt)
    cache = ddim_invert(bb, z0, cond, bb.make_schedule(config.steps),
                        capture_kv=args.capture_kv)
    cache.save(args.out)
    print(args.out)
    return 0


def cmd_eval(args) -> int:
    from .evalharness.runner import run_evaluation

    config = _config_from_args(args)
    report = run_evaluation(args.dataset, args.out, config,
                            embedder_kind=args.embedder,
                            embedder_seed=args.embedder_seed,
                            limit=args.limit)
    print(json.dumps(report.aggregates(), indent=2))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    config = _config_from_args(args)
    app = create_app(config, workers=args.workers, queue_size=args.queue_size,
                     artifact_root=args.artifact_root)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


COMMANDS = {
    "edit": cmd_edit,
    "deocclude": cmd_deocclude,
    "invert": cmd_invert,
    "eval": cmd_eval,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error at stage {exc.stage}: {exc}", file=sys.stderr)
        return 1
    except OcclumoveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
