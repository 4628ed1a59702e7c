"""Command-line entry points: train, align, generate, eval, split.

Every subcommand reads an optional ``--config`` file plus flag
overrides; any config key can also be set through the environment
with the ``DEFECTGEN_`` prefix (useful in CI).  Exit codes: 0 success,
2 usage/config/parameter, 3 data, 4 alignment, 5 checkpoint, 1 other.
"""

import argparse
import sys
from pathlib import Path

from . import __version__
from .cama import PatchDescriptor, align
from .config import load_config
from .dataset import get_class, ingest, load_exemplars, load_normals
from .denoiser import load_checkpoint, save_checkpoint, trainable_backend
from .errors import (
    AlignmentError,
    CheckpointError,
    ConfigError,
    DataError,
    DefectgenError,
    ParameterError,
    ShapeError,
)
from .imgio import load_image
from .pipeline import evaluate, cluster_generated, generate, read_manifest, write_alignment
from .prompt import init_embedding
from .trainer import TrainConfig, split_train_test, train, write_loss_curve

_EXIT_CODES = (
    (ConfigError, 2),
    (ParameterError, 2),
    (ShapeError, 2),
    (DataError, 3),
    (AlignmentError, 4),
    (CheckpointError, 5),
    (DefectgenError, 1),
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="defectgen",
        description="Mask-guided diffusion inpainting for defect image synthesis.",
        epilog="Config keys can be overridden via environment variables "
               "prefixed with DEFECTGEN_ (e.g. DEFECTGEN_SIGMA=0.5).",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--data", required=True, help="dataset root directory")

    p = sub.add_parser("train", help="fine-tune the denoiser on a class's train split")
    common(p)
    p.add_argument("--class", dest="class_name", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--curve", help="loss curve output path (two-column text)")
    p.add_argument("--seed", type=int, help="override training seed")

    p = sub.add_parser("align", help="relocate one exemplar mask onto a normal image")
    common(p)
    p.add_argument("--class", dest="class_name", required=True)
    p.add_argument("--exemplar", type=int, default=0, help="exemplar index in the train split")
    p.add_argument("--normal", type=int, default=0, help="normal image index")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("generate", help="synthesize anomaly image + mask pairs")
    common(p)
    p.add_argument("--class", dest="class_name", required=True)
    p.add_argument("--ckpt", required=True, help="trained checkpoint for the class")
    p.add_argument("--n", type=int, required=True, help="number of pairs to generate")
    p.add_argument("--seed", type=int, default=0, help="run seed")
    p.add_argument("--cama", choices=("on", "off"), help="override mask alignment")
    p.add_argument("--out", required=True, help="output directory (manifest + images)")

    p = sub.add_parser("eval", help="report KID and the diversity proxy for a run")
    common(p)
    p.add_argument("--class", dest="class_name", required=True)
    p.add_argument("--gen", required=True, help="generation output directory")

    p = sub.add_parser("split", help="print the train/test allocation per class")
    common(p)
    p.add_argument("--class", dest="class_name", help="restrict to one class")
    return parser


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    layout = ingest(args.data)
    cls = get_class(layout, args.class_name)
    exemplars = load_exemplars(cls, cfg.image_size)
    if not exemplars:
        raise DataError(f"class {cls.name} has no anomaly exemplars")
    train_ex, _ = split_train_test(exemplars)
    if not train_ex:
        raise DataError(f"class {cls.name}: empty train split; need at least 3 exemplars")
    channels = train_ex[0].image.shape[0]
    codec = cfg.make_codec()
    latent_channels = codec.encode(train_ex[0].image).shape[0]
    net = trainable_backend(cfg.make_arch(latent_channels), seed=cfg.train_seed)
    embedding = init_embedding(cfg.embed_dim, cfg.embed_seed)
    tc = TrainConfig(
        steps=cfg.train_steps, batch=cfg.batch, lr=cfg.lr, gpp=cfg.make_gpp(),
        schedule=cfg.make_schedule(),
        seed=args.seed if args.seed is not None else cfg.train_seed,
        weight_decay=cfg.weight_decay,
    )
    print(f"training {cls.name}: {len(train_ex)} exemplar(s), {channels} channel(s), "
          f"{tc.steps} steps")
    result = train(train_ex, net, embedding, tc, codec)
    save_checkpoint(args.out, net, embedding)
    curve_path = args.curve or (str(args.out) + ".loss.txt")
    write_loss_curve(curve_path, result.losses)
    print(f"loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}; "
          f"checkpoint {args.out}; curve {curve_path}")
    return 0


def _cmd_align(args) -> int:
    cfg = load_config(args.config)
    layout = ingest(args.data)
    cls = get_class(layout, args.class_name)
    exemplars = load_exemplars(cls, cfg.image_size)
    train_ex, _ = split_train_test(exemplars)
    if not train_ex:
        raise DataError(f"class {cls.name}: empty train split")
    if not 0 <= args.exemplar < len(train_ex):
        raise ParameterError(f"exemplar index {args.exemplar} out of range")
    normals = load_normals(cls, cfg.image_size)
    if not 0 <= args.normal < len(normals):
        raise ParameterError(f"normal index {args.normal} out of range")
    exemplar = train_ex[args.exemplar]
    result = align(exemplar.mask, exemplar, normals[args.normal],
                   PatchDescriptor(k=cfg.patch_size))
    mask_path, sidecar = write_alignment(args.out, result, f"{args.exemplar:03d}")
    print(f"aligned mask -> {mask_path} (center {result.q_center}, "
          f"fallback={'yes' if result.fallback else 'no'}); sidecar {sidecar}")
    return 0


def _cmd_generate(args) -> int:
    cfg = load_config(args.config)
    layout = ingest(args.data)
    cls = get_class(layout, args.class_name)
    net, embedding = load_checkpoint(args.ckpt)
    cama_enabled = None if args.cama is None else (args.cama == "on")
    records = generate(cls, net, embedding, cfg, args.out, args.n, args.seed,
                       cama_enabled=cama_enabled)
    ok = sum(1 for r in records if r.status == "ok")
    print(f"generated {ok}/{len(records)} pair(s) in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    layout = ingest(args.data)
    cls = get_class(layout, args.class_name)
    exemplars = load_exemplars(cls, cfg.image_size)
    _, test_ex = split_train_test(exemplars)
    real_images = [ex.image for ex in test_ex]
    gen_dir = Path(args.gen)
    records = read_manifest(gen_dir / "manifest.txt")
    images_by_name = {
        rec.image_path: load_image(gen_dir / rec.image_path)
        for rec in records if rec.status == "ok"
    }
    if not images_by_name:
        raise DataError(f"no generated images recorded under {gen_dir}")
    generated = [images_by_name[r.image_path] for r in records if r.status == "ok"]
    clusters = cluster_generated(records, images_by_name)
    report = evaluate(cls.name, real_images, generated, clusters, cfg.make_feature_config())
    print(report.format())
    return 0


def _cmd_split(args) -> int:
    layout = ingest(args.data)
    names = [args.class_name] if args.class_name else sorted(layout.classes)
    for name in names:
        cls = get_class(layout, name)
        tr, te = split_train_test(list(cls.anomaly_pairs))
        print(f"{name}: {len(tr)} train / {len(te)} test")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "align": _cmd_align,
    "generate": _cmd_generate,
    "eval": _cmd_eval,
    "split": _cmd_split,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DefectgenError as e:
        for klass, code in _EXIT_CODES:
            if isinstance(e, klass):
                print(f"error ({klass.__name__}): {e}", file=sys.stderr)
                return code
        raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
