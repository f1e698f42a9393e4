import argparse
import logging
import math
import os
import sys

import torch
from dotenv import load_dotenv
from torchvision.utils import save_image

from modules.checkpoint import save_checkpoint
from modules.config import build_run_config
from modules.dataset_builder import (
    Manifest,
    check_ratios,
    forge_manifest,
    generate_paired,
    generate_real_proxy,
    ingest_real,
    load_images,
    merge,
    split,
)
from modules.diffusion_core import build_models, reconstruction_error, sample, train_autoencoder
from modules.errors import ConfigError, EmptyDataset, Seal2RealError, ShapeMismatch
from modules.eval_downstream import (
    compare_datasets,
    eval_identification,
    eval_recognition,
    eval_removal,
    eval_segmentation,
)
from modules.reproducibility import set_reproducible, write_run_record
from modules.stage1_prior import load_stage1, new_stage1_state, run_stage1
from modules.stage2_forger import load_forger, load_stage2, run_stage2
from modules.toy_data import domain_gap_set, two_class_toy

logger = logging.getLogger("seal2real")

COMMANDS = ("synth", "ingest-real", "train-stage1", "train-stage2", "forge", "build-dataset",
            "sample", "eval", "compare")


def _ratios(text):
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"ratios must be comma-separated numbers, got '{text}'")
    return values


def _seeds(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got '{text}'")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="Global seed")
    common.add_argument("--out", default=".", help="Output root; outputs are written under it")
    common.add_argument("--config", help="key=value config file (section.field=value)")
    common.add_argument("--reproducible", action="store_true",
                        help="Single-threaded deterministic kernels")
    common.add_argument("--quiet", action="store_true", help="No progress bars, warnings only")
    common.add_argument("--log-file", help="Also write the log to this file")
    common.add_argument("--workers", type=int, default=1, help="Processes for dataset synthesis")

    parser = argparse.ArgumentParser(
        prog="seal2real",
        description="Seal2Real - realistic seal document images from synthetic ones",
    )
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="Synthesize labeled seal documents")
    p.add_argument("--n", type=int, default=100, help="Number of samples")
    p.add_argument("--style", choices=("traditional", "real_proxy"), help="Ink law")

    p = sub.add_parser("ingest-real", parents=[common], help="Index a directory of real seal images")
    p.add_argument("--dir", required=True, help="Directory of scans or photographs")

    p = sub.add_parser("train-stage1", parents=[common], help="Learn the real/forgery prompt prior")
    p.add_argument("--data", help="Dataset directory or manifest with real and synthetic entries")
    p.add_argument("--toy", action="store_true", help="Two-class 16x16 toy data instead of --data")
    p.add_argument("--resume", help="Stage-1 checkpoint to resume from")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--k-p", type=int, help="Prompt steps per block")
    p.add_argument("--k-u", type=int, help="UNet steps per block")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-prompt", type=float)
    p.add_argument("--lr-unet", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--ae-steps", type=int, help="Autoencoder pretraining steps")

    p = sub.add_parser("train-stage2", parents=[common], help="Train the forger network")
    p.add_argument("--data", help="Dataset directory or manifest with real and synthetic entries")
    p.add_argument("--toy", action="store_true", help="Toy domain-gap data instead of --data")
    p.add_argument("--stage1", help="Stage-1 checkpoint (default: <out>/stage1.pt)")
    p.add_argument("--resume", help="Stage-2 checkpoint to resume from")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--s-warm", type=int, help="Content-only warm start steps")
    p.add_argument("--k-f", type=int, help="Forger steps per block")
    p.add_argument("--k-a", type=int, help="Adversarial steps per block")
    p.add_argument("--w", type=float, help="Content loss weight")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint-every", type=int)

    p = sub.add_parser("forge", parents=[common], help="Add forged siblings to a synthetic dataset")
    p.add_argument("--data", required=True, help="Dataset directory or manifest")
    p.add_argument("--stage2", help="Stage-2 checkpoint (default: <out>/stage2.pt)")

    p = sub.add_parser("build-dataset", parents=[common], help="Paired + real Seal-DB style dataset")
    p.add_argument("--n", type=int, default=100, help="Number of synthetic samples")
    p.add_argument("--real-n", type=int, help="Real-proxy images when --real-dir is not given")
    p.add_argument("--real-dir", help="Directory of real images to ingest")
    p.add_argument("--stage2", help="Stage-2 checkpoint; adds forged siblings")
    p.add_argument("--ratios", type=_ratios, default=(0.8, 0.1, 0.1), help="train,val,test")

    p = sub.add_parser("sample", parents=[common], help="Generate images from a learned prompt")
    p.add_argument("--stage1", help="Stage-1 checkpoint (default: <out>/stage1.pt)")
    p.add_argument("--stage2", help="Use the prompts and UNet of a stage-2 checkpoint instead")
    p.add_argument("--prompt", choices=("real", "fake"), default="real")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--steps", type=int, help="Reverse steps (default: all)")
    p.add_argument("--sampler", choices=("ddpm", "ddim"), default="ddpm")
    p.add_argument("--grid", help="Grid image path (default: samples_<prompt>.png)")

    p = sub.add_parser("eval", parents=[common], help="Run one downstream task")
    p.add_argument("--task", required=True,
                   choices=("segmentation", "identification", "recognition", "removal"))
    p.add_argument("--train", required=True, help="Training manifest (fake class for identification)")
    p.add_argument("--test", help="Labeled test manifest")
    p.add_argument("--real", help="Real-class manifest for identification")
    p.add_argument("--epochs", type=int)
    p.add_argument("--oracle", action="store_true", help="Predict the ground truth")
    p.add_argument("--unoccluded", action="store_true", help="Recognition on clean documents")

    p = sub.add_parser("compare", parents=[common], help="Traditional vs. realized downstream report")
    p.add_argument("--traditional", required=True, help="Traditional (synthetic) dataset")
    p.add_argument("--realized", help="Realized (forged) dataset (default: --traditional)")
    p.add_argument("--benchmark", required=True, help="Labeled benchmark to score on")
    p.add_argument("--real", help="Real-class manifest for identification")
    p.add_argument("--seeds", type=_seeds, help="Comma-separated seeds")
    p.add_argument("--epochs", type=int)
    return parser


def _overrides(args):
    """Section overrides taken from flags; None values leave file/default values alone."""
    def get(name):
        return getattr(args, name, None)

    overrides = {
        "synth": {"style": get("style")},
        "diffusion": {"ae_steps": get("ae_steps")},
        "eval": {"epochs": get("epochs"), "seeds": get("seeds")},
    }
    if get("toy"):
        overrides["diffusion"].update({"image_size": 16, "factor": 1})
    if args.command == "train-stage1":
        overrides["stage1"] = {
            "max_steps": get("max_steps"), "k_p": get("k_p"), "k_u": get("k_u"),
            "batch_size": get("batch_size"), "lr_prompt": get("lr_prompt"),
            "lr_unet": get("lr_unet"), "checkpoint_every": get("checkpoint_every"),
        }
    if args.command == "train-stage2":
        overrides["stage2"] = {
            "max_steps": get("max_steps"), "s_warm": get("s_warm"), "k_f": get("k_f"),
            "k_a": get("k_a"), "w": get("w"), "batch_size": get("batch_size"),
            "checkpoint_every": get("checkpoint_every"),
        }
    if get("oracle"):
        overrides["eval"]["oracle"] = True
    if get("unoccluded"):
        overrides["eval"]["occluded"] = False
    return overrides


def _check_args(args):
    for name in ("n", "real_n", "workers", "steps"):
        value = getattr(args, name, None)
        if value is not None and value < 1:
            raise ConfigError(f"--{name.replace('_', '-')} must be >= 1, got {value}")
    if args.command in ("train-stage1", "train-stage2") and not (args.toy or args.data):
        raise ConfigError(f"{args.command} needs --data or --toy")
    if args.command == "eval" and args.task != "identification" and not args.test:
        raise ConfigError("--test is required for this task")
    if args.command == "eval" and args.task == "identification" and not args.real:
        raise ConfigError("--real is required for identification")
    if args.command == "build-dataset":
        check_ratios(args.ratios)
        if args.real_dir and not os.path.isdir(args.real_dir):
            raise ConfigError(f"--real-dir {args.real_dir} is not a directory")


def _input(out, path):
    """Input paths may be given relative to the output root or to the working directory."""
    if path and not os.path.isabs(path) and os.path.exists(os.path.join(out, path)):
        return os.path.join(out, path)
    return path


def _output(out, path):
    return path if os.path.isabs(path) else os.path.join(out, path)


def _setup_logging(quiet, log_file):
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


def _stage_data(args, cfg, toy_loader):
    if args.toy:
        return toy_loader(n=64, size=cfg.diffusion.image_size, seed=cfg.seed)
    manifest = Manifest.load(_input(args.out, args.data))
    real = manifest.filter(provenance="real")
    synthetic = manifest.filter(provenance="synthetic")
    if not real.entries or not synthetic.entries:
        raise EmptyDataset("training needs real and synthetic entries in the manifest")
    real_images, synth_images = load_images(real), load_images(synthetic)
    size = cfg.diffusion.image_size
    for images in (real_images, synth_images):
        if tuple(images.shape[-2:]) != (size, size):
            raise ShapeMismatch(f"images are {tuple(images.shape[-2:])}, diffusion expects {size}x{size}")
    return real_images, synth_images


def cmd_synth(args, cfg):
    manifest = generate_paired(args.n, cfg.synth, args.out, cfg.seed, workers=args.workers)
    print(f"Wrote {len(manifest)} samples to {args.out}")


def cmd_ingest_real(args, cfg):
    ingest_real(args.dir, os.path.join(args.out, "manifest.jsonl"))


def cmd_train_stage1(args, cfg):
    progress = not args.quiet
    real, synthetic = _stage_data(args, cfg, two_class_toy)
    if args.resume:
        state = load_stage1(_input(args.out, args.resume), cfg.stage1)
        print(f"Resuming stage 1 from step {state.step}")
    else:
        model, ae, sched = build_models(cfg.diffusion, seed=cfg.seed)
        train_autoencoder(ae, synthetic, cfg.diffusion.ae_steps, cfg.diffusion.ae_lr,
                          cfg.diffusion.ae_batch_size, seed=cfg.seed, progress=progress)
        if ae.factor > 1:
            save_checkpoint(os.path.join(args.out, "autoencoder.pt"), "autoencoder",
                            {"autoencoder": ae.state_dict(), "autoencoder_meta": ae.meta()})
            print(f"Autoencoder reconstruction L1: {reconstruction_error(ae, synthetic):.4f}")
        state = new_stage1_state(model, ae, sched, cfg.stage1, cfg.diffusion.prompt_len, cfg.seed)
    state = run_stage1(cfg.stage1, (real, synthetic), state, out_dir=args.out, progress=progress)
    print(f"Stage 1 finished at step {state.step}, last loss {state.log[-1]['loss']:.5f}"
          if state.log else f"Stage 1 already at step {state.step}")


def cmd_train_stage2(args, cfg):
    real, synthetic = _stage_data(args, cfg, domain_gap_set)
    state0 = None
    if args.resume:
        state0 = load_stage2(_input(args.out, args.resume), cfg.stage1, cfg.stage2)
        stage1 = state0.stage1
    else:
        stage1 = load_stage1(_input(args.out, args.stage1 or "stage1.pt"), cfg.stage1)
    state = run_stage2(cfg.stage2, (real, synthetic), stage1, out_dir=args.out, state0=state0,
                       image_size=cfg.diffusion.image_size, progress=not args.quiet)
    print(f"Stage 2 finished at step {state.step}")


def cmd_forge(args, cfg):
    manifest = Manifest.load(_input(args.out, args.data))
    forger = load_forger(_input(args.out, args.stage2 or "stage2.pt"))
    result = forge_manifest(manifest, forger)
    print(f"Manifest now holds {len(result)} entries")


def cmd_build_dataset(args, cfg):
    forger = load_forger(_input(args.out, args.stage2)) if args.stage2 else None
    paired = generate_paired(args.n, cfg.synth, args.out, cfg.seed, forger=forger,
                             workers=args.workers, write=False)
    if args.real_dir:
        real = ingest_real(args.real_dir, os.path.join(args.out, "manifest.jsonl"), write=False)
    else:
        real = generate_real_proxy(args.real_n or args.n, cfg.synth, args.out, cfg.seed,
                                   workers=args.workers, write=False)
    manifest = split(merge(paired, real), args.ratios, cfg.seed)
    manifest.write()
    counts = manifest.to_frame().groupby(["provenance", "split"]).size()
    print(f"Built dataset with {len(manifest)} entries in {args.out}")
    print(counts.to_string())


def cmd_sample(args, cfg):
    if args.stage2:
        state = load_stage2(_input(args.out, args.stage2), cfg.stage1, cfg.stage2).stage1
    else:
        state = load_stage1(_input(args.out, args.stage1 or "stage1.pt"), cfg.stage1)
    prompt = state.real if args.prompt == "real" else state.forgery
    generator = torch.Generator().manual_seed(cfg.seed)
    steps = args.steps or state.schedule.T
    images = sample(state.model, state.ae, prompt, state.schedule, steps, generator,
                    n=args.n, sampler=args.sampler)
    path = _output(args.out, args.grid or f"samples_{args.prompt}.png")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    save_image(images, path, nrow=math.ceil(math.sqrt(args.n)))
    print(f"Saved {args.n} samples ({args.prompt} prompt) to {path}")


def cmd_eval(args, cfg):
    train = Manifest.load(_input(args.out, args.train))
    if args.task == "identification":
        value = eval_identification(Manifest.load(_input(args.out, args.real)), train, cfg.eval, cfg.seed)
    else:
        test = Manifest.load(_input(args.out, args.test))
        runner = {"segmentation": eval_segmentation, "recognition": eval_recognition,
                  "removal": eval_removal}[args.task]
        value = runner(train, test, cfg.eval, cfg.seed)
    print(f"{args.task}: {value:.4f}")


def cmd_compare(args, cfg):
    traditional = Manifest.load(_input(args.out, args.traditional))
    realized = Manifest.load(_input(args.out, args.realized)) if args.realized else traditional
    benchmark = Manifest.load(_input(args.out, args.benchmark))
    real = Manifest.load(_input(args.out, args.real)) if args.real else None
    report = compare_datasets(traditional, realized, benchmark, cfg.eval, real_manifest=real)
    report.write(args.out)
    print((report.to_frame() * 100).round(2).to_string())
    if not report.ok:
        logger.error(f"{len(report.failures)} evaluation cells failed")
        return 1
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "ingest-real": cmd_ingest_real,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "forge": cmd_forge,
    "build-dataset": cmd_build_dataset,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def dispatch(argv):
    """
    Run one subcommand.

    Args:
        argv (list): Arguments without the program name

    Returns:
        int: 0 on success, 1 on runtime failure, 2 on configuration or usage errors
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    try:
        _check_args(args)
        config_path = args.config or os.environ.get("SEAL2REAL_CONFIG")
        cfg = build_run_config(args.command, seed=args.seed, out_root=args.out,
                               reproducible=args.reproducible, config_path=config_path,
                               overrides=_overrides(args))
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2

    try:
        os.makedirs(args.out, exist_ok=True)
        _setup_logging(args.quiet, args.log_file)
        if cfg.reproducible:
            set_reproducible(cfg.seed)
        else:
            torch.manual_seed(cfg.seed)
        code = HANDLERS[args.command](args, cfg) or 0
        write_run_record(args.out, args.command, cfg.as_dict(), [cfg.seed],
                         deterministic=cfg.reproducible)
        return code
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2
    except Seal2RealError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"Error: {e}", file=sys.stderr)
        return 1


def main():
    """Main entry point for the seal2real command."""
    load_dotenv()
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
