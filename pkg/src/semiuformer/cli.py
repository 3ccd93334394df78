"""Command-line interface: hazegen / train / infer / eval / gradcheck / ablate."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import gradcheck as gc
from .core import (CheckpointError, LossWeights, NetConfig, RunConfig, ShapeError,
                   load_checkpoint, load_run_config, save_checkpoint)
from .hazedata import DatasetSpec, build_dataset, load_png, save_png, write_dataset
from .losses import LossFlags
from .metrics import evaluate_pairs
from .network import DehazeNet
from .trainer import (TrainPlan, load_weights, train_student, train_teacher)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class _UsageError(Exception):
    pass


@dataclass(frozen=True)
class AblationVariant:
    name: str
    use_mdb: bool
    use_uncertainty: bool
    use_kl: bool


ABLATION_VARIANTS = (
    AblationVariant("base", False, False, False),
    AblationVariant("v1", True, False, False),
    AblationVariant("v2", True, True, False),
    AblationVariant("v3", True, True, True),
)


def _dataset_spec(args, run: RunConfig) -> DatasetSpec:
    return DatasetSpec(n_paired=args.paired, n_unpaired_real=args.unpaired,
                       image_size=(args.size, args.size), seed=args.seed)


def cmd_hazegen(args, run: RunConfig) -> int:
    divisor = run.net.size_divisor
    if args.size % divisor:
        raise _UsageError(f"--size {args.size} must be divisible by {divisor}")
    spec = _dataset_spec(args, run)
    manifest = write_dataset(spec, args.out)
    print(f"wrote {spec.n_paired} paired + {spec.n_unpaired_real} unpaired images to "
          f"{args.out} (manifest: {manifest})")
    return EXIT_OK


def _load_training_data(args, run: RunConfig):
    spec = DatasetSpec(n_paired=args.paired, n_unpaired_real=args.unpaired,
                       image_size=(args.size, args.size), seed=run.seed)
    return build_dataset(spec)


def cmd_train(args, run: RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    paired, unpaired = _load_training_data(args, run)
    log_path = os.path.join(args.out, f"{args.stage}_train.log")

    if args.stage == "teacher":
        plan = TrainPlan.teacher_default(lr0=run.lr, batch_size=run.batch_size,
                                         epochs=args.epochs or run.epochs_teacher,
                                         weights=run.weights, seed=run.seed)
        result = train_teacher(plan, paired, unpaired,
                               total_steps=args.steps, log_path=log_path)
    else:
        if not args.teacher_ckpt:
            raise _UsageError("student stage requires --teacher-ckpt")
        teacher_ckpt = load_checkpoint(args.teacher_ckpt)
        plan = TrainPlan.student_default(lr0=run.lr, batch_size=run.batch_size,
                                         epochs=args.epochs or run.epochs_student,
                                         weights=run.weights, seed=run.seed)
        result = train_student(plan, paired, unpaired, teacher_ckpt,
                               total_steps=args.steps, log_path=log_path)

    ckpt_path = os.path.join(args.out, f"{args.stage}_e{plan.epochs}.sufc")
    save_checkpoint(result.checkpoint, ckpt_path)
    print(f"{args.stage} training done: final total loss {result.final_total:.4e}, "
          f"checkpoint {ckpt_path}, log {log_path}")
    return EXIT_OK


def _pad_to_divisor(img: np.ndarray, divisor: int) -> tuple[np.ndarray, tuple[int, int]]:
    _, h, w = img.shape
    ph = (-h) % divisor
    pw = (-w) % divisor
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    return img, (h, w)


def cmd_infer(args, run: RunConfig) -> int:
    ckpt = load_checkpoint(args.ckpt)
    net = DehazeNet(ckpt.config)
    load_weights(net, ckpt)
    net.eval()
    os.makedirs(args.out, exist_ok=True)
    divisor = ckpt.config.size_divisor

    for path in args.inputs:
        img = load_png(path)
        padded, (h, w) = _pad_to_divisor(img, divisor)
        if padded.shape[1:] != (h, w):
            print(f"warning: {path} padded from {h}x{w} to "
                  f"{padded.shape[1]}x{padded.shape[2]} (reflect), cropped back",
                  file=sys.stderr)
        batch = torch.from_numpy(padded[None]).float()
        with torch.no_grad():
            out = net(batch, want_uncertainty=args.uncertainty)
        stem = os.path.splitext(os.path.basename(path))[0]
        dehazed = out.dehazed[0, :, :h, :w].numpy()
        save_png(os.path.join(args.out, f"{stem}_dehazed.png"), dehazed)
        if args.uncertainty:
            lt = out.log_theta[0, 0, :h, :w].numpy()
            lo, hi = float(lt.min()), float(lt.max())
            vis = (lt - lo) / (hi - lo) if hi > lo else np.zeros_like(lt)
            save_png(os.path.join(args.out, f"{stem}_theta.png"), vis)
            with open(os.path.join(args.out, f"{stem}_theta.txt"), "w") as fh:
                fh.write(f"log_theta_min={lo:.6f}\nlog_theta_max={hi:.6f}\n")
    print(f"inferred {len(args.inputs)} image(s) into {args.out}")
    return EXIT_OK


def cmd_eval(args, run: RunConfig) -> int:
    ckpt = load_checkpoint(args.ckpt)
    net = DehazeNet(ckpt.config)
    load_weights(net, ckpt)
    net.eval()
    spec = DatasetSpec(n_paired=args.paired, n_unpaired_real=0,
                       image_size=(args.size, args.size), seed=args.seed)
    paired, _ = build_dataset(spec)
    hazy, clean = paired.tensors()
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "eval_report.tsv")
    report = evaluate_pairs(lambda x: net(x).dehazed, hazy, clean, out=report_path)
    print(f"mean PSNR {report.mean_psnr:.3f} dB, mean SSIM {report.mean_ssim:.4f} "
          f"({len(report.per_image)} images) -> {report_path}")
    return EXIT_OK


def cmd_gradcheck(args, run: RunConfig) -> int:
    results = gc.run_suite(seed=args.seed)
    print(gc.format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def variant_setup(variant: AblationVariant, run: RunConfig) -> tuple[NetConfig, LossWeights, LossFlags]:
    net = replace(run.net, mdb_fusion=variant.use_mdb)
    weights = run.weights if variant.use_kl else replace(run.weights, lambda6=0.0)
    flags = LossFlags(use_uncertainty=variant.use_uncertainty, use_kl=variant.use_kl)
    return net, weights, flags


def run_ablation(out_dir: str, seeds: list[int], teacher_steps: int, student_steps: int,
                 run: RunConfig, n_paired: int = 16, n_unpaired: int = 8,
                 n_eval: int = 8, size: int = 64):
    """Train all four variants per seed and score them on a held-out split."""
    from .losses import ModelBundle
    from .network import PatchDiscriminator

    eval_spec = DatasetSpec(n_paired=n_eval, n_unpaired_real=0,
                            image_size=(size, size), seed=999_999)
    eval_paired, _ = build_dataset(eval_spec)
    eval_hazy, eval_clean = eval_paired.tensors()

    scores: dict[str, list[tuple[float, float]]] = {v.name: [] for v in ABLATION_VARIANTS}
    for seed in seeds:
        spec = DatasetSpec(n_paired=n_paired, n_unpaired_real=n_unpaired,
                           image_size=(size, size), seed=seed)
        paired, unpaired = build_dataset(spec)
        for variant in ABLATION_VARIANTS:
            net_cfg, weights, flags = variant_setup(variant, run)
            torch.manual_seed(seed)
            nets = ModelBundle(teacher=DehazeNet(net_cfg), disc=PatchDiscriminator())
            t_plan = TrainPlan.teacher_default(lr0=run.lr, batch_size=run.batch_size,
                                               weights=weights, seed=seed, flags=flags)
            t_res = train_teacher(t_plan, paired, unpaired, nets=nets,
                                  total_steps=teacher_steps)
            s_plan = TrainPlan.student_default(lr0=run.lr, batch_size=run.batch_size,
                                               weights=weights, seed=seed, flags=flags)
            s_res = train_student(s_plan, paired, unpaired, t_res.checkpoint,
                                  total_steps=student_steps)
            student = DehazeNet(net_cfg)
            load_weights(student, s_res.checkpoint)
            student.eval()
            rep = evaluate_pairs(lambda x: student(x).dehazed, eval_hazy, eval_clean)
            scores[variant.name].append((rep.mean_psnr, rep.mean_ssim))

    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "ablation_report.tsv")
    with open(report_path, "w") as fh:
        fh.write("variant\tmdb\tuncertainty\tkl\tmean_psnr\tstd_psnr\tmean_ssim\tstd_ssim\n")
        for variant in ABLATION_VARIANTS:
            vals = scores[variant.name]
            psnrs = np.array([p for p, _ in vals])
            ssims = np.array([s for _, s in vals])
            fh.write(f"{variant.name}\t{int(variant.use_mdb)}\t{int(variant.use_uncertainty)}"
                     f"\t{int(variant.use_kl)}\t{psnrs.mean():.4f}\t{psnrs.std():.4f}"
                     f"\t{ssims.mean():.4f}\t{ssims.std():.4f}\n")
    return report_path, scores


def cmd_ablate(args, run: RunConfig) -> int:
    seeds = [args.seed + i for i in range(args.n_seeds)]
    report_path, scores = run_ablation(args.out, seeds, args.teacher_steps,
                                       args.student_steps, run)
    with open(report_path) as fh:
        print(fh.read().rstrip())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semiuformer",
                                     description="Semi-supervised uncertainty-aware dehazing")
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("hazegen", help="generate a synthetic haze dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--paired", type=int, default=256)
    p.add_argument("--unpaired", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_hazegen)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", choices=["teacher", "student"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--teacher-ckpt")
    p.add_argument("--paired", type=int, default=256)
    p.add_argument("--unpaired", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=0)
    p.add_argument("--steps", type=int, default=None,
                   help="override the total generator step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="dehaze images with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--uncertainty", action="store_true")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM report on a synthetic eval set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--paired", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score the four ablation variants")
    p.add_argument("--out", required=True)
    p.add_argument("--n-seeds", type=int, default=3)
    p.add_argument("--teacher-steps", type=int, default=300)
    p.add_argument("--student-steps", type=int, default=120)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK

    try:
        run = load_run_config(args.config) if args.config else RunConfig()
        run = replace(run, seed=args.seed if args.seed or run.seed == 0 else run.seed)
        return args.func(args, run)
    except (_UsageError, ShapeError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
