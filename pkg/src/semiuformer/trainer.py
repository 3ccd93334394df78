"""Two-stage teacher -> student training orchestration."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import Checkpoint, LossWeights, NetConfig, save_checkpoint
from .hazedata import PairedHazeDataset, UnpairedHazeDataset
from .losses import LossFlags, ModelBundle, loss_adversarial, loss_kl, student_loss, teacher_loss
from .network import DehazeNet, PatchDiscriminator

DIVERGENCE_LIMIT = 1e3
DIVERGENCE_PATIENCE = 50


class DivergenceError(RuntimeError):
    """Training loss exceeded the divergence guard for too many steps."""


@dataclass(frozen=True)
class TrainPlan:
    stage: str = "teacher"                        # "teacher" | "student"
    epochs: int = 100
    lr0: float = 1e-4
    batch_size: int = 2
    alternation: tuple[int, int] = (5, 1)         # (supervised, unsupervised) steps per cycle
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    flags: LossFlags = field(default_factory=LossFlags)

    @staticmethod
    def teacher_default(**overrides) -> "TrainPlan":
        overrides.setdefault("alternation", (5, 1))
        overrides.setdefault("epochs", 100)
        return TrainPlan(stage="teacher", **overrides)

    @staticmethod
    def student_default(**overrides) -> "TrainPlan":
        overrides.setdefault("alternation", (1, 5))
        overrides.setdefault("epochs", 60)
        return TrainPlan(stage="student", **overrides)


def lr_at(step: int, total_steps: int, lr0: float) -> float:
    """Constant for the first half of training, then linear decay to zero."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    half = total_steps / 2.0
    if step < half:
        return lr0
    return lr0 * (1.0 - (step - half) / half)


def select_branch(step: int, alternation: tuple[int, int]) -> str:
    s, u = alternation
    if s < 0 or u < 0 or s + u < 1:
        raise ValueError(f"bad alternation ratio {alternation}")
    return "supervised" if step % (s + u) < s else "unsupervised"


class Adam:
    """Adam with bias correction, per-tensor freeze masks, and non-finite
    gradient skipping (skips are counted, the moments stay untouched)."""

    def __init__(self, params: list[torch.Tensor], beta1: float = 0.9,
                 beta2: float = 0.99, eps: float = 1e-8,
                 frozen: list[bool] | None = None):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [torch.zeros_like(p, memory_format=torch.contiguous_format) for p in self.params]
        self.v = [torch.zeros_like(p, memory_format=torch.contiguous_format) for p in self.params]
        self.t = 0
        self.frozen = list(frozen) if frozen is not None else [False] * len(self.params)
        self.skipped = 0

    @torch.no_grad()
    def step(self, grads: list[torch.Tensor | None], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v, g, frozen in zip(self.params, self.m, self.v, grads, self.frozen):
            if frozen or g is None:
                if g is None and not frozen:
                    # still decay moments so the trajectory is well-defined
                    m.mul_(self.beta1)
                    v.mul_(self.beta2)
                continue
            if not torch.isfinite(g).all():
                self.skipped += 1
                continue
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.add_(-lr * (m / bc1) / ((v / bc2).sqrt() + self.eps))

    def zero_like_grads(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(params: list[torch.Tensor], grads: list[torch.Tensor | None],
              state: Adam | None, lr: float, beta1: float = 0.9, beta2: float = 0.99,
              eps: float = 1e-8, frozen: list[bool] | None = None) -> Adam:
    """Functional wrapper: apply one Adam update, returning the (new) state."""
    if state is None:
        state = Adam(params, beta1, beta2, eps, frozen=frozen)
    state.step(grads, lr)
    return state


def network_checkpoint(net: DehazeNet, role: str, rng_state: bytes = b"") -> Checkpoint:
    tensors = {name: p.detach().cpu().numpy().astype(np.float32)
               for name, p in net.named_parameters()}
    return Checkpoint(version=1, role=role, tensors=tensors,
                      config=net.config, rng_state=rng_state)


def load_weights(net: DehazeNet, ckpt: Checkpoint) -> None:
    from .core import ConfigMismatchError

    if ckpt.config != net.config:
        raise ConfigMismatchError(
            f"checkpoint config {ckpt.config} incompatible with network {net.config}")
    with torch.no_grad():
        own = dict(net.named_parameters())
        for name, arr in ckpt.tensors.items():
            own[name].copy_(torch.from_numpy(arr))


def _total_steps(plan: TrainPlan, n_items: int) -> int:
    per_epoch = math.ceil(n_items / plan.batch_size)
    # alternation inserts unsupervised (teacher) or supervised (student) steps
    s, u = plan.alternation
    extra = u if plan.stage == "teacher" else s
    base = s if plan.stage == "teacher" else u
    return plan.epochs * math.ceil(per_epoch * (s + u) / base) if base else plan.epochs * per_epoch


def _wrap(iterator_factory, batch_size: int, seed_offset: int):
    """Endless batch stream that re-shuffles each pass."""
    epoch = 0
    while True:
        yielded = False
        for batch in iterator_factory(batch_size, epoch + seed_offset):
            yielded = True
            yield batch
        if not yielded:
            raise RuntimeError("empty dataset")
        epoch += 1


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_lines: list[str]
    final_total: float
    extra: dict = field(default_factory=dict)


def _log_step(lines, fh, step, epoch, stage, branch, lr, report):
    line = (f"{step}\t{epoch}\t{stage}\t{branch}\t{lr:.6e}\t" + report.log_line())
    lines.append(line)
    if fh is not None:
        fh.write(line + "\n")
        fh.flush()


def _run_stage(plan: TrainPlan, nets: ModelBundle, paired: PairedHazeDataset,
               unpaired: UnpairedHazeDataset, total_steps: int | None,
               log_path: str | None, held_kl: tuple | None = None) -> TrainResult:
    stage = plan.stage
    is_teacher = stage == "teacher"
    gen = nets.teacher if is_teacher else nets.student
    loss_fn = teacher_loss if is_teacher else student_loss

    if is_teacher:
        gen_params = list(gen.parameters())
        frozen = [False] * len(gen_params)
    else:
        # UEB frozen in stage 2; teacher entirely outside the optimizer
        ueb_ids = {id(p) for p in gen.ueb.parameters()}
        gen_params = list(gen.parameters())
        frozen = [id(p) in ueb_ids for p in gen_params]
    opt = Adam(gen_params, frozen=frozen)
    disc_opt = Adam(list(nets.disc.parameters()))

    if total_steps is None:
        epoch_items = len(paired) if is_teacher else len(unpaired)
        total_steps = _total_steps(plan, epoch_items)
    steps_per_epoch = max(1, total_steps // max(plan.epochs, 1))

    paired_stream = _wrap(paired.batches, plan.batch_size, 0)
    real_stream = _wrap(unpaired.batches, plan.batch_size, 0)

    teacher_params_before = None
    if not is_teacher:
        for p in nets.teacher.parameters():
            p.requires_grad_(False)
        teacher_params_before = [p.detach().clone() for p in nets.teacher.parameters()]

    lines: list[str] = []
    kl_trace: list[float] = []
    fh = open(log_path, "w") if log_path else None
    over_limit = 0
    try:
        for step in range(total_steps):
            lr = lr_at(step, total_steps, plan.lr0)
            branch = select_branch(step, plan.alternation)
            batch_syn = next(paired_stream)
            batch_real = next(real_stream)

            report = loss_fn(batch_syn, batch_real, nets, plan.weights, branch, plan.flags)
            for p in gen_params:
                p.grad = None
            report.total.backward()
            if not is_teacher:
                leaked = [p for p in nets.teacher.parameters() if p.grad is not None]
                assert not leaked, "gradient leaked into frozen teacher parameters"
            opt.step([p.grad for p in gen_params], lr)

            if branch == "supervised":
                # discriminator keeps pace with the generator's supervised steps
                with torch.no_grad():
                    fake = gen(batch_syn[0]).dehazed
                d_loss = loss_adversarial(nets.disc, fake, "discriminator", real=batch_syn[1])
                for p in nets.disc.parameters():
                    p.grad = None
                d_loss.backward()
                disc_opt.step([p.grad for p in nets.disc.parameters()], lr)

            if held_kl is not None:
                with torch.no_grad():
                    v_syn = nets.teacher(held_kl[0]).kl_embedding
                    v_real = gen(held_kl[1]).kl_embedding
                    kl_trace.append(float(loss_kl(v_real, v_syn)))

            total_val = float(report.total.detach())
            epoch = step // steps_per_epoch
            _log_step(lines, fh, step, epoch, stage, branch, lr, report)

            if not math.isfinite(total_val) or total_val > DIVERGENCE_LIMIT:
                over_limit += 1
                if over_limit >= DIVERGENCE_PATIENCE:
                    raise DivergenceError(
                        f"{stage} training diverged: total loss above {DIVERGENCE_LIMIT} "
                        f"for {DIVERGENCE_PATIENCE} consecutive steps (last={total_val:.3e})")
            else:
                over_limit = 0
    finally:
        if fh is not None:
            fh.close()

    if not is_teacher:
        for before, after in zip(teacher_params_before, nets.teacher.parameters()):
            assert torch.equal(before, after), "teacher parameters mutated during stage 2"

    ckpt = network_checkpoint(gen, stage)
    extra = {"adam_skipped": opt.skipped}
    if kl_trace:
        extra["kl_trace"] = kl_trace
    return TrainResult(checkpoint=ckpt, log_lines=lines,
                       final_total=float(report.total.detach()), extra=extra)


def train_teacher(plan: TrainPlan, paired: PairedHazeDataset, unpaired: UnpairedHazeDataset,
                  nets: ModelBundle | None = None, total_steps: int | None = None,
                  log_path: str | None = None) -> TrainResult:
    """Stage 1: trains the teacher jointly with its uncertainty head."""
    if plan.stage != "teacher":
        raise ValueError("plan.stage must be 'teacher'")
    if nets is None:
        torch.manual_seed(plan.seed)
        nets = ModelBundle(teacher=DehazeNet(), disc=PatchDiscriminator())
    return _run_stage(plan, nets, paired, unpaired, total_steps, log_path)


def train_student(plan: TrainPlan, paired: PairedHazeDataset, unpaired: UnpairedHazeDataset,
                  teacher_ckpt: Checkpoint, nets: ModelBundle | None = None,
                  total_steps: int | None = None, log_path: str | None = None,
                  held_kl_batches: tuple[torch.Tensor, torch.Tensor] | None = None) -> TrainResult:
    """Stage 2: student initialized from the teacher; teacher and UEB frozen."""
    if plan.stage != "student":
        raise ValueError("plan.stage must be 'student'")
    if teacher_ckpt is None:
        raise ValueError("student stage requires a teacher checkpoint")
    if nets is None:
        torch.manual_seed(plan.seed)
        cfg = teacher_ckpt.config
        nets = ModelBundle(teacher=DehazeNet(cfg), disc=PatchDiscriminator(),
                           student=DehazeNet(cfg))
    load_weights(nets.teacher, teacher_ckpt)
    if nets.student is None:
        nets.student = DehazeNet(teacher_ckpt.config)
    load_weights(nets.student, teacher_ckpt)
    nets.teacher.eval()
    return _run_stage(plan, nets, paired, unpaired, total_steps, log_path,
                      held_kl=held_kl_batches)


def save_stage_checkpoint(result: TrainResult, out_dir: str, epoch_tag: int) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{result.checkpoint.role}_e{epoch_tag}.sufc")
    save_checkpoint(result.checkpoint, path)
    return path
