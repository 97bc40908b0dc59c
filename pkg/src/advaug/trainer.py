"""Joint optimization of the generator/discriminator/learner triplet.

Each step quarters a batch into a clean part plus one part per enabled
generator, augments the generator parts, and runs one fused backward in which
the task loss reaches the learner normally and the generators through
gradient reversal (so the same pass descends for the learner and ascends for
the generators), together with the generator-side GAN term and the magnitude
regularizers. The discriminator then gets its own backward against a second
batch of real data and the detached augmented images; all optimizers step
against the same parameter snapshot.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import ConfigError, TrainingAbort
from .generators import KINDS, AugmentationGenerator, Discriminator
from .losses import (LossReport, LossWeights, METRICS_HEADER, gan_loss_d_from_logits,
                     gan_loss_g_from_logits, grad_reverse, reg_affine, reg_appear,
                     reg_deform, task_loss)
from .target import build_target
from .warp import affine_to_flow, residual_to_flow, warp, warp_labels

GENERATOR_NET_NAMES = {"affine": "gen_affine", "deform": "gen_deform", "appearance": "gen_appearance"}


class TripletState:
    """Networks, optimizers, counters and seed bookkeeping for one run."""

    def __init__(self, config: RunConfig):
        config.validate()
        self.config = config
        d, m, o = config.dataset, config.model, config.optim
        self.task = d.resolved_task()
        self.enabled = tuple(k for k in KINDS if k in config.train.enabled_generators)

        torch.manual_seed(config.train.seed)
        self.generators = {
            kind: AugmentationGenerator(
                kind, image_channels=d.channels, image_size=d.resolution,
                noise_dim=m.noise_dim, base_width=m.base_width,
                flow_scale=m.flow_scale, mask_scale=m.mask_scale)
            for kind in self.enabled
        }
        self.discriminator = (
            Discriminator(image_channels=d.channels, image_size=d.resolution,
                          base_width=m.base_width)
            if self.enabled else None
        )
        self.target = build_target(self.task, image_channels=d.channels,
                                   num_classes=d.num_classes, image_size=d.resolution)

        self.optimizers = {}
        for kind, gen in self.generators.items():
            self.optimizers[GENERATOR_NET_NAMES[kind]] = torch.optim.Adam(
                gen.parameters(), lr=o.lr_generator, betas=o.betas_gan)
        if self.discriminator is not None:
            self.optimizers["discriminator"] = torch.optim.Adam(
                self.discriminator.parameters(), lr=o.lr_discriminator, betas=o.betas_gan)
        self.optimizers["T"] = torch.optim.Adam(
            self.target.parameters(), lr=o.lr_target, betas=o.betas_target)

        self.step = 0
        self.epoch = 0
        self.step_in_epoch = 0
        self.counters = {"fused_backward": 0, "disc_backward": 0}
        self.last_checkpoint = None

    def networks(self) -> dict[str, torch.nn.Module]:
        nets = {GENERATOR_NET_NAMES[k]: g for k, g in self.generators.items()}
        if self.discriminator is not None:
            nets["discriminator"] = self.discriminator
        nets["T"] = self.target
        return nets

    def set_train(self, training: bool = True) -> None:
        for net in self.networks().values():
            net.train(training)

    def reset_counters(self) -> None:
        self.counters = {"fused_backward": 0, "disc_backward": 0}
        for gen in self.generators.values():
            gen.forward_calls = 0
        if self.discriminator is not None:
            self.discriminator.forward_calls = 0

    def assert_finite(self) -> None:
        for name, net in self.networks().items():
            for key, t in net.state_dict().items():
                if t.is_floating_point() and not torch.isfinite(t).all():
                    raise TrainingAbort(
                        f"non-finite parameter {name}/{key} after step {self.step}",
                        self.last_checkpoint,
                    )


def split_batch(images: Tensor, labels: Tensor, kinds: tuple) -> dict:
    """Round-robin the batch into a clean part plus one part per generator kind.

    Position i goes to part i mod n_parts, with clean first, so part sizes
    differ by at most one and clean absorbs any remainder first.
    """
    part_names = ("clean",) + tuple(kinds)
    n = images.shape[0]
    if n < len(part_names):
        raise ConfigError(f"batch of {n} cannot be split into {len(part_names)} parts")
    parts = {}
    for p, name in enumerate(part_names):
        idx = torch.arange(p, n, len(part_names))
        parts[name] = (images[idx], labels[idx])
    return parts


def _set_requires_grad(module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def forward_losses(state: TripletState, images: Tensor, labels: Tensor, *,
                   reverse: bool = True) -> dict:
    """One generator forward per augmented part plus the learner/GAN/reg terms.

    With ``reverse`` the task loss is wrapped in grad_reverse on its way into
    the learner, which is what lets a single backward serve both sides of the
    learner/generator game; ``reverse=False`` exposes the raw losses for
    explicit two-pass gradient computations.
    """
    cfg = state.config
    res = cfg.dataset.resolution
    parts = split_batch(images, labels, state.enabled)
    total = images.shape[0]

    x_clean, y_clean = parts["clean"]
    l_adv = (x_clean.shape[0] / total) * task_loss(state.target(x_clean, "main"), y_clean, state.task)

    regs: dict[str, Tensor] = {}
    fakes = []
    for kind in state.enabled:
        x_part, y_part = parts[kind]
        z = torch.randn(x_part.shape[0], cfg.model.noise_dim, dtype=x_part.dtype)
        out = state.generators[kind](z, x_part)
        if kind == "affine":
            flow = affine_to_flow(out.affine, res, res)
            regs[kind] = reg_affine(flow)
            aug = warp(x_part, flow)
            y_aug = warp_labels(y_part, flow) if state.task == "segmentation" else y_part
        elif kind == "deform":
            flow = residual_to_flow(out.residual_flow)
            regs[kind] = reg_deform(out.residual_flow)
            aug = warp(x_part, flow)
            y_aug = warp_labels(y_part, flow) if state.task == "segmentation" else y_part
        else:
            regs[kind] = reg_appear(out.mask)
            aug = x_part + out.mask
            y_aug = y_part
        h = grad_reverse(aug, cfg.loss.grad_reverse_scale) if reverse else aug
        l_adv = l_adv + (x_part.shape[0] / total) * task_loss(state.target(h, kind), y_aug, state.task)
        fakes.append(aug)

    fake = torch.cat(fakes) if fakes else None
    if fake is not None:
        l_gan_g = gan_loss_g_from_logits(state.discriminator(fake), cfg.loss.gan_variant)
    else:
        l_gan_g = images.new_zeros(())
    return {"l_adv": l_adv, "l_gan_g": l_gan_g, "regs": regs, "fake": fake}


def train_step(state: TripletState, batch_images: Tensor, batch_labels: Tensor,
               real_images: Tensor) -> LossReport:
    """One Algorithm-1 step: fused (learner, generators) backward, then the
    discriminator backward, then a simultaneous optimizer step for all nets."""
    cfg = state.config
    n_parts = 1 + len(state.enabled)
    if batch_images.shape[0] // n_parts < 2:
        raise ConfigError(
            f"batch of {batch_images.shape[0]} leaves batch-norm parts smaller than 2"
        )
    state.set_train(True)
    for opt in state.optimizers.values():
        opt.zero_grad(set_to_none=True)

    out = forward_losses(state, batch_images, batch_labels, reverse=True)
    weights = LossWeights(cfg.loss.lambda_gan, cfg.loss.gamma_reg)
    l_reg_total = sum(out["regs"].values()) if out["regs"] else batch_images.new_zeros(())
    fused = out["l_adv"] + weights.lambda_gan * out["l_gan_g"] + weights.gamma_reg * l_reg_total
    if not torch.isfinite(fused):
        raise TrainingAbort(
            f"non-finite fused loss at step {state.step}", state.last_checkpoint)

    if state.discriminator is not None:
        _set_requires_grad(state.discriminator, False)
        fused.backward()
        _set_requires_grad(state.discriminator, True)
    else:
        fused.backward()
    state.counters["fused_backward"] += 1

    l_gan_d = 0.0
    if state.discriminator is not None:
        logit_real = state.discriminator(real_images)
        logit_fake = state.discriminator(out["fake"].detach())
        l_gan_d_t = gan_loss_d_from_logits(logit_real, logit_fake)
        if not torch.isfinite(l_gan_d_t):
            raise TrainingAbort(
                f"non-finite discriminator loss at step {state.step}", state.last_checkpoint)
        (-l_gan_d_t).backward()
        state.counters["disc_backward"] += 1
        l_gan_d = float(l_gan_d_t.detach())

    for opt in state.optimizers.values():
        opt.step()
    state.step += 1
    state.assert_finite()

    return LossReport.build(
        state.step, float(out["l_adv"].detach()), float(out["l_gan_g"].detach()), l_gan_d,
        {k: float(v.detach()) for k, v in out["regs"].items()}, weights)


def epoch_order(seed: int, epoch: int, stream: int, n: int) -> np.ndarray:
    """Batch order as a pure function of (seed, epoch, stream); resume-safe."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, stream]))
    return rng.permutation(n)


class Trainer:
    """Owns the optimization loop. Constructed from the training split only;
    held-out data never reaches this object."""

    def __init__(self, state: TripletState, train_images, train_labels, out_dir=None):
        self.state = state
        self.train_images = torch.as_tensor(np.asarray(train_images), dtype=torch.float32)
        self.train_labels = torch.as_tensor(np.asarray(train_labels), dtype=torch.int64)
        if self.train_images.shape[0] != self.train_labels.shape[0]:
            raise ConfigError("train images and labels disagree on sample count")
        if self.train_images.shape[0] < state.config.train.batch_size:
            raise ConfigError("training split smaller than one batch")
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    @property
    def metrics_path(self):
        return None if self.out_dir is None else self.out_dir / "metrics.csv"

    def _save(self, name: str) -> None:
        if self.out_dir is None:
            return
        path = save_checkpoint(self.out_dir / name, self.state)
        save_checkpoint(self.out_dir / "checkpoint_last.npz", self.state)
        self.state.last_checkpoint = str(path)

    def fit(self, resume_from=None) -> list[LossReport]:
        state, cfg = self.state, self.state.config
        n = self.train_images.shape[0]
        batch = cfg.train.batch_size
        steps_per_epoch = n // batch
        if cfg.train.epochs > 0 and steps_per_epoch < 1:
            raise ConfigError("training split smaller than one batch")

        if resume_from is not None:
            load_checkpoint(resume_from, state)
            need_header = self.metrics_path is not None and not self.metrics_path.exists()
            if self.metrics_path is not None and self.metrics_path.exists():
                _truncate_metrics(self.metrics_path, state.step)
            csv_mode = "a"
        else:
            csv_mode = "w"
            need_header = True
            self._save("checkpoint_epoch0000.npz")

        metrics_file = None
        if self.metrics_path is not None:
            metrics_file = open(self.metrics_path, csv_mode)
            if need_header:
                metrics_file.write(METRICS_HEADER + "\n")
                metrics_file.flush()

        history: list[LossReport] = []
        try:
            start_epoch = state.epoch
            for epoch in range(start_epoch, cfg.train.epochs):
                order1 = epoch_order(cfg.train.seed, epoch, 0, n)
                order2 = epoch_order(cfg.train.seed, epoch, 1, n)
                first = state.step_in_epoch if epoch == start_epoch else 0
                for s in range(first, steps_per_epoch):
                    i1 = order1[s * batch:(s + 1) * batch]
                    i2 = order2[s * batch:(s + 1) * batch]
                    report = train_step(state, self.train_images[i1],
                                        self.train_labels[i1], self.train_images[i2])
                    state.step_in_epoch = s + 1
                    history.append(report)
                    if metrics_file is not None:
                        metrics_file.write(report.csv_row() + "\n")
                        metrics_file.flush()
                    if state.step % cfg.train.checkpoint_every == 0:
                        self._save(f"checkpoint_step{state.step:07d}.npz")
                state.epoch = epoch + 1
                state.step_in_epoch = 0
                self._save(f"checkpoint_epoch{state.epoch:04d}.npz")
            self._save("checkpoint_final.npz")
        finally:
            if metrics_file is not None:
                metrics_file.close()
        state.set_train(False)
        return history


def _truncate_metrics(path: Path, max_step: int) -> None:
    """Drop metric rows past the resume point so the CSV stays consistent."""
    with open(path) as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= max_step]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)
