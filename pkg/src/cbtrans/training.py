"""Alternating adversarial training: minibatch planning, the two half-steps,
parameter averaging, checkpointing, and the full training loop.

Each step updates the discriminator first (on its adversarial loss), then the
generator side (content encoder, style encoder, mapping network, generator)
on the weighted total, then refreshes the averaged parameters. Runs are fully
determined by (seed, config, dataset): all randomness flows through the named
RNG streams and resuming from a checkpoint reproduces the uninterrupted
parameter trajectory bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from torch.optim import Adam

from .core import (Checkpoint, DatasetError, RngStreams, load_checkpoint,
                   normal_tensor, save_checkpoint)
from .losses import (LossReport, content_bottleneck_loss,
                     cycle_reconstruction_loss, discriminator_adversarial_loss,
                     generator_adversarial_loss, sample_content_noise,
                     total_objective)
from .networks import build_model

ADAM_BETAS = (0.0, 0.99)

STYLE_SOURCES = ("reference", "latent")


@dataclass
class TrainStepPlan:
    """One minibatch: inputs, target domains, and the style source."""

    x: torch.Tensor
    y: torch.Tensor
    x_ref: torch.Tensor
    y_target: torch.Tensor
    z: torch.Tensor
    style_source: str


def sample_step_plan(dataset, config, rng, step):
    """Draw a training plan from the data and latent streams.

    Inputs are uniform over the train split, target domains uniform over all
    domains (self-translation included), references come from the target
    domain, and the style source alternates reference/latent by step parity.
    The latent batch is drawn every step so stream positions do not depend
    on parity.
    """
    data = rng.data
    n_train = len(dataset.train_indices)
    if n_train == 0:
        raise DatasetError("dataset has no train entries")
    picks = data.integers(n_train, size=config.batch_size)
    rows = [dataset.train_indices[int(i)] for i in picks]
    x, y = dataset.batch(rows, rng=data)
    targets = data.integers(config.num_domains, size=config.batch_size)
    ref_rows = []
    for target in targets:
        domain_rows = dataset.train_by_domain[int(target)]
        if not domain_rows:
            raise DatasetError(
                f"domain {dataset.manifest.domains[int(target)]!r} "
                f"has no train entries")
        ref_rows.append(domain_rows[int(data.integers(len(domain_rows)))])
    x_ref, _ = dataset.batch(ref_rows, rng=data)
    z = normal_tensor(rng.latent, (config.batch_size, config.latent_dim))
    style_source = STYLE_SOURCES[step % 2]
    return TrainStepPlan(x=x, y=y, x_ref=x_ref,
                         y_target=torch.as_tensor(targets, dtype=torch.int64),
                         z=z, style_source=style_source)


class Trainer:
    """Mutable training state: model, averaged parameters, optimizers, RNG.

    ``bottleneck=False`` removes the content-noise and KL code paths entirely
    (reference build for the additivity check); the normal ablation keeps the
    paths and sets lambda_cb / sigma in the config instead.
    """

    def __init__(self, config, dataset, dtype=torch.float32, bottleneck=True):
        config.validate()
        self.config = config
        self.dataset = dataset
        self.dtype = dtype
        self.bottleneck = bottleneck
        self.rng = RngStreams(config.seed)
        self.model = build_model(config, self.rng.init, dtype)
        self.ema = {name: p.detach().clone()
                    for name, p in self.model.named_parameters()}
        gen_params, map_params, disc_params = [], [], []
        for name, param in self.model.named_parameters():
            if name.startswith("discriminator."):
                disc_params.append(param)
            elif name.startswith("mapping."):
                map_params.append(param)
            else:
                gen_params.append(param)
        self.opt_g = Adam([
            {"params": gen_params, "lr": config.lr_generator},
            {"params": map_params, "lr": config.lr_mapping},
        ], betas=ADAM_BETAS)
        self.opt_d = Adam(disc_params, lr=config.lr_discriminator,
                          betas=ADAM_BETAS)
        self.step = 0

    @classmethod
    def from_checkpoint(cls, checkpoint, dataset, dtype=torch.float32,
                        bottleneck=True):
        trainer = cls(checkpoint.config, dataset, dtype=dtype,
                      bottleneck=bottleneck)
        trainer.restore(checkpoint)
        return trainer

    # -- plan & step -------------------------------------------------------

    def sample_plan(self):
        plan = sample_step_plan(self.dataset, self.config, self.rng, self.step)
        if self.dtype != torch.float32:
            plan.x = plan.x.to(self.dtype)
            plan.x_ref = plan.x_ref.to(self.dtype)
            plan.z = plan.z.to(self.dtype)
        return plan

    def _plan_style(self, plan):
        if plan.style_source == "reference":
            return self.model.style_encoder(plan.x_ref, plan.y_target)
        return self.model.mapping(plan.z, plan.y_target)

    def _generator_content(self, x):
        content = self.model.content_encoder(x)
        if self.bottleneck:
            content = sample_content_noise(content, self.config.sigma,
                                           self.rng.content_noise)
        return content

    def discriminator_step(self, plan):
        """First half-step: update D on its adversarial loss."""
        cfg = self.config
        with torch.no_grad():
            fake = self.model.generator(self._generator_content(plan.x),
                                        self._plan_style(plan))
        adv_d = discriminator_adversarial_loss(
            self.model.discriminator, plan.x, plan.y, fake, plan.y_target,
            r1_gamma=cfg.r1_gamma)
        self.opt_d.zero_grad()
        (cfg.lambda_adv * adv_d).backward()
        self.opt_d.step()
        return float(adv_d)

    def generator_step(self, plan):
        """Second half-step: update E_c, E_s, mapping, G on the total loss."""
        cfg = self.config
        c_mean = self.model.content_encoder(plan.x)
        if self.bottleneck:
            c_gen = sample_content_noise(c_mean, cfg.sigma,
                                         self.rng.content_noise)
            cb = content_bottleneck_loss(c_mean, cfg.sigma, batched=True)
        else:
            c_gen = c_mean
            cb = torch.zeros((), dtype=self.dtype)
        fake = self.model.generator(c_gen, self._plan_style(plan))
        adv_g = generator_adversarial_loss(self.model.discriminator, fake,
                                           plan.y_target)
        rec = cycle_reconstruction_loss(
            self.model.generator, self.model.content_encoder,
            self.model.style_encoder, plan.x, plan.y, fake,
            sigma=cfg.sigma if self.bottleneck else 0.0,
            noise_rng=self.rng.content_noise if self.bottleneck else None)
        total = rec + cfg.lambda_adv * adv_g + cfg.lambda_cb * cb
        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step()
        return float(rec), float(adv_g), float(cb)

    def update_ema(self):
        decay = self.config.ema_decay
        with torch.no_grad():
            for name, param in self.model.named_parameters():
                if name.startswith("discriminator."):
                    self.ema[name].copy_(param)
                else:
                    self.ema[name].mul_(decay).add_(param, alpha=1.0 - decay)

    def train_step(self, plan):
        adv_d = self.discriminator_step(plan)
        rec, adv_g, cb = self.generator_step(plan)
        self.update_ema()
        self.step += 1
        return total_objective(rec, adv_g, adv_d, cb, self.config,
                               step=self.step)

    # -- checkpointing -----------------------------------------------------

    def _flatten_optimizer_state(self):
        names = {id(p): n for n, p in self.model.named_parameters()}
        flat = {}
        for tag, opt in (("g", self.opt_g), ("d", self.opt_d)):
            for group in opt.param_groups:
                for param in group["params"]:
                    state = opt.state.get(param)
                    if not state:
                        continue
                    for key, value in state.items():
                        tensor = value if torch.is_tensor(value) else \
                            torch.tensor(float(value))
                        flat[f"{tag}.{names[id(param)]}.{key}"] = \
                            tensor.detach().clone()
        return flat

    def _restore_optimizer_state(self, flat):
        names = {id(p): n for n, p in self.model.named_parameters()}
        for tag, opt in (("g", self.opt_g), ("d", self.opt_d)):
            for group in opt.param_groups:
                for param in group["params"]:
                    prefix = f"{tag}.{names[id(param)]}."
                    entries = {key[len(prefix):]: tensor.clone()
                               for key, tensor in flat.items()
                               if key.startswith(prefix)}
                    if entries:
                        opt.state[param] = entries

    def checkpoint(self):
        return Checkpoint(
            config=self.config,
            step=self.step,
            parameters={n: p.detach().clone()
                        for n, p in self.model.named_parameters()},
            ema_parameters={n: t.clone() for n, t in self.ema.items()},
            optimizer_state=self._flatten_optimizer_state(),
            rng_state=self.rng.state_bytes(),
        )

    def restore(self, checkpoint):
        self.model.load_state_dict(checkpoint.parameters, strict=True)
        self.ema = {name: tensor.clone().to(self.dtype)
                    for name, tensor in checkpoint.ema_parameters.items()}
        self._restore_optimizer_state(checkpoint.optimizer_state)
        self.rng.restore(checkpoint.rng_state)
        self.step = checkpoint.step


def run_training(config, dataset, out_dir, checkpoint_every=500,
                 bottleneck=True, resume=None, progress=None):
    """Run the full loop, writing checkpoints and the CSV loss log.

    Output layout: ``checkpoints/step_<N>.ckpt``, ``loss_log.csv``,
    ``config_resolved.txt``. On divergence the last written checkpoint stays
    on disk and the error propagates. Returns the final checkpoint.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        start = load_checkpoint(resume)
        config = start.config
        trainer = Trainer.from_checkpoint(start, dataset,
                                          bottleneck=bottleneck)
    else:
        config.validate()
        trainer = Trainer(config, dataset, bottleneck=bottleneck)
    (out_dir / "config_resolved.txt").write_text(config.to_text(),
                                                 encoding="utf-8")
    if trainer.step == 0:
        save_checkpoint(trainer.checkpoint(), ckpt_dir / "step_0.ckpt")
    log_path = out_dir / "loss_log.csv"
    append = resume is not None and log_path.exists()
    with open(log_path, "a" if append else "w", encoding="utf-8") as log:
        if not append:
            log.write(LossReport.CSV_HEADER + "\n")
        try:
            while trainer.step < config.total_steps:
                plan = trainer.sample_plan()
                report = trainer.train_step(plan)
                log.write(report.csv_row(trainer.step) + "\n")
                log.flush()
                if progress is not None:
                    progress(trainer.step, report)
                if checkpoint_every and trainer.step % checkpoint_every == 0 \
                        and trainer.step < config.total_steps:
                    save_checkpoint(trainer.checkpoint(),
                                    ckpt_dir / f"step_{trainer.step}.ckpt")
        except Exception:
            log.flush()
            raise
    final = trainer.checkpoint()
    save_checkpoint(final, ckpt_dir / f"step_{trainer.step}.ckpt")
    return final
