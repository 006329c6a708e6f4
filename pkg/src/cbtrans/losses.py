"""Objective terms: cycle reconstruction, adversarial pair, content bottleneck.

Every term is a scalar-valued function usable standalone; the training loop
combines them as ``total_g = rec + lambda_adv * adv_g + lambda_cb * cb`` and
``total_d = lambda_adv * adv_d``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import DivergenceError, normal_tensor


@dataclass
class LossReport:
    """Per-step loss record; mirrors the CSV training log columns."""

    rec: float
    adv_g: float
    adv_d: float
    cb: float
    total_g: float
    total_d: float

    CSV_HEADER = "step,rec,adv_g,adv_d,cb,total_g,total_d"

    def csv_row(self, step):
        return (f"{step},{self.rec!r},{self.adv_g!r},{self.adv_d!r},"
                f"{self.cb!r},{self.total_g!r},{self.total_d!r}")


def content_bottleneck_loss(c_mean, sigma, batched=False):
    """KL divergence between N(c_mean, sigma^2 I) and N(0, sigma^2 I).

    With equal covariances the divergence is ||c_mean||^2 / (2 sigma^2),
    computed in closed form. With ``batched=True`` the leading dimension
    indexes samples: the squared norm is taken per sample and averaged.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if not torch.isfinite(c_mean).all():
        raise ValueError("content code contains non-finite values")
    squared = c_mean.pow(2)
    if batched:
        norm_sq = squared.flatten(1).sum(dim=1).mean()
    else:
        norm_sq = squared.sum()
    return norm_sq / (2.0 * sigma ** 2)


def sample_content_noise(c_mean, sigma, rng):
    """Reparameterized draw c_mean + z, z ~ N(0, sigma^2 I) elementwise.

    The noise comes from the content-noise stream and carries no gradient,
    so d(output)/d(c_mean) is the identity.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    noise = normal_tensor(rng, c_mean.shape, scale=sigma, dtype=c_mean.dtype)
    return c_mean + noise


def discriminator_adversarial_loss(disc, real_x, real_y, fake_x, fake_y,
                                   r1_gamma=0.0):
    """Discriminator side of the adversarial objective (logit cross-entropy).

    ``-log D(real)`` + ``-log(1 - D(fake))`` with the fake detached, plus the
    optional R1 penalty gamma/2 * ||grad_x D(real)||^2.
    """
    real_input = real_x
    if r1_gamma > 0:
        real_input = real_x.detach().requires_grad_(True)
    logit_real = disc(real_input, real_y)
    logit_fake = disc(fake_x.detach(), fake_y)
    loss = F.softplus(-logit_real).mean() + F.softplus(logit_fake).mean()
    if r1_gamma > 0:
        (grad,) = torch.autograd.grad(logit_real.sum(), real_input,
                                      create_graph=True)
        penalty = grad.pow(2).flatten(1).sum(dim=1).mean()
        loss = loss + 0.5 * r1_gamma * penalty
    return loss


def generator_adversarial_loss(disc, fake_x, fake_y):
    """Non-saturating generator loss ``-log D(fake)``."""
    return F.softplus(-disc(fake_x, fake_y)).mean()


def adversarial_losses(disc, real_x, real_y, fake_x, fake_y, r1_gamma=0.0):
    """Both adversarial sides evaluated on the same real/fake pair."""
    adv_d = discriminator_adversarial_loss(disc, real_x, real_y, fake_x,
                                           fake_y, r1_gamma=r1_gamma)
    adv_g = generator_adversarial_loss(disc, fake_x, fake_y)
    return adv_d, adv_g


def cycle_reconstruction_loss(gen, content_enc, style_enc, x, y, x_translated,
                              sigma=0.0, noise_rng=None):
    """Mean absolute error between x and its cycle through the translation.

    The cycle re-encodes the translated image's content, pairs it with the
    style of the original image, and decodes; during training the re-encoded
    content receives the same reparameterized noise as every other
    generator-bound code (pass sigma and noise_rng), at inference it is used
    as the mean.
    """
    if x.shape != x_translated.shape:
        raise ValueError(
            f"shape mismatch: x {tuple(x.shape)} vs translated "
            f"{tuple(x_translated.shape)}")
    style = style_enc(x, y)
    content = content_enc(x_translated)
    if sigma > 0 and noise_rng is not None:
        content = sample_content_noise(content, sigma, noise_rng)
    recon = gen(content, style)
    return (recon - x).abs().mean()


def total_objective(rec, adv_g, adv_d, cb, config, step=None):
    """Combine the weighted terms into a LossReport; non-finite values raise."""
    values = {"rec": float(rec), "adv_g": float(adv_g),
              "adv_d": float(adv_d), "cb": float(cb)}
    for name, value in values.items():
        if value != value or value in (float("inf"), float("-inf")):
            raise DivergenceError(f"non-finite loss component {name}", step=step)
    total_g = (values["rec"] + config.lambda_adv * values["adv_g"]
               + config.lambda_cb * values["cb"])
    total_d = config.lambda_adv * values["adv_d"]
    return LossReport(rec=values["rec"], adv_g=values["adv_g"],
                      adv_d=values["adv_d"], cb=values["cb"],
                      total_g=total_g, total_d=total_d)
