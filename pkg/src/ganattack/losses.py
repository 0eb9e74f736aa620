"""Loss formulas: Wasserstein critic/generator losses with gradient penalty,
the auxiliary-classifier term, adversarial margin terms, the saturating
reward transform, the amalgamated finetuning loss, and stochastic selection
between the finetuning and ordinary objectives."""

from __future__ import annotations

import ast
import enum
import hashlib
from dataclasses import dataclass, fields
from typing import Callable

import torch
import torch.nn.functional as F

from .errors import BatchMismatch, InvalidLabel
from .models import GanParams


class Branch(enum.Enum):
    ORDINARY = "ordinary"
    FINETUNE = "finetune"


@dataclass(frozen=True)
class FinetuneConfig:
    """Optimization constants for pretraining and adversarial finetuning.

    mu is the attack rate: the per-step probability that the generator is
    updated from the finetuning loss instead of the ordinary GAN loss.
    kappa is the confidence margin beyond which the adversarial reward
    saturates. include_aux controls whether the auxiliary-classifier term
    participates in the per-example ordinary loss during finetuning.
    """

    mu: float = 0.1
    kappa: float = 0.0
    lambda_gp: float = 10.0
    lr: float = 5e-6
    beta1: float = 0.6
    beta2: float = 0.999
    batch: int = 100
    n_critic: int = 5
    mode: str = "untargeted"
    target: int | None = None
    include_aux: bool = True

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("attack rate mu must lie in [0, 1]")
        if self.lambda_gp < 0:
            raise ValueError("gradient-penalty weight must be non-negative")
        if self.batch < 1 or self.n_critic < 1:
            raise ValueError("batch and n_critic must be positive")
        if self.mode not in ("untargeted", "targeted"):
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.mode == "targeted" and self.target is None:
            raise ValueError("targeted mode needs a target label")

    def to_metadata(self) -> dict[str, str]:
        return {f"config.{f.name}": repr(getattr(self, f.name)) for f in fields(self)}

    @staticmethod
    def from_metadata(meta: dict[str, str]) -> "FinetuneConfig":
        kwargs = {f.name: ast.literal_eval(meta[f"config.{f.name}"])
                  for f in fields(FinetuneConfig)}
        return FinetuneConfig(**kwargs)

    def digest(self) -> str:
        text = ";".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class LossBundle:
    """One batch's loss values. l_d already includes the weighted penalty;
    the auxiliary terms are reported separately and summed into the training
    objectives by the caller."""

    l_g: torch.Tensor
    l_d: torch.Tensor
    l_gp: torch.Tensor
    l_aux_g: torch.Tensor
    l_aux_d: torch.Tensor
    per_example_ordinary: torch.Tensor
    per_example_adversarial: torch.Tensor | None = None
    l_finetune: torch.Tensor | None = None


def s_transform(value):
    """Saturating reward: 1 + exp(l) for l <= 0, else 2 + l.

    Continuous and C1 at zero (both one-sided derivatives are 1); strictly
    increasing with range (1, inf).
    """
    l = torch.as_tensor(value)
    return torch.where(l <= 0, 1.0 + torch.exp(torch.clamp(l, max=0.0)), 2.0 + l)


def adversarial_term(f_logits: torch.Tensor, labels, mode: str = "untargeted") -> torch.Tensor:
    """Per-example attack margin from the target classifier's logits.

    Untargeted: logit of the intended true label minus the best other logit;
    targeted: best non-target logit minus the target logit (labels then carry
    the target class). Negative iff the attack currently succeeds with
    positive margin; an exact tie with the runner-up gives 0.
    """
    if f_logits.ndim != 2:
        raise BatchMismatch(f"logits must be (batch, classes), got {tuple(f_logits.shape)}")
    classes = f_logits.shape[1]
    labels = torch.as_tensor(labels, dtype=torch.int64)
    if labels.ndim == 0:
        labels = labels.expand(len(f_logits))
    if len(labels) != len(f_logits):
        raise BatchMismatch("labels and logits batch sizes differ")
    if labels.numel() and (labels.min() < 0 or labels.max() >= classes):
        raise InvalidLabel(f"labels must lie in [0, {classes})")
    chosen = f_logits.gather(1, labels[:, None]).squeeze(1)
    masked = f_logits.masked_fill(
        F.one_hot(labels, classes).bool(), float("-inf"))
    best_other = masked.max(dim=1).values
    if mode == "untargeted":
        return chosen - best_other
    if mode == "targeted":
        return best_other - chosen
    raise ValueError(f"unknown attack mode {mode!r}")


def per_example_nll(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, torch.as_tensor(labels, dtype=torch.int64), reduction="none")


def aux_loss(aux_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the correct label under softmax."""
    return per_example_nll(aux_logits, labels).mean()


def finetune_loss(per_example_ordinary: torch.Tensor,
                  per_example_adversarial: torch.Tensor,
                  kappa: float = 0.0) -> torch.Tensor:
    """Batch mean of s(l_ordinary) * s(l_adversarial - kappa); always > 0."""
    ord_t = torch.as_tensor(per_example_ordinary)
    adv_t = torch.as_tensor(per_example_adversarial)
    if ord_t.shape != adv_t.shape:
        raise BatchMismatch(
            f"per-example arrays differ in shape: {tuple(ord_t.shape)} vs {tuple(adv_t.shape)}")
    return (s_transform(ord_t) * s_transform(adv_t - kappa)).mean()


def select_loss(rng: torch.Generator, mu: float) -> Branch:
    """One Bernoulli(mu) draw from the training-loop stream."""
    draw = torch.rand((), generator=rng).item()
    return Branch.FINETUNE if draw < mu else Branch.ORDINARY


def gradient_penalty(critic: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
                     real: torch.Tensor, fake: torch.Tensor, labels: torch.Tensor,
                     rng: torch.Generator | None = None) -> torch.Tensor:
    """Squared deviation of the critic's input-gradient norm from 1, averaged
    over uniform interpolations between real/fake pairs matched by index."""
    if len(real) != len(fake):
        raise BatchMismatch(f"real batch {len(real)} vs fake batch {len(fake)}")
    eps = torch.rand((len(real), 1), generator=rng, dtype=real.dtype)
    mixed = (eps * real + (1.0 - eps) * fake.detach()).detach().requires_grad_(True)
    score = critic(mixed, labels)
    grad, = torch.autograd.grad(score.sum(), mixed, create_graph=True)
    return ((grad.norm(2, dim=1) - 1.0) ** 2).mean()


def wgan_losses(gan: GanParams, real: torch.Tensor, labels: torch.Tensor,
                z: torch.Tensor, lambda_gp: float = 10.0,
                rng: torch.Generator | None = None,
                dropout_rng: torch.Generator | None = None) -> LossBundle:
    """Evaluate every loss component on one batch; generated images reuse the
    labels given to the generator.

    The bundle reports values for inspection and tests; the training loop
    builds its own graphs so generator and critic updates stay separate.
    """
    if len(real) != len(z):
        raise BatchMismatch(f"real batch {len(real)} vs latent batch {len(z)}")
    fake = gan.generator(z, labels, dropout_rng)
    critic_fake, aux_fake = gan.discriminator(fake, labels, dropout_rng)
    critic_real, aux_real = gan.discriminator(real, labels, dropout_rng)

    l_g = (-critic_fake).mean()
    l_gp = gradient_penalty(
        lambda x, y: gan.discriminator(x, y, dropout_rng)[0], real, fake, labels, rng)
    l_d = -l_g + (-critic_real).mean() + lambda_gp * l_gp
    nll_fake = per_example_nll(aux_fake, labels)
    return LossBundle(
        l_g=l_g,
        l_d=l_d,
        l_gp=l_gp,
        l_aux_g=nll_fake.mean(),
        l_aux_d=aux_loss(aux_real, labels) + nll_fake.mean(),
        per_example_ordinary=-critic_fake + nll_fake,
    )
