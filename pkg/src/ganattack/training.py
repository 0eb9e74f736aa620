"""Training loops: GAN pretraining, adversarial finetuning against a frozen
target, the arms-race defense protocol, and target-classifier fitting.

All randomness flows through four named, serializable generator streams
(data order, latent noise, loss selection, dropout), so every trajectory is
fully determined by (seed, config) and resumable from a checkpoint.
"""

from __future__ import annotations

import copy
import hashlib
import os
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import diagnostics
from .datasets import LabeledDataset
from .errors import FrozenViolation, NonFiniteLoss
from .losses import (
    Branch,
    FinetuneConfig,
    adversarial_term,
    aux_loss,
    finetune_loss,
    gradient_penalty,
    per_example_nll,
    select_loss,
)
from .models import (
    GanParams,
    GanSpec,
    TargetClassifier,
    build_gan,
    classifier_registry,
    generate,
    load_arrays,
    load_module_arrays,
    module_arrays,
    save_arrays,
    spec_from_metadata,
    spec_metadata,
)

STATE_FORMAT = "1"


def derived_seed(*parts) -> int:
    """Stable, well-separated 63-bit seed from arbitrary labels."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


_STREAM_NAMES = ("data", "z", "select", "dropout")


@dataclass
class RngStreams:
    data: torch.Generator
    z: torch.Generator
    select: torch.Generator
    dropout: torch.Generator

    @staticmethod
    def create(seed: int) -> "RngStreams":
        return RngStreams(*(
            torch.Generator().manual_seed(derived_seed(seed, name))
            for name in _STREAM_NAMES))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"rng.{name}": getattr(self, name).get_state().numpy().copy()
                for name in _STREAM_NAMES}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in _STREAM_NAMES:
            getattr(self, name).set_state(
                torch.from_numpy(np.ascontiguousarray(arrays[f"rng.{name}"])))


@dataclass
class TrainState:
    gan: GanParams
    config: FinetuneConfig
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    rng: RngStreams
    step: int
    seed: int

    @property
    def config_hash(self) -> str:
        return self.config.digest()


def _make_optimizers(gan: GanParams, config: FinetuneConfig):
    betas = (config.beta1, config.beta2)
    return (torch.optim.Adam(gan.generator.parameters(), lr=config.lr, betas=betas),
            torch.optim.Adam(gan.discriminator.parameters(), lr=config.lr, betas=betas))


def init_train_state(spec: GanSpec, config: FinetuneConfig, seed: int) -> TrainState:
    gan = build_gan(spec, derived_seed(seed, "init"))
    opt_g, opt_d = _make_optimizers(gan, config)
    return TrainState(gan, config, opt_g, opt_d, RngStreams.create(seed), step=0, seed=seed)


def _optimizer_arrays(opt: torch.optim.Adam, module: nn.Module, prefix: str) -> dict:
    out = {}
    for name, param in module.named_parameters():
        st = opt.state.get(param)
        if not st:
            continue
        out[f"{prefix}.{name}.exp_avg"] = st["exp_avg"].detach().numpy().copy()
        out[f"{prefix}.{name}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy().copy()
        out[f"{prefix}.{name}.step"] = np.asarray(float(st["step"]), dtype=np.float64)
    return out


def _load_optimizer(opt: torch.optim.Adam, module: nn.Module,
                    arrays: dict, prefix: str) -> None:
    for name, param in module.named_parameters():
        key = f"{prefix}.{name}.exp_avg"
        if key not in arrays:
            continue
        opt.state[param] = {
            "step": torch.tensor(float(arrays[f"{prefix}.{name}.step"]), dtype=torch.float32),
            "exp_avg": torch.from_numpy(np.ascontiguousarray(arrays[key])),
            "exp_avg_sq": torch.from_numpy(
                np.ascontiguousarray(arrays[f"{prefix}.{name}.exp_avg_sq"])),
        }


def state_arrays(state: TrainState) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    arrays = {}
    arrays.update(module_arrays(state.gan.generator, "gan.generator"))
    arrays.update(module_arrays(state.gan.discriminator, "gan.discriminator"))
    arrays.update(_optimizer_arrays(state.opt_g, state.gan.generator, "opt_g"))
    arrays.update(_optimizer_arrays(state.opt_d, state.gan.discriminator, "opt_d"))
    arrays.update(state.rng.state_arrays())
    metadata = {"format": STATE_FORMAT, "step": str(state.step), "seed": str(state.seed),
                "config_hash": state.config_hash}
    metadata.update(state.config.to_metadata())
    metadata.update(spec_metadata(state.gan.spec))
    return arrays, metadata


def state_from_arrays(arrays: dict[str, np.ndarray], metadata: dict[str, str]) -> TrainState:
    spec = spec_from_metadata(metadata)
    config = FinetuneConfig.from_metadata(metadata)
    gan = build_gan(spec, 0)
    load_module_arrays(gan.generator, arrays, "gan.generator")
    load_module_arrays(gan.discriminator, arrays, "gan.discriminator")
    opt_g, opt_d = _make_optimizers(gan, config)
    _load_optimizer(opt_g, gan.generator, arrays, "opt_g")
    _load_optimizer(opt_d, gan.discriminator, arrays, "opt_d")
    rng = RngStreams.create(int(metadata["seed"]))
    rng.load_state_arrays(arrays)
    return TrainState(gan, config, opt_g, opt_d, rng,
                      step=int(metadata["step"]), seed=int(metadata["seed"]))


def save_state(state: TrainState, directory) -> None:
    arrays, metadata = state_arrays(state)
    save_arrays(directory, arrays, metadata)


def load_state(directory) -> TrainState:
    return state_from_arrays(*load_arrays(directory))


def clone_state(state: TrainState) -> TrainState:
    return state_from_arrays(*state_arrays(state))


def state_checksum(state: TrainState) -> str:
    arrays, metadata = state_arrays(state)
    digest = hashlib.sha256()
    for name in sorted(arrays):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arrays[name]).tobytes())
    digest.update(metadata["step"].encode())
    return digest.hexdigest()


METRIC_COLUMNS = ("step", "l_g", "l_d", "l_gp", "l_aux", "l_finetune",
                  "branch", "fooling_rate", "conflict_projection")


class MetricsLog:
    """Per-step training metrics, written as an append-only CSV."""

    def __init__(self):
        self.rows: list[dict] = []

    def append(self, **kw) -> None:
        self.rows.append(kw)

    def write_csv(self, path, append: bool = False) -> None:
        fresh = not (append and os.path.exists(path))
        with open(path, "a" if append else "w") as fh:
            if fresh:
                fh.write(",".join(METRIC_COLUMNS) + "\n")
            for row in self.rows:
                cells = []
                for col in METRIC_COLUMNS:
                    value = row.get(col)
                    cells.append("" if value is None else
                                 (value if isinstance(value, str) else repr(value)))
                fh.write(",".join(cells) + "\n")


def _check_finite(value: float, what: str, step: int, extra: dict | None = None) -> None:
    if not np.isfinite(value):
        detail = "; " + ", ".join(f"{k}={v:.6g}" for k, v in extra.items()) if extra else ""
        raise NonFiniteLoss(f"step {step}: {what} = {value}{detail}")


def _dataset_tensors(dataset: LabeledDataset):
    return (torch.from_numpy(dataset.pixels), torch.from_numpy(dataset.labels))


def _sample_batch(pixels, labels, batch, rng):
    idx = torch.randint(len(pixels), (batch,), generator=rng)
    return pixels[idx], labels[idx]


def _set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def fooling_rate(gan: GanParams, f: TargetClassifier, config: FinetuneConfig,
                 batch: int, seed: int) -> float:
    """Fraction of freshly generated examples whose computed label satisfies
    the attack condition (misclassified, or matching the target)."""
    rng = torch.Generator().manual_seed(derived_seed(seed, "fooling"))
    labels = torch.arange(batch, dtype=torch.int64) % gan.spec.class_count
    z = torch.randn((batch, gan.spec.latent_dim), generator=rng)
    predicted = f.predict(generate(gan, z, labels))
    if config.mode == "targeted":
        return float(np.mean(predicted == config.target))
    return float(np.mean(predicted != labels.numpy()))


def _run_steps(state: TrainState, dataset: LabeledDataset, steps: int, *,
               mu: float, f: TargetClassifier | None = None,
               metrics: MetricsLog | None = None,
               conflict_out: list | None = None, conflict_every: int = 0,
               eval_every: int = 0, eval_batch: int = 512) -> TrainState:
    cfg = state.config
    pixels, labels_all = _dataset_tensors(dataset)
    spec = state.gan.spec
    gen, disc = state.gan.generator, state.gan.discriminator
    lambda_gp = cfg.lambda_gp

    for _ in range(steps):
        state.gan.train()
        rng = state.rng

        # critic updates; the discriminator trains from its own loss every step
        for _ in range(cfg.n_critic):
            x, y = _sample_batch(pixels, labels_all, cfg.batch, rng.data)
            z = torch.randn((cfg.batch, spec.latent_dim), generator=rng.z)
            with torch.no_grad():
                fake = gen(z, y, dropout_rng=rng.dropout)
            critic_real, aux_real = disc(x, y, dropout_rng=rng.dropout)
            critic_fake, aux_fake = disc(fake, y, dropout_rng=rng.dropout)
            gp = gradient_penalty(
                lambda a, b: disc(a, b, dropout_rng=rng.dropout), x, fake, y, rng=rng.z)
            l_d = critic_fake.mean() - critic_real.mean() + lambda_gp * gp
            l_aux_d = aux_loss(aux_real, y) + aux_loss(aux_fake, y)
            total_d = l_d + l_aux_d
            _check_finite(total_d.item(), "critic loss", state.step,
                          {"l_d": l_d.item(), "l_gp": gp.item()})
            state.opt_d.zero_grad(set_to_none=True)
            total_d.backward()
            state.opt_d.step()

        # one Bernoulli(mu) draw per generator step
        branch = select_loss(rng.select, mu)

        _set_requires_grad(disc, False)
        z = torch.randn((cfg.batch, spec.latent_dim), generator=rng.z)
        y = torch.randint(spec.class_count, (cfg.batch,), generator=rng.z)
        fake = gen(z, y, dropout_rng=rng.dropout)
        critic_fake, aux_fake = disc(fake, y, dropout_rng=rng.dropout)
        per_ord = -critic_fake
        if cfg.include_aux:
            per_ord = per_ord + per_example_nll(aux_fake, y)
        l_finetune_value = None
        if branch is Branch.FINETUNE:
            assert f is not None, "finetune branch drawn without a target classifier"
            logits = f.logits(fake)
            adv_labels = y if cfg.mode == "untargeted" else cfg.target
            per_adv = adversarial_term(logits, adv_labels, cfg.mode)
            loss_g = finetune_loss(per_ord, per_adv, cfg.kappa)
            l_finetune_value = loss_g.item()
        else:
            loss_g = per_ord.mean()
        _check_finite(loss_g.item(), "generator loss", state.step)
        state.opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        state.opt_g.step()
        _set_requires_grad(disc, True)

        state.step += 1

        rate = None
        if eval_every and f is not None and state.step % eval_every == 0:
            rate = fooling_rate(state.gan, f, cfg, eval_batch,
                                derived_seed(state.seed, "eval", state.step))
        projection = None
        if conflict_every and f is not None and state.step % conflict_every == 0:
            sample = diagnostics.measure_conflict(
                state.gan, f, cfg, cfg.batch,
                derived_seed(state.seed, "conflict", state.step), step=state.step)
            if sample is not None:
                projection = sample.projection
                if conflict_out is not None:
                    conflict_out.append(sample)
        if metrics is not None:
            metrics.append(step=state.step, l_g=(-critic_fake).mean().item(),
                           l_d=l_d.item(), l_gp=gp.item(), l_aux=l_aux_d.item(),
                           l_finetune=l_finetune_value, branch=branch.value,
                           fooling_rate=rate, conflict_projection=projection)
    state.gan.eval()
    return state


def pretrain(dataset: LabeledDataset, spec: GanSpec, config: FinetuneConfig,
             steps: int, seed: int = 0, *, state: TrainState | None = None,
             metrics: MetricsLog | None = None) -> TrainState:
    """Train the GAN from the ordinary objective only (attack rate forced to 0).

    Pass a previously saved state to resume; the continued trajectory is
    identical to an uninterrupted run.
    """
    if state is None:
        state = init_train_state(spec, config, seed)
    return _run_steps(state, dataset, steps, mu=0.0, metrics=metrics)


def finetune(state: TrainState, f: TargetClassifier, dataset: LabeledDataset,
             config: FinetuneConfig, steps: int, *,
             metrics: MetricsLog | None = None,
             conflict_out: list | None = None, conflict_every: int = 0,
             eval_every: int = 0, eval_batch: int = 512) -> TrainState:
    """Adversarially finetune a (pre)trained GAN against a frozen classifier.

    The generator is updated from the finetuning loss with probability mu and
    from the ordinary loss otherwise; the critic keeps training on real data
    every step. Any change to f's parameters is a hard failure. Adam moments
    carry over from pretraining; lr/betas are re-pointed at config's values.
    """
    before = f.checksum()
    state.config = config
    for opt in (state.opt_g, state.opt_d):
        for group in opt.param_groups:
            group["lr"] = config.lr
            group["betas"] = (config.beta1, config.beta2)
    _run_steps(state, dataset, steps, mu=config.mu, f=f,
               metrics=metrics, conflict_out=conflict_out,
               conflict_every=conflict_every, eval_every=eval_every,
               eval_batch=eval_batch)
    if f.checksum() != before:
        raise FrozenViolation("target classifier parameters changed during finetuning")
    return state


# --- target-classifier fitting ---


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float = 0.1
    alpha: float = 0.025
    steps: int = 10
    random_start: bool = True


def pgd_attack(net: nn.Module, x: torch.Tensor, y: torch.Tensor, pgd: PgdConfig,
               rng: torch.Generator | None = None) -> torch.Tensor:
    """l-inf projected-gradient attack, clamped to the data range [-1, 1]."""
    if pgd.random_start:
        noise = (torch.rand(x.shape, generator=rng) * 2.0 - 1.0) * pgd.epsilon
        adv = torch.clamp(x + noise, -1.0, 1.0)
    else:
        adv = x.clone()
    for _ in range(pgd.steps):
        adv = adv.detach().requires_grad_(True)
        loss = F.cross_entropy(net(adv), y)
        grad, = torch.autograd.grad(loss, adv)
        adv = adv.detach() + pgd.alpha * grad.sign()
        adv = torch.clamp(torch.clamp(adv, x - pgd.epsilon, x + pgd.epsilon), -1.0, 1.0)
    return adv.detach()


def accuracy(net: nn.Module, x: torch.Tensor, y: torch.Tensor, batch: int = 1024) -> float:
    net.eval()
    hits = 0
    with torch.no_grad():
        for start in range(0, len(x), batch):
            logits = net(x[start:start + batch])
            hits += int((logits.argmax(dim=1) == y[start:start + batch]).sum())
    return hits / len(x)


@dataclass
class FitResult:
    accuracy: float
    epochs_run: int


def fit_classifier(net: nn.Module, x: torch.Tensor, y: torch.Tensor, *,
                   epochs: int, batch: int = 128, lr: float = 1e-3, seed: int = 0,
                   optimizer: torch.optim.Optimizer | None = None,
                   pgd: PgdConfig | None = None,
                   stop_accuracy: float | None = None) -> FitResult:
    """Cross-entropy training over shuffled epochs; with pgd set, every batch
    is replaced by its adversarial counterpart (standard adversarial training).
    Stops early once full-pool accuracy reaches stop_accuracy."""
    opt = optimizer or torch.optim.Adam(net.parameters(), lr=lr)
    rng = torch.Generator().manual_seed(derived_seed(seed, "classifier-fit"))
    net.train()
    acc, epochs_run = 0.0, 0
    for epoch in range(epochs):
        order = torch.randperm(len(x), generator=rng)
        for start in range(0, len(x), batch):
            idx = order[start:start + batch]
            xb, yb = x[idx], y[idx]
            if pgd is not None:
                xb = pgd_attack(net, xb, yb, pgd, rng=rng)
            loss = F.cross_entropy(net(xb), yb)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            net.train()
        epochs_run = epoch + 1
        acc = accuracy(net, x, y)
        net.train()
        if stop_accuracy is not None and acc >= stop_accuracy:
            break
    net.eval()
    return FitResult(accuracy=acc, epochs_run=epochs_run)


def train_target(name: str, dataset: LabeledDataset, *, seed: int = 0,
                 epochs: int = 30, batch: int = 128, lr: float = 1e-3,
                 pgd: PgdConfig | None = None) -> TargetClassifier:
    """Train one of the in-repo registry classifiers from scratch on a dataset."""
    entry = classifier_registry(name)
    if not entry.in_repo:
        raise ValueError(f"{name} is import-only; load it from a checkpoint container")
    net = entry.build(dataset.input_dim, dataset.class_count,
                      seed=derived_seed(seed, "target-init", name))
    x, y = _dataset_tensors(dataset)
    if name == "pgd-trained":
        pgd = pgd or PgdConfig()
    fit_classifier(net, x, y, epochs=epochs, batch=batch, lr=lr, seed=seed, pgd=pgd)
    measured = None
    epsilon = None
    if pgd is not None:
        probe = torch.Generator().manual_seed(derived_seed(seed, "robust-probe"))
        subset = torch.randperm(len(x), generator=probe)[:512]
        adv = pgd_attack(net, x[subset], y[subset], pgd, rng=probe)
        measured = 100.0 * accuracy(net, adv, y[subset])  # empirical, not certified
        epsilon = pgd.epsilon
    return entry.wrap(net, dataset.input_dim, dataset.class_count,
                      epsilon=epsilon, measured_pct=measured)


# --- arms race ---


@dataclass(frozen=True)
class ArmsRaceConfig:
    rounds: int = 6
    finetune_steps: int = 500
    mu: float = 0.4
    gen_count: int = 8000
    epochs_per_round: int = 30
    classifier_batch: int = 128
    classifier_lr: float = 1e-3
    stop_accuracy: float = 0.995
    eval_batch: int = 2048
    seed: int = 0


@dataclass
class RoundRecord:
    round_index: int
    fooling_rate_post_finetune: float
    fooling_rate_post_defense: float
    pool_size: int
    classifier_train_accuracy: float
    gan_reset_checksum: str
    gan_checkpoint: str | None = None
    classifier_checkpoint: str | None = None


ROUND_COLUMNS = ("round", "fooling_post_finetune", "fooling_post_defense",
                 "pool_size", "classifier_train_accuracy")


def write_round_csv(records: list[RoundRecord], path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(ROUND_COLUMNS) + "\n")
        for r in records:
            fh.write(f"{r.round_index},{r.fooling_rate_post_finetune!r},"
                     f"{r.fooling_rate_post_defense!r},{r.pool_size},"
                     f"{r.classifier_train_accuracy!r}\n")


def _generate_pool(gan: GanParams, count: int, batch: int, seed: int):
    """Untargeted attack examples labeled with their intended true labels."""
    rng = torch.Generator().manual_seed(seed)
    classes = gan.spec.class_count
    images, labels = [], []
    produced = 0
    while produced < count:
        n = min(batch, count - produced)
        y = (torch.arange(produced, produced + n, dtype=torch.int64)) % classes
        z = torch.randn((n, gan.spec.latent_dim), generator=rng)
        images.append(generate(gan, z, y))
        labels.append(y)
        produced += n
    return torch.cat(images), torch.cat(labels)


def _frozen_view(classifier_net: nn.Module, template: TargetClassifier) -> TargetClassifier:
    return TargetClassifier(copy.deepcopy(classifier_net), template.meta,
                            template.input_dim, template.class_count)


def arms_race(classifier: TargetClassifier, classifier_net: nn.Module,
              pretrained: TrainState, dataset: LabeledDataset,
              config: ArmsRaceConfig,
              finetune_config: FinetuneConfig | None = None,
              round_hook=None) -> list[RoundRecord]:
    """Iterate attack/defense rounds from a clean-data-converged classifier.

    Per round: (1) reset the GAN to the pretrained checkpoint bit-exactly and
    finetune it against the current classifier; (2) append freshly generated
    untargeted examples to the cumulative pool; (3) continue classifier
    training over the whole pool until near-perfect accuracy; (4) record
    fooling rates before and after the defense step.

    classifier_net is the live trainable network; `classifier` supplies the
    frozen metadata template. The classifier optimizer persists across rounds.
    """
    snapshot = state_arrays(pretrained)
    snapshot_checksum = state_checksum(pretrained)
    base_config = finetune_config or pretrained.config
    ft_config = replace(base_config, mu=config.mu)

    pool_x, pool_y = _dataset_tensors(dataset)
    clf_opt = torch.optim.Adam(classifier_net.parameters(), lr=config.classifier_lr)
    records: list[RoundRecord] = []

    for round_index in range(1, config.rounds + 1):
        state = state_from_arrays(*snapshot)  # reset to pretrained, bit-exact
        reset_checksum = state_checksum(state)
        assert reset_checksum == snapshot_checksum

        f_attack = _frozen_view(classifier_net, classifier)
        finetune(state, f_attack, dataset, ft_config, config.finetune_steps)
        eval_seed = derived_seed(config.seed, "arms-eval", round_index)
        post_finetune = fooling_rate(state.gan, f_attack, ft_config,
                                     config.eval_batch, eval_seed)

        new_x, new_y = _generate_pool(state.gan, config.gen_count, base_config.batch,
                                      derived_seed(config.seed, "arms-gen", round_index))
        pool_x = torch.cat([pool_x, new_x])
        pool_y = torch.cat([pool_y, new_y])

        fit = fit_classifier(classifier_net, pool_x, pool_y,
                             epochs=config.epochs_per_round,
                             batch=config.classifier_batch,
                             optimizer=clf_opt,
                             seed=derived_seed(config.seed, "arms-fit", round_index),
                             stop_accuracy=config.stop_accuracy)

        f_defended = _frozen_view(classifier_net, classifier)
        post_defense = fooling_rate(state.gan, f_defended, ft_config,
                                    config.eval_batch, eval_seed)

        record = RoundRecord(round_index, post_finetune, post_defense,
                             pool_size=len(pool_x),
                             classifier_train_accuracy=fit.accuracy,
                             gan_reset_checksum=reset_checksum)
        if round_hook is not None:
            round_hook(round_index, state, classifier_net, record)
        records.append(record)
    return records
