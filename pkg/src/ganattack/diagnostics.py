"""Measurements around training: the cosine between the ordinary and
adversarial generator gradients, its random-direction baseline, oracle-based
label agreement, and automated realism proxies."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import EmptyInput, ZeroGradient
from .losses import FinetuneConfig, adversarial_term, per_example_nll
from .models import GanParams, TargetClassifier


@dataclass(frozen=True)
class ConflictSample:
    step: int
    projection: float  # cosine in [-1, 1]
    grad_norm_ordinary: float
    grad_norm_adversarial: float


def conflict_projection(grad_a, grad_b) -> float:
    """Cosine of the angle between two flat gradient vectors."""
    a = np.asarray(grad_a, dtype=np.float64).ravel()
    b = np.asarray(grad_b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"gradient lengths differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroGradient("cannot project a zero gradient")
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class BaselineSummary:
    dim: int
    trials: int
    mean_abs_cos: float
    frac_exceeding: float
    threshold: float

    @staticmethod
    def expected_mean_abs_cos(dim: int) -> float:
        """Asymptotic mean |cos| between independent isotropic directions."""
        return math.sqrt(2.0 / (math.pi * dim))


def random_projection_baseline(dim: int, trials: int, seed: int,
                               threshold: float = 1e-3,
                               chunk_elements: int = 4_000_000) -> BaselineSummary:
    """Monte Carlo over pairs of independent standard-normal vectors."""
    if dim < 2:
        raise ValueError("dim must be at least 2")
    rng = np.random.default_rng(seed)
    per_chunk = max(1, chunk_elements // dim)
    done, abs_sum, exceed = 0, 0.0, 0
    while done < trials:
        n = min(per_chunk, trials - done)
        u = rng.standard_normal((n, dim))
        v = rng.standard_normal((n, dim))
        cos = (u * v).sum(axis=1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        abs_cos = np.abs(cos)
        abs_sum += float(abs_cos.sum())
        exceed += int((abs_cos > threshold).sum())
        done += n
    return BaselineSummary(dim, trials, abs_sum / trials, exceed / trials, threshold)


def measure_conflict(gan: GanParams, f: TargetClassifier, config: FinetuneConfig,
                     batch: int, seed: int, step: int = 0) -> ConflictSample | None:
    """Generator-parameter gradients of the ordinary and adversarial terms on
    one shared minibatch, projected onto each other.

    Side-effect-free on training: runs in evaluation mode with its own seeded
    stream and touches neither optimizer state nor the four training streams.
    Returns None (to be counted and skipped) if either gradient vanishes.
    """
    gen, disc = gan.generator, gan.discriminator
    was_training = gen.training
    gan.eval()
    try:
        rng = torch.Generator().manual_seed(seed)
        spec = gan.spec
        z = torch.randn((batch, spec.latent_dim), generator=rng)
        y = torch.randint(spec.class_count, (batch,), generator=rng)
        fake = gen(z, y)
        critic_fake, aux_fake = disc(fake, y)
        per_ord = -critic_fake
        if config.include_aux:
            per_ord = per_ord + per_example_nll(aux_fake, y)
        l_ordinary = per_ord.mean()
        adv_labels = y if config.mode == "untargeted" else config.target
        l_adversarial = adversarial_term(f.logits(fake), adv_labels, config.mode).mean()

        params = [p for p in gen.parameters()]
        grad_ord = torch.autograd.grad(l_ordinary, params, retain_graph=True,
                                       allow_unused=True)
        grad_adv = torch.autograd.grad(l_adversarial, params, allow_unused=True)

        def flat(grads):
            return torch.cat([
                (g if g is not None else torch.zeros_like(p)).reshape(-1)
                for g, p in zip(grads, params)]).detach().numpy()

        a, b = flat(grad_ord), flat(grad_adv)
        na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
        if na == 0.0 or nb == 0.0:
            return None
        return ConflictSample(step, float(np.dot(a, b) / (na * nb)), na, nb)
    finally:
        if was_training:
            gan.train()


def conflict_trace(state, f: TargetClassifier, dataset, config: FinetuneConfig,
                   steps: int, every_k_steps: int) -> list[ConflictSample]:
    """Finetune for `steps`, sampling the conflict projection every k steps.

    Trains the given state in place; the measurements themselves do not
    perturb the trajectory (checkpoints match a run with tracing disabled).
    """
    from .training import finetune  # local import to avoid a module cycle

    samples: list[ConflictSample] = []
    finetune(state, f, dataset, config, steps,
             conflict_out=samples, conflict_every=every_k_steps)
    return samples


TRACE_COLUMNS = ("step", "projection", "grad_norm_ordinary", "grad_norm_adversarial")


def trace_to_csv(samples: list[ConflictSample], path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for s in samples:
            fh.write(f"{s.step},{s.projection!r},{s.grad_norm_ordinary!r},"
                     f"{s.grad_norm_adversarial!r}\n")


def moving_median(values, window: int) -> np.ndarray:
    """Trailing median used when plotting raw per-sample projections."""
    values = np.asarray(values, dtype=np.float64)
    return np.array([np.median(values[max(0, i + 1 - window):i + 1])
                     for i in range(len(values))])


def final_quarter_median(samples: list[ConflictSample]) -> float:
    values = [s.projection for s in samples]
    tail = values[3 * len(values) // 4:]
    if not tail:
        raise EmptyInput("no conflict samples to summarize")
    return float(np.median(tail))


# --- oracle-based stand-ins for the human studies ---


@dataclass(frozen=True)
class AgreementReport:
    rate: float  # oracle label == intended label, among in-domain examples
    matched: int
    in_domain: int
    total: int

    @property
    def out_of_domain_fraction(self) -> float:
        return 1.0 - self.in_domain / self.total


def label_agreement(examples, oracle) -> AgreementReport:
    """Fraction of examples whose oracle label matches the intended true
    label, restricted to the oracle's domain."""
    if not examples:
        raise EmptyInput("no examples")
    images = np.stack([np.asarray(e.image, dtype=np.float64) for e in examples])
    intended = np.array([e.true_label for e in examples])
    in_domain = np.asarray(oracle.in_domain(images), dtype=bool)
    labels = np.asarray(oracle.classify(images))
    matched = int(((labels == intended) & in_domain).sum())
    n_in = int(in_domain.sum())
    rate = matched / n_in if n_in else 0.0
    return AgreementReport(rate, matched, n_in, len(examples))


def two_sample_classifier_test(real: np.ndarray, generated: np.ndarray,
                               seed: int = 0, holdout: float = 0.25) -> float:
    """Held-out accuracy of a small classifier trained to tell generated from
    real rows; accuracy near 0.5 indicates the sets are indistinguishable.

    An automated stand-in for human realism judgments, not equivalent to them.
    """
    from sklearn.neural_network import MLPClassifier

    x = np.concatenate([np.asarray(real, dtype=np.float64),
                        np.asarray(generated, dtype=np.float64)])
    y = np.concatenate([np.zeros(len(real)), np.ones(len(generated))])
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    x, y = x[order], y[order]
    split = int(len(x) * (1.0 - holdout))
    clf = MLPClassifier(hidden_layer_sizes=(32,), max_iter=400, random_state=seed)
    clf.fit(x[:split], y[:split])
    return float(clf.score(x[split:], y[split:]))


def confidence_report(classifier: TargetClassifier, real: np.ndarray,
                      generated: np.ndarray) -> dict[str, float]:
    """Mean max-softmax confidence of a held-out classifier on real vs
    generated data; a crude realism signal."""
    def mean_conf(rows):
        with torch.no_grad():
            probs = torch.softmax(classifier.logits(torch.as_tensor(
                np.asarray(rows, dtype=np.float32))), dim=1)
        return float(probs.max(dim=1).values.mean())

    return {"real_mean_confidence": mean_conf(real),
            "generated_mean_confidence": mean_conf(generated)}
