"""Networks: the conditional generator, the split discriminator (shared trunk,
critic head, auxiliary-classifier head), frozen target classifiers, and the
on-disk checkpoint container."""

from __future__ import annotations

import copy
import hashlib
import math
import os
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    InconsistentSpec,
    InvalidLabel,
    MissingCheckpoint,
    ShapeMismatch,
    UnknownClassifier,
)

LEAKY_SLOPE = 0.2


def one_hot(labels: torch.Tensor, class_count: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.int64)
    if labels.numel() and (labels.min() < 0 or labels.max() >= class_count):
        raise InvalidLabel(f"labels must lie in [0, {class_count})")
    return F.one_hot(labels, class_count)


def _dropout(x: torch.Tensor, p: float, rng: torch.Generator | None) -> torch.Tensor:
    # explicit-generator dropout so the mask stream is serializable
    if p <= 0.0 or rng is None:
        return x
    keep = 1.0 - p
    mask = (torch.rand(x.shape, generator=rng) < keep).to(x.dtype)
    return x * mask * (1.0 / keep)


@dataclass(frozen=True)
class GanSpec:
    """Shape of a generator/discriminator pair.

    arch "conv" is the 28x28 image roster: generator dense->64, three 5x5
    stride-2 transposed convolutions (32/8/4 maps) with batch norm, dropout
    0.35 and LeakyReLU, then dense->input_dim with tanh; discriminator trunk
    of six 3x3 convolutions (8/16/32/64/128/256 maps, strides 2/1 alternating,
    dropout 0.2). arch "mlp" is a dense stand-in with the same head split,
    for low-dimensional data where convolutions are meaningless.
    """

    input_dim: int
    class_count: int
    latent_dim: int = 128
    arch: str = "conv"
    gen_hidden: tuple[int, ...] = (64, 64)
    disc_hidden: tuple[int, ...] = (64, 64)
    gen_dropout: float = 0.35
    disc_dropout: float = 0.2

    def __post_init__(self):
        if self.arch not in ("conv", "mlp"):
            raise InconsistentSpec(f"unknown arch {self.arch!r}")
        if self.input_dim < 1 or self.class_count < 2 or self.latent_dim < 1:
            raise InconsistentSpec("dimensions must be positive (and >= 2 classes)")
        if self.arch == "conv":
            side = math.isqrt(self.input_dim)
            if side * side != self.input_dim or side < 8:
                raise InconsistentSpec(
                    f"conv arch needs a square image of side >= 8, got input_dim {self.input_dim}")
        elif not self.gen_hidden or not self.disc_hidden:
            raise InconsistentSpec("mlp arch needs at least one hidden layer per network")

    @property
    def image_side(self) -> int:
        return math.isqrt(self.input_dim)


# conv generator spatial sizes are input-independent: 1 -> 5 -> 13 -> 29
_GEN_TCONV_MAPS = (32, 8, 4)
_GEN_FINAL_SIDE = 29
_DISC_CONV_MAPS = (8, 16, 32, 64, 128, 256)
_DISC_CONV_STRIDES = (2, 1, 2, 1, 2, 1)


class Generator(nn.Module):
    """Class-conditional generator; the label one-hot is concatenated to z."""

    def __init__(self, spec: GanSpec):
        super().__init__()
        self.spec = spec
        in_dim = spec.latent_dim + spec.class_count
        if spec.arch == "conv":
            self.fc_in = nn.Linear(in_dim, 64)
            chans = (64,) + _GEN_TCONV_MAPS
            self.blocks = nn.ModuleList(
                nn.ConvTranspose2d(chans[i], chans[i + 1], 5, stride=2)
                for i in range(len(_GEN_TCONV_MAPS)))
            self.norms = nn.ModuleList(nn.BatchNorm2d(c) for c in _GEN_TCONV_MAPS)
            self.fc_out = nn.Linear(_GEN_TCONV_MAPS[-1] * _GEN_FINAL_SIDE**2, spec.input_dim)
        else:
            self.fc_in = nn.Linear(in_dim, spec.gen_hidden[0])
            sizes = spec.gen_hidden
            self.blocks = nn.ModuleList(
                nn.Linear(sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1))
            self.norms = nn.ModuleList(nn.BatchNorm1d(s) for s in sizes[1:])
            self.fc_out = nn.Linear(sizes[-1], spec.input_dim)

    def forward(self, z: torch.Tensor, labels: torch.Tensor,
                dropout_rng: torch.Generator | None = None) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.spec.latent_dim:
            raise ShapeMismatch(f"z must be (batch, {self.spec.latent_dim}), got {tuple(z.shape)}")
        if len(labels) != len(z):
            raise ShapeMismatch("labels and z batch sizes differ")
        h = torch.cat([z, one_hot(labels, self.spec.class_count).to(z.dtype)], dim=1)
        h = torch.relu(self.fc_in(h))
        rng = dropout_rng if self.training else None
        if self.spec.arch == "conv":
            h = h.reshape(len(z), 64, 1, 1)
        for block, norm in zip(self.blocks, self.norms):
            h = norm(block(h))
            h = _dropout(h, self.spec.gen_dropout, rng)
            h = F.leaky_relu(h, LEAKY_SLOPE)
        return torch.tanh(self.fc_out(h.flatten(1)))


class Discriminator(nn.Module):
    """Shared trunk feeding a label-conditioned critic head and a label-free
    auxiliary classifier head."""

    def __init__(self, spec: GanSpec):
        super().__init__()
        self.spec = spec
        if spec.arch == "conv":
            chans = (1,) + _DISC_CONV_MAPS
            self.trunk_layers = nn.ModuleList(
                nn.Conv2d(chans[i], chans[i + 1], 3, stride=_DISC_CONV_STRIDES[i], padding=1)
                for i in range(len(_DISC_CONV_MAPS)))
            side = spec.image_side
            for s in _DISC_CONV_STRIDES:
                side = (side + 1) // 2 if s == 2 else side
            feat = _DISC_CONV_MAPS[-1] * side * side
        else:
            sizes = (spec.input_dim,) + spec.disc_hidden
            self.trunk_layers = nn.ModuleList(
                nn.Linear(sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1))
            feat = spec.disc_hidden[-1]
        self.feature_dim = feat
        self.critic_head = nn.Linear(feat + spec.class_count, 1)
        self.aux_head = nn.Linear(feat, spec.class_count)

    def trunk(self, x: torch.Tensor, dropout_rng: torch.Generator | None = None) -> torch.Tensor:
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ShapeMismatch(f"x must be (batch, {self.spec.input_dim}), got {tuple(x.shape)}")
        rng = dropout_rng if self.training else None
        h = x.reshape(len(x), 1, self.spec.image_side, -1) if self.spec.arch == "conv" else x
        for layer in self.trunk_layers:
            h = _dropout(layer(h), self.spec.disc_dropout, rng)
            h = F.leaky_relu(h, LEAKY_SLOPE)
        return h.flatten(1)

    def forward(self, x: torch.Tensor, labels: torch.Tensor,
                dropout_rng: torch.Generator | None = None):
        feat = self.trunk(x, dropout_rng)
        onehot = one_hot(labels, self.spec.class_count).to(feat.dtype)
        critic = self.critic_head(torch.cat([feat, onehot], dim=1)).squeeze(1)
        aux = self.aux_head(feat)  # never sees the label
        return critic, aux


@dataclass
class GanParams:
    spec: GanSpec
    generator: Generator
    discriminator: Discriminator

    def eval(self) -> "GanParams":
        self.generator.eval()
        self.discriminator.eval()
        return self

    def train(self) -> "GanParams":
        self.generator.train()
        self.discriminator.train()
        return self


def _he_fan_in(module: nn.Module) -> int:
    w = module.weight
    if isinstance(module, nn.Linear):
        return w.shape[1]
    # conv and transposed conv: input channels times receptive field
    in_channels = w.shape[1] if isinstance(module, nn.Conv2d) else w.shape[0]
    return in_channels * w.shape[2] * w.shape[3]


def init_weights(module: nn.Module, rng: torch.Generator) -> None:
    """He-style normal init for dense/conv weights; zero biases; identity norms."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            std = math.sqrt(2.0 / _he_fan_in(m))
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=rng) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_gan(spec: GanSpec, seed: int) -> GanParams:
    """Deterministically initialized generator + discriminator pair."""
    rng = torch.Generator().manual_seed(int(seed))
    gen, disc = Generator(spec), Discriminator(spec)
    init_weights(gen, rng)
    init_weights(disc, rng)
    for net in (gen, disc):
        for p in net.parameters():
            if not torch.isfinite(p).all():
                raise InconsistentSpec("non-finite initial parameter")
    return GanParams(spec, gen, disc).eval()


def generate(gan: GanParams, z: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Evaluation-mode sampling: dropout off, batch-norm running statistics."""
    gan.generator.eval()
    with torch.no_grad():
        return gan.generator(torch.as_tensor(z, dtype=torch.float32), labels)


def discriminate(gan: GanParams, x: torch.Tensor, labels: torch.Tensor):
    """Evaluation-mode critic score and auxiliary logits."""
    gan.discriminator.eval()
    with torch.no_grad():
        return gan.discriminator(torch.as_tensor(x, dtype=torch.float32), labels)


# --- target classifiers ---


class DenseClassifier(nn.Module):
    """Fully-connected LeakyReLU classifier on flat inputs."""

    def __init__(self, input_dim: int, class_count: int, hidden: tuple[int, ...]):
        super().__init__()
        sizes = (input_dim,) + tuple(hidden)
        self.hidden = nn.ModuleList(
            nn.Linear(sizes[i], sizes[i + 1]) for i in range(len(hidden)))
        self.out = nn.Linear(sizes[-1], class_count)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.hidden:
            x = F.leaky_relu(layer(x), LEAKY_SLOPE)
        return self.out(x)


class ConvClassifier(nn.Module):
    """Small convolutional classifier on flat square images."""

    def __init__(self, input_dim: int, class_count: int,
                 conv: tuple[tuple[int, int, int], ...], dense: tuple[int, ...]):
        super().__init__()
        side = math.isqrt(input_dim)
        if side * side != input_dim:
            raise InconsistentSpec("conv classifier needs a square input")
        self.side = side
        layers, in_ch = [], 1
        for out_ch, kernel, stride in conv:
            layers.append(nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=1))
            side = (side + 2 * 1 - kernel) // stride + 1
            in_ch = out_ch
        self.conv = nn.ModuleList(layers)
        sizes = (in_ch * side * side,) + tuple(dense)
        self.dense = nn.ModuleList(
            nn.Linear(sizes[i], sizes[i + 1]) for i in range(len(dense)))
        self.out = nn.Linear(sizes[-1], class_count)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x.reshape(len(x), 1, self.side, self.side)
        for layer in self.conv:
            h = F.leaky_relu(layer(h), LEAKY_SLOPE)
        h = h.flatten(1)
        for layer in self.dense:
            h = F.leaky_relu(layer(h), LEAKY_SLOPE)
        return self.out(h)


@dataclass(frozen=True)
class ClassifierMeta:
    name: str
    abbreviation: str
    epsilon: float | None  # l-inf robustness radius, if any
    certified_pct: float | None  # certified test percentage at epsilon
    architecture: str
    in_repo: bool  # trained here vs imported from a published checkpoint


class TargetClassifier:
    """Frozen classifier f. Inputs may carry gradients; parameters never do."""

    def __init__(self, network: nn.Module, meta: ClassifierMeta,
                 input_dim: int, class_count: int):
        network.eval()
        for p in network.parameters():
            p.requires_grad_(False)
        self.network = network
        self.meta = meta
        self.input_dim = input_dim
        self.class_count = class_count

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=torch.float32) if not torch.is_tensor(x) else x
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeMismatch(f"x must be (batch, {self.input_dim}), got {tuple(x.shape)}")
        return self.network(x)

    def predict(self, x) -> np.ndarray:
        with torch.no_grad():
            return self.logits(x).argmax(dim=1).numpy()

    def checksum(self) -> str:
        return module_checksum(self.network)

    def trainable_copy(self) -> nn.Module:
        net = copy.deepcopy(self.network)
        for p in net.parameters():
            p.requires_grad_(True)
        return net


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    abbreviation: str
    epsilon: float | None
    certified_pct: float | None
    architecture: str
    in_repo: bool
    hidden: tuple = ()
    conv: tuple = ()
    dense: tuple = ()

    @property
    def meta(self) -> ClassifierMeta:
        return ClassifierMeta(self.name, self.abbreviation, self.epsilon,
                              self.certified_pct, self.architecture, self.in_repo)

    def build(self, input_dim: int, class_count: int, seed: int = 0) -> nn.Module:
        """Fresh, randomly initialized network of this entry's architecture."""
        if self.conv:
            net = ConvClassifier(input_dim, class_count, self.conv, self.dense)
        else:
            net = DenseClassifier(input_dim, class_count, self.hidden)
        init_weights(net, torch.Generator().manual_seed(int(seed)))
        return net

    def load(self, checkpoint_dir, input_dim: int, class_count: int) -> TargetClassifier:
        """Import weights from a checkpoint container."""
        if not os.path.isfile(os.path.join(str(checkpoint_dir), "manifest.txt")):
            raise MissingCheckpoint(f"{self.name}: no checkpoint container at {checkpoint_dir}")
        arrays, _ = load_arrays(checkpoint_dir)
        net = self.build(input_dim, class_count)
        load_module_arrays(net, arrays, prefix="classifier")
        return TargetClassifier(net, self.meta, input_dim, class_count)

    def wrap(self, network: nn.Module, input_dim: int, class_count: int,
             epsilon: float | None = None, measured_pct: float | None = None) -> TargetClassifier:
        """Freeze an in-repo trained network under this entry's metadata."""
        meta = replace(self.meta,
                       epsilon=self.epsilon if epsilon is None else epsilon,
                       certified_pct=self.certified_pct if measured_pct is None else measured_pct)
        return TargetClassifier(network, meta, input_dim, class_count)


_MT_SMALL = dict(conv=((16, 4, 2), (32, 4, 2)), dense=())
_MT_LARGE = dict(conv=((32, 3, 1), (32, 4, 2), (64, 3, 1), (64, 4, 2)), dense=(512,))

_REGISTRY = {
    "wk": RegistryEntry("wk", "W&K", 0.1, 94.2,
                        "2 convolutional layers followed by 2 dense layers",
                        in_repo=False, conv=((16, 4, 2), (32, 4, 2)), dense=(100,)),
    "mt-a": RegistryEntry("mt-a", "MT-A", 0.1, 97.1,
                          "small: 2 convolutional layers followed by 1 dense layer",
                          in_repo=False, **_MT_SMALL),
    "mt-b": RegistryEntry("mt-b", "MT-B", 0.3, 60.1,
                          "small: 2 convolutional layers followed by 1 dense layer",
                          in_repo=False, **_MT_SMALL),
    "mt-c": RegistryEntry("mt-c", "MT-C", 0.1, 96.4,
                          "large: 4 convolutional layers followed by 2 dense layers",
                          in_repo=False, **_MT_LARGE),
    "mt-d": RegistryEntry("mt-d", "MT-D", 0.3, 58.4,
                          "large: 4 convolutional layers followed by 2 dense layers",
                          in_repo=False, **_MT_LARGE),
    "simple": RegistryEntry("simple", "Simple", None, None,
                            "three dense layers of size 256, 128 and 32 with LeakyReLU",
                            in_repo=True, hidden=(256, 128, 32)),
    "synthetic-mlp": RegistryEntry("synthetic-mlp", "SynMLP", None, None,
                                   "two dense layers of size 64 with LeakyReLU",
                                   in_repo=True, hidden=(64, 64)),
    "pgd-trained": RegistryEntry("pgd-trained", "PGD", 0.1, None,
                                 "two dense layers of size 64, adversarially trained "
                                 "with projected gradient descent",
                                 in_repo=True, hidden=(64, 64)),
}


def classifier_registry(name: str) -> RegistryEntry:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise UnknownClassifier(
            f"unknown classifier {name!r}; known: {sorted(_REGISTRY)}") from None


# --- checkpoint container ---
#
# A checkpoint is a directory holding manifest.txt (one line per tensor:
# name, dtype, comma-joined shape), one raw little-endian binary file per
# tensor, and metadata.txt with sorted key=value lines.

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "uint8": "u1"}


def save_arrays(directory, arrays: dict[str, np.ndarray], metadata: dict[str, str]) -> None:
    os.makedirs(str(directory), exist_ok=True)
    lines = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported checkpoint dtype {dtype} for {name}")
        shape = ",".join(str(d) for d in arr.shape) or "-"
        lines.append(f"{name} {dtype} {shape}\n")
        with open(os.path.join(str(directory), name + ".bin"), "wb") as fh:
            fh.write(arr.astype(_DTYPES[dtype]).tobytes())
    with open(os.path.join(str(directory), "manifest.txt"), "w") as fh:
        fh.writelines(lines)
    with open(os.path.join(str(directory), "metadata.txt"), "w") as fh:
        for key in sorted(metadata):
            fh.write(f"{key}={metadata[key]}\n")


def load_arrays(directory) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    manifest = os.path.join(str(directory), "manifest.txt")
    if not os.path.isfile(manifest):
        raise MissingCheckpoint(f"no manifest.txt in {directory}")
    arrays = {}
    with open(manifest) as fh:
        for line in fh:
            name, dtype, shape_s = line.split()
            shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
            path = os.path.join(str(directory), name + ".bin")
            if not os.path.isfile(path):
                raise MissingCheckpoint(f"manifest names {name} but {path} is missing")
            with open(path, "rb") as bh:
                buf = bh.read()
            arrays[name] = np.frombuffer(buf, dtype=_DTYPES[dtype]).reshape(shape).astype(dtype)
    metadata = {}
    meta_path = os.path.join(str(directory), "metadata.txt")
    if os.path.isfile(meta_path):
        with open(meta_path) as fh:
            for line in fh:
                key, _, value = line.rstrip("\n").partition("=")
                metadata[key] = value
    return arrays, metadata


def module_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    state = {}
    for key, ref in module.state_dict().items():
        name = f"{prefix}.{key}"
        if name not in arrays:
            raise MissingCheckpoint(f"checkpoint lacks tensor {name}")
        state[key] = torch.from_numpy(np.ascontiguousarray(arrays[name])).to(ref.dtype)
    module.load_state_dict(state)


def module_checksum(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for key, value in sorted(module.state_dict().items()):
        digest.update(key.encode())
        digest.update(np.ascontiguousarray(value.detach().numpy()).tobytes())
    return digest.hexdigest()


def spec_metadata(spec: GanSpec) -> dict[str, str]:
    return {
        "spec.input_dim": str(spec.input_dim),
        "spec.class_count": str(spec.class_count),
        "spec.latent_dim": str(spec.latent_dim),
        "spec.arch": spec.arch,
        "spec.gen_hidden": ",".join(map(str, spec.gen_hidden)),
        "spec.disc_hidden": ",".join(map(str, spec.disc_hidden)),
        "spec.gen_dropout": repr(spec.gen_dropout),
        "spec.disc_dropout": repr(spec.disc_dropout),
    }


def spec_from_metadata(meta: dict[str, str]) -> GanSpec:
    def ints(key):
        return tuple(int(v) for v in meta[key].split(",") if v)

    return GanSpec(
        input_dim=int(meta["spec.input_dim"]),
        class_count=int(meta["spec.class_count"]),
        latent_dim=int(meta["spec.latent_dim"]),
        arch=meta["spec.arch"],
        gen_hidden=ints("spec.gen_hidden"),
        disc_hidden=ints("spec.disc_hidden"),
        gen_dropout=float(meta["spec.gen_dropout"]),
        disc_dropout=float(meta["spec.disc_dropout"]),
    )


def save_classifier(clf: TargetClassifier, directory, extra: dict[str, str] | None = None) -> None:
    meta = {
        "classifier.name": clf.meta.name,
        "classifier.input_dim": str(clf.input_dim),
        "classifier.class_count": str(clf.class_count),
        "classifier.epsilon": "" if clf.meta.epsilon is None else repr(clf.meta.epsilon),
        "classifier.certified_pct": "" if clf.meta.certified_pct is None
        else repr(clf.meta.certified_pct),
    }
    meta.update(extra or {})
    save_arrays(directory, module_arrays(clf.network, "classifier"), meta)


def load_classifier(directory) -> TargetClassifier:
    arrays, meta = load_arrays(directory)
    entry = classifier_registry(meta["classifier.name"])
    input_dim = int(meta["classifier.input_dim"])
    class_count = int(meta["classifier.class_count"])
    net = entry.build(input_dim, class_count)
    load_module_arrays(net, arrays, "classifier")
    eps = float(meta["classifier.epsilon"]) if meta.get("classifier.epsilon") else None
    pct = float(meta["classifier.certified_pct"]) if meta.get("classifier.certified_pct") else None
    return entry.wrap(net, input_dim, class_count, epsilon=eps, measured_pct=pct)
