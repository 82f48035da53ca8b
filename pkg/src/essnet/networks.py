"""ResNet-block generators, PatchGAN discriminators and the segmenter."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

ROLES = ("G1", "G2", "S", "D1", "D2")


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    width: int = 16
    n_blocks: int = 3
    in_channels: int = 1
    out_channels: int = 1
    head: str = "tanh"  # "tanh" | "softmax"

    def validate(self):
        if self.n_blocks < 1:
            raise ArchitectureError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.width < 2:
            raise ArchitectureError(f"width must be >= 2, got {self.width}")
        if self.head not in ("tanh", "softmax"):
            raise ArchitectureError(f"unknown head {self.head!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ArchitectureError("channel counts must be positive")


@dataclass(frozen=True)
class DiscriminatorConfig:
    width: int = 16
    n_down: int = 3  # stride-2 stages; one stride-1 stage and the 1-channel head follow
    in_channels: int = 1

    def validate(self):
        if self.n_down < 1:
            raise ArchitectureError(f"discriminator needs >= 1 stride-2 stage, got {self.n_down}")
        if self.width < 1:
            raise ArchitectureError(f"width must be positive, got {self.width}")


DESK_GENERATOR = GeneratorConfig(16, 3)
PARITY_GENERATOR = GeneratorConfig(64, 9)
DESK_DISCRIMINATOR = DiscriminatorConfig(16, 3)
PARITY_DISCRIMINATOR = DiscriminatorConfig(64, 3)


def segmenter_config(gen: GeneratorConfig, num_classes: int = 7) -> GeneratorConfig:
    """S shares G1's body; only the output channels and head differ."""
    return GeneratorConfig(gen.width, gen.n_blocks, gen.in_channels, num_classes, "softmax")


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3, bias=False),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3, bias=False),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """c7s1-w, d2w, d4w, N x R4w, u2w, uw, c7s1-out.

    Convolutions followed by instance norm carry no bias (the norm's shift
    replaces it).  With ``head="softmax"`` this is the segmenter; ``forward``
    then returns probabilities and :meth:`logits` the pre-softmax scores.
    """

    def __init__(self, config: GeneratorConfig, role: str = "G1"):
        super().__init__()
        config.validate()
        self.config = config
        self.role = role
        w, cin, cout = config.width, config.in_channels, config.out_channels

        def norm_relu(c):
            return [nn.InstanceNorm2d(c, affine=True), nn.ReLU()]

        layers = [nn.ReflectionPad2d(3), nn.Conv2d(cin, w, 7, bias=False), *norm_relu(w)]
        layers += [nn.Conv2d(w, 2 * w, 3, stride=2, padding=1, bias=False), *norm_relu(2 * w)]
        layers += [nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1, bias=False), *norm_relu(4 * w)]
        layers += [ResidualBlock(4 * w) for _ in range(config.n_blocks)]
        layers += [nn.ConvTranspose2d(4 * w, 2 * w, 3, stride=2, padding=1, output_padding=1, bias=False),
                   *norm_relu(2 * w)]
        layers += [nn.ConvTranspose2d(2 * w, w, 3, stride=2, padding=1, output_padding=1, bias=False),
                   *norm_relu(w)]
        self.body = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(w, cout, 7))

    def _check(self, x):
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ArchitectureError(
                f"{self.role}: expected (N, {self.config.in_channels}, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ArchitectureError(f"{self.role}: H and W must be divisible by 4, got {h}x{w}")
        if min(h, w) < 8:
            raise ArchitectureError(f"{self.role}: input must be at least 8x8, got {h}x{w}")

    def logits(self, x):
        self._check(x)
        return self.head(self.body(x))

    def forward(self, x):
        out = self.logits(x)
        if self.config.head == "softmax":
            return torch.softmax(out, dim=1)
        return torch.tanh(out)


def patch_output_size(n: int, n_down: int = 3) -> list[int]:
    """Spatial sizes after each discriminator conv (k=4, p=1)."""
    sizes = []
    for stride in [2] * n_down + [1, 1]:
        n = (n + 2 - 4) // stride + 1
        sizes.append(n)
    return sizes


class Discriminator(nn.Module):
    """PatchGAN: C64-C128-C256 (stride 2), C512 (stride 1), 1-channel head.

    The head emits raw scores; the losses apply the sigmoid.
    """

    def __init__(self, config: DiscriminatorConfig, role: str = "D1"):
        super().__init__()
        config.validate()
        self.config = config
        self.role = role
        w = config.width
        layers = [nn.Conv2d(config.in_channels, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        c = w
        for i in range(1, config.n_down):
            c_next = w * min(2 ** i, 8)
            layers += [nn.Conv2d(c, c_next, 4, stride=2, padding=1, bias=False),
                       nn.InstanceNorm2d(c_next, affine=True), nn.LeakyReLU(0.2)]
            c = c_next
        c_next = w * min(2 ** config.n_down, 8)
        layers += [nn.Conv2d(c, c_next, 4, stride=1, padding=1, bias=False),
                   nn.InstanceNorm2d(c_next, affine=True), nn.LeakyReLU(0.2)]
        layers += [nn.Conv2d(c_next, 1, 4, stride=1, padding=1)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ArchitectureError(f"{self.role}: expected (N, {self.config.in_channels}, H, W), got {tuple(x.shape)}")
        for n in x.shape[-2:]:
            sizes = patch_output_size(int(n), self.config.n_down)
            if min(sizes[:self.config.n_down]) < 4 or sizes[-1] < 1:
                raise ArchitectureError(f"{self.role}: input {tuple(x.shape[-2:])} too small for "
                                        f"{self.config.n_down} stride-2 stages")
        return self.model(x)


def init_weights(net: nn.Module, seed: int) -> nn.Module:
    """Gaussian(0, 0.02) conv weights, zero biases, unit/zero norm affine."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.InstanceNorm2d) and m.affine:
                m.weight.fill_(1.0)
                m.bias.zero_()
    return net


def build_generator(config: GeneratorConfig = DESK_GENERATOR, seed: int = 0, role: str = "G1") -> Generator:
    return init_weights(Generator(config, role), seed)


def build_segmenter(config: GeneratorConfig = DESK_GENERATOR, seed: int = 0, num_classes: int = 7) -> Generator:
    cfg = config if config.head == "softmax" else segmenter_config(config, num_classes)
    return init_weights(Generator(cfg, "S"), seed)


def build_discriminator(config: DiscriminatorConfig = DESK_DISCRIMINATOR, seed: int = 0, role: str = "D1") -> Discriminator:
    return init_weights(Discriminator(config, role), seed)


def build_network(role: str, config, seed: int) -> nn.Module:
    if role in ("G1", "G2"):
        return build_generator(config, seed, role)
    if role == "S":
        return build_segmenter(config, seed)
    if role in ("D1", "D2"):
        return build_discriminator(config, seed, role)
    raise ArchitectureError(f"unknown network role {role!r}")


def config_to_dict(config) -> dict:
    kind = "generator" if isinstance(config, GeneratorConfig) else "discriminator"
    return {"kind": kind, **asdict(config)}


def config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    try:
        if kind == "generator":
            return GeneratorConfig(**d)
        if kind == "discriminator":
            return DiscriminatorConfig(**d)
    except TypeError as e:
        raise ArchitectureError(f"bad architecture fields: {e}") from e
    raise ArchitectureError(f"unknown architecture tag {kind!r}")


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def layer_shapes(net: nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    """(type name, weight shape) of every parametrised layer, in order."""
    return [(type(m).__name__, tuple(m.weight.shape)) for m in net.modules()
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.InstanceNorm2d)) and getattr(m, "weight", None) is not None]


def generator_forward(net: Generator, batch: torch.Tensor) -> torch.Tensor:
    return net(batch)


def discriminator_forward(net: Discriminator, batch: torch.Tensor) -> torch.Tensor:
    return net(batch)


def segmenter_forward(net: Generator, batch: torch.Tensor) -> torch.Tensor:
    if net.config.head != "softmax":
        raise ArchitectureError(f"{net.role} has no softmax head")
    return net(batch)


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack :class:`essnet.data.Image` objects into an (N, 1, H, W) tensor."""
    arr = np.stack([np.asarray(im.pixels) for im in images])[:, None]
    return torch.from_numpy(arr.copy()).to(dtype)


def labels_to_tensor(labels) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(l.ids) for l in labels]).astype(np.int64))

