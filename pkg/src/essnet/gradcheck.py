"""Finite-difference audit of the generator-side objective's gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .losses import PAPER_WEIGHTS, LossWeights
from .networks import DiscriminatorConfig, GeneratorConfig, build_discriminator, build_generator, build_segmenter

# gradients smaller than this are compared absolutely
ABS_FLOOR = 1e-8


@dataclass
class GradAudit:
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    names: list[str]
    tol: float
    failures: list[tuple[str, float, float, float]] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max())

    @property
    def median_rel_error(self) -> float:
        return float(np.median(self.rel_errors))

    @property
    def fraction_within(self) -> float:
        return float(np.mean(self.rel_errors < self.tol))


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), ABS_FLOOR)


def audit(loss_fn: Callable[[], torch.Tensor], params: Sequence[tuple[str, torch.Tensor]],
          samples: int, rng: np.random.Generator, h: float = 1e-3, tol: float = 1e-3) -> GradAudit:
    """Compare autograd against central differences on sampled scalar entries.

    ``params`` are (name, leaf tensor) pairs that ``loss_fn`` reads; entries
    are sampled uniformly over all their scalars.
    """
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    sizes = np.array([p.numel() for _, p in params])
    flat_idx = rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    rel, ana, num, names, failures = [], [], [], [], []
    with torch.no_grad():
        for k in np.sort(flat_idx):
            t = int(np.searchsorted(bounds, k, side="right"))
            local = int(k - (bounds[t - 1] if t else 0))
            name, p = params[t]
            view = p.view(-1)
            orig = view[local].item()
            view[local] = orig + h
            f_plus = loss_fn().item()
            view[local] = orig - h
            f_minus = loss_fn().item()
            view[local] = orig
            fd = (f_plus - f_minus) / (2 * h)
            g = p.grad.view(-1)[local].item() if p.grad is not None else 0.0
            err = relative_error(g, fd)
            label = f"{name}[{local}]"
            rel.append(err)
            ana.append(g)
            num.append(fd)
            names.append(label)
            if err >= tol:
                failures.append((label, g, fd, err))
    return GradAudit(np.array(rel), np.array(ana), np.array(num), names, tol, failures)


@dataclass(frozen=True)
class TinyConfig:
    size: int = 8
    width: int = 4
    n_blocks: int = 1
    d_width: int = 4
    d_down: int = 1
    num_classes: int = 7
    batch: int = 1


def tiny_essnet(config: TinyConfig = TinyConfig(), seed: int = 0, dtype=torch.float64):
    """Five tiny networks plus one (x, m, y) batch, all in ``dtype``."""
    from .trainer import derive_seed

    g = GeneratorConfig(config.width, config.n_blocks)
    d = DiscriminatorConfig(config.d_width, config.d_down)
    nets = {
        "G1": build_generator(g, derive_seed(seed, "G1"), "G1"),
        "G2": build_generator(g, derive_seed(seed, "G2"), "G2"),
        "S": build_segmenter(g, derive_seed(seed, "S"), config.num_classes),
        "D1": build_discriminator(d, derive_seed(seed, "D1"), "D1"),
        "D2": build_discriminator(d, derive_seed(seed, "D2"), "D2"),
    }
    for n in nets.values():
        n.to(dtype)
    gen = torch.Generator().manual_seed(seed)
    shape = (config.batch, 1, config.size, config.size)
    x = (torch.rand(shape, generator=gen, dtype=dtype) * 2 - 1)
    y = (torch.rand(shape, generator=gen, dtype=dtype) * 2 - 1)
    m = torch.randint(0, config.num_classes, (config.batch, config.size, config.size), generator=gen)
    return nets, x, m, y


def grad_check(config: TinyConfig = TinyConfig(), seed: int = 0, samples: int = 200, h: float = 1e-3,
               tol: float = 1e-3, weights: LossWeights = PAPER_WEIGHTS, gan_mode: str = "nonsaturating",
               roles: Sequence[str] = ("G1", "G2", "S")) -> GradAudit:
    """Audit d(total)/d(theta) for parameters of ``roles`` on the tiny graph in float64."""
    from .trainer import generator_terms, weighted_total

    nets, x, m, y = tiny_essnet(config, seed)

    def loss_fn():
        return weighted_total(generator_terms(nets, x, m, y, gan_mode)["terms"], weights)

    params = [(f"{r}.{n}", p) for r in roles for n, p in nets[r].named_parameters()]
    return audit(loss_fn, params, samples, np.random.default_rng(seed), h, tol)
