"""Two-path adversarial training of synthesis plus segmentation.

Path A runs x -> G1 -> {S, G2} and Path B runs y -> G2 -> G1.  Each step
updates {G1, G2, S} on the weighted generator-side objective, then D1 and D2
on their own discriminator losses (alternating optimisation).  The same
loop also drives the two-stage baseline (synthesis first, segmenter later on
frozen G1 output) and plain supervised segmentation.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import (
    SPLEEN,
    DatasetBundle,
    Image,
    LabeledSplit,
    LabelMap,
    UnlabeledSplit,
    batch_indices,
)
from .losses import (
    GAN_MODES,
    PAPER_WEIGHTS,
    REPORT_FIELDS,
    LossReport,
    LossWeights,
    adversarial_loss_D,
    adversarial_loss_G,
    cycle_loss,
    seg_loss_from_logits,
    total_loss,
)
from .networks import (
    DESK_DISCRIMINATOR,
    DESK_GENERATOR,
    ArchitectureError,
    DiscriminatorConfig,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    build_segmenter,
    config_from_dict,
    config_to_dict,
    images_to_tensor,
    labels_to_tensor,
    segmenter_config,
)

log = logging.getLogger(__name__)

MODES = ("essnet", "two_stage_synthesis", "two_stage_seg", "seg_only")
MODE_ROLES = {
    "essnet": ("G1", "G2", "S", "D1", "D2"),
    "two_stage_synthesis": ("G1", "G2", "D1", "D2"),
    "two_stage_seg": ("S",),
    "seg_only": ("S",),
}
CHECKPOINT_FORMAT = "essnet-checkpoint/1"


class NumericError(RuntimeError):
    """A loss went non-finite; ``report`` holds the offending terms."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class CheckpointError(ValueError):
    pass


def derive_seed(master: int, tag: str) -> int:
    """Deterministic per-component seed fanned out from the master seed."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, zlib.crc32(tag.encode())])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 1
    lr_g: float = 1e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weights: LossWeights = PAPER_WEIGHTS
    pool_size: int = 50
    gan_mode: str = "nonsaturating"
    seg_reduction: str = "mean"
    seed: int = 0
    mode: str = "essnet"
    generator: GeneratorConfig = DESK_GENERATOR
    discriminator: DiscriminatorConfig = DESK_DISCRIMINATOR
    num_classes: int = 7
    seg_source: str = "A"  # seg_only: "A" or "B"
    val_class: int = SPLEEN
    paper_protocol: bool = False  # select epochs on B_test, as published
    keep_checkpoints: str = "all"  # "all" | "best_last"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be > 0")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.gan_mode not in GAN_MODES:
            raise ValueError(f"unknown GAN mode {self.gan_mode!r}")
        if self.seg_source not in ("A", "B"):
            raise ValueError("seg_source must be 'A' or 'B'")
        if self.keep_checkpoints not in ("all", "best_last"):
            raise ValueError("keep_checkpoints must be 'all' or 'best_last'")
        if self.pool_size < 0:
            raise ValueError("pool_size must be >= 0")

    def network_configs(self) -> dict:
        seg = segmenter_config(self.generator, self.num_classes)
        return {"G1": self.generator, "G2": self.generator, "S": seg,
                "D1": self.discriminator, "D2": self.discriminator}


class ImagePool:
    """History of generated images shown to a discriminator.

    Until full, every query is stored and returned as-is.  Afterwards each
    image is, with probability 1/2, swapped for a random stored one.
    """

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.images: list[torch.Tensor] = []

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        if self.size == 0:
            return batch
        out = []
        for img in batch.detach():
            img = img.unsqueeze(0).clone()
            if len(self.images) < self.size:
                self.images.append(img)
                out.append(img)
            elif self.rng.random() > 0.5:
                idx = int(self.rng.integers(0, self.size))
                out.append(self.images[idx].clone())
                self.images[idx] = img
            else:
                out.append(img)
        return torch.cat(out, 0)


@dataclass
class TrainState:
    config: TrainConfig
    nets: dict
    optimizers: dict
    pools: dict
    rng: np.random.Generator
    epoch: int = 0  # completed epochs
    frozen_g1: nn.Module | None = None


def _adam(params, lr, config):
    # foreach=False keeps the update arithmetic independent of tensor grouping
    return torch.optim.Adam(params, lr=lr, betas=(config.beta1, config.beta2), foreach=False)


def init_state(config: TrainConfig, frozen_g1: nn.Module | None = None) -> TrainState:
    """Build the networks, optimisers and pools a mode needs."""
    cfgs = config.network_configs()
    nets = {}
    for role in MODE_ROLES[config.mode]:
        seed = derive_seed(config.seed, role)
        if role in ("G1", "G2"):
            nets[role] = build_generator(cfgs[role], seed, role)
        elif role == "S":
            nets[role] = build_segmenter(cfgs[role], seed)
        else:
            nets[role] = build_discriminator(cfgs[role], seed, role)
    gen_params = [p for r in ("G1", "G2", "S") if r in nets for p in nets[r].parameters()]
    optimizers = {"gen": _adam(gen_params, config.lr_g, config)}
    for r in ("D1", "D2"):
        if r in nets:
            optimizers[r] = _adam(nets[r].parameters(), config.lr_d, config)
    pool_rng = np.random.default_rng(derive_seed(config.seed, "pool"))
    pools = {}
    if "D1" in nets:
        pools = {"fake_B": ImagePool(config.pool_size, pool_rng), "fake_A": ImagePool(config.pool_size, pool_rng)}
    if config.mode == "two_stage_seg":
        if frozen_g1 is None:
            raise ValueError("two_stage_seg needs a trained G1")
        frozen_g1.eval()
        for p in frozen_g1.parameters():
            p.requires_grad_(False)
    return TrainState(config, nets, optimizers, pools, pool_rng, 0, frozen_g1)


def _set_requires_grad(nets: Sequence[nn.Module], flag: bool) -> None:
    for n in nets:
        for p in n.parameters():
            p.requires_grad_(flag)


def generator_terms(nets: dict, x, m, y, gan_mode="nonsaturating", seg_reduction="mean") -> dict:
    """Forward both paths and return the generator-side loss terms as tensors.

    ``m`` may be None when S is absent; missing networks contribute zero.
    """
    G1, G2, S = nets["G1"], nets["G2"], nets.get("S")
    fake_b = G1(x)
    rec_a = G2(fake_b)
    fake_a = G2(y)
    rec_b = G1(fake_a)
    zero = x.new_zeros(())
    terms = {
        "gan_G1": adversarial_loss_G(nets["D1"](fake_b), gan_mode),
        "gan_G2": adversarial_loss_G(nets["D2"](fake_a), gan_mode),
        "cycle_A": cycle_loss(x, rec_a),
        "cycle_B": cycle_loss(y, rec_b),
        "seg": seg_loss_from_logits(S.logits(fake_b), m, seg_reduction) if S is not None else zero,
    }
    return {"terms": terms, "fake_B": fake_b, "fake_A": fake_a}


def weighted_total(terms: dict, weights: LossWeights):
    return total_loss(terms["gan_G1"], terms["gan_G2"], terms["cycle_A"], terms["cycle_B"], terms["seg"], weights)


def _report(terms: dict, d1: float, d2: float, weights: LossWeights) -> LossReport:
    vals = {k: float(v.detach()) for k, v in terms.items()}
    return LossReport(vals["gan_G1"], vals["gan_G2"], vals["cycle_A"], vals["cycle_B"], vals["seg"],
                      float(d1), float(d2), float(weighted_total(vals, weights)))


def _check_finite(report: LossReport) -> None:
    bad = {k: v for k, v in report.as_dict().items() if not math.isfinite(v)}
    if bad:
        raise NumericError(f"non-finite loss terms: {bad}", report)


def train_step(state: TrainState, x: torch.Tensor, m: torch.Tensor | None, y: torch.Tensor | None) -> tuple[TrainState, LossReport]:
    """One generator update followed by one update of each discriminator."""
    cfg = state.config
    nets, opts = state.nets, state.optimizers
    if cfg.mode in ("two_stage_seg", "seg_only"):
        S = nets["S"]
        if cfg.mode == "two_stage_seg":
            with torch.no_grad():
                x = state.frozen_g1(x)
        seg = seg_loss_from_logits(S.logits(x), m, cfg.seg_reduction)
        zero = torch.zeros(())
        terms = {"gan_G1": zero, "gan_G2": zero, "cycle_A": zero, "cycle_B": zero, "seg": seg}
        report = _report(terms, 0.0, 0.0, cfg.weights)
        _check_finite(report)
        opts["gen"].zero_grad(set_to_none=True)
        (cfg.weights.seg * seg).backward()
        opts["gen"].step()
        return state, report

    D1, D2 = nets["D1"], nets["D2"]
    _set_requires_grad([D1, D2], False)
    out = generator_terms(nets, x, m if "S" in nets else None, y, cfg.gan_mode, cfg.seg_reduction)
    terms = out["terms"]
    total = weighted_total(terms, cfg.weights)
    if not torch.isfinite(total):
        report = _report(terms, float("nan"), float("nan"), cfg.weights)
        raise NumericError(f"non-finite generator objective: {report}", report)
    opts["gen"].zero_grad(set_to_none=True)
    total.backward()
    opts["gen"].step()

    _set_requires_grad([D1, D2], True)
    fake_b = state.pools["fake_B"].query(out["fake_B"].detach())
    d1 = adversarial_loss_D(D1(y), D1(fake_b), cfg.gan_mode)
    opts["D1"].zero_grad(set_to_none=True)
    d1.backward()
    opts["D1"].step()
    fake_a = state.pools["fake_A"].query(out["fake_A"].detach())
    d2 = adversarial_loss_D(D2(x), D2(fake_a), cfg.gan_mode)
    opts["D2"].zero_grad(set_to_none=True)
    d2.backward()
    opts["D2"].step()

    report = _report(terms, d1.item(), d2.item(), cfg.weights)
    _check_finite(report)
    return state, report


# ---------------------------------------------------------------------------
# inference


def translate(G: nn.Module, img: Image) -> Image:
    """Run a generator on one image; the modality tag flips."""
    with torch.no_grad():
        out = G(images_to_tensor([img]))[0, 0].numpy()
    return Image(out, "B" if img.modality == "A" else "A")


def predict_probs(S: nn.Module, images: Sequence[Image]) -> np.ndarray:
    with torch.no_grad():
        return S(images_to_tensor(images)).numpy()


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over axis 0 of (C, H, W); ties go to the lowest id."""
    return np.argmax(probs, axis=0).astype(np.uint8)


def infer_segmentation(S: nn.Module, img: Image) -> LabelMap:
    """Segment with S alone; no translation happens at test time."""
    probs = predict_probs(S, [img])[0]
    return LabelMap(argmax_labels(probs), probs.shape[0])


def segment_many(S: nn.Module, images: Sequence[Image], chunk: int = 16) -> list[LabelMap]:
    out = []
    for i in range(0, len(images), chunk):
        probs = predict_probs(S, images[i:i + chunk])
        out.extend(LabelMap(argmax_labels(p), p.shape[0]) for p in probs)
    return out


def mean_dice(S: nn.Module, split: LabeledSplit, cls: int) -> float:
    from .evaluation import dice

    preds = segment_many(S, split.images)
    return float(np.mean([dice(p.ids == cls, r.ids == cls) for p, r in zip(preds, split.labels)]))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    epoch: int
    mode: str
    arch: dict  # role -> architecture config
    tensors: dict  # name -> float32 ndarray
    optim_steps: dict  # optimiser name -> per-parameter step counts
    pool_sizes: dict
    rng_state: dict
    path: Path | None = None

    def network(self, role: str) -> nn.Module:
        if role not in self.arch:
            raise CheckpointError(f"checkpoint has no network {role!r}")
        cfg = self.arch[role]
        if role in ("G1", "G2"):
            net = build_generator(cfg, 0, role)
        elif role == "S":
            net = build_segmenter(cfg, 0)
        else:
            net = build_discriminator(cfg, 0, role)
        _load_module(net, self.tensors, f"net/{role}/")
        return net


def _load_module(net: nn.Module, tensors: dict, prefix: str) -> None:
    sd = net.state_dict()
    for name, t in sd.items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"missing tensor {key}")
        arr = tensors[key]
        if tuple(arr.shape) != tuple(t.shape):
            raise CheckpointError(f"{key}: shape {arr.shape} does not match architecture {tuple(t.shape)}")
        t.copy_(torch.from_numpy(np.array(arr, dtype=np.float32)))


def _optim_tensors(opt: torch.optim.Optimizer, prefix: str, tensors: dict) -> list[float]:
    steps = []
    params = [p for g in opt.param_groups for p in g["params"]]
    for i, p in enumerate(params):
        st = opt.state.get(p)
        if not st:
            steps.append(0.0)
            continue
        steps.append(float(st["step"]))
        tensors[f"{prefix}{i}/exp_avg"] = st["exp_avg"].detach().numpy()
        tensors[f"{prefix}{i}/exp_avg_sq"] = st["exp_avg_sq"].detach().numpy()
    return steps


def state_to_checkpoint(state: TrainState) -> Checkpoint:
    tensors = {}
    for role, net in state.nets.items():
        for name, t in net.state_dict().items():
            tensors[f"net/{role}/{name}"] = t.detach().numpy()
    steps = {name: _optim_tensors(opt, f"opt/{name}/", tensors) for name, opt in state.optimizers.items()}
    pool_sizes = {}
    for name, pool in state.pools.items():
        pool_sizes[name] = len(pool.images)
        for i, img in enumerate(pool.images):
            tensors[f"pool/{name}/{i}"] = img.numpy()
    arch = {role: net.config for role, net in state.nets.items()}
    return Checkpoint(state.epoch, state.config.mode, arch, tensors, steps, pool_sizes,
                      state.rng.bit_generator.state)


def save_checkpoint(ckpt: Checkpoint | TrainState, path: str | Path) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 blob."""
    if isinstance(ckpt, TrainState):
        ckpt = state_to_checkpoint(ckpt)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "epoch": ckpt.epoch,
        "mode": ckpt.mode,
        "arch": {role: config_to_dict(cfg) for role, cfg in sorted(ckpt.arch.items())},
        "tensors": entries,
        "optim_steps": ckpt.optim_steps,
        "pool_sizes": ckpt.pool_sizes,
        "rng_state": ckpt.rng_state,
    }
    path.joinpath("tensors.f32").write_bytes(b"".join(chunks))
    path.joinpath("manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads(path.joinpath("manifest.json").read_text())
        blob = path.joinpath("tensors.f32").read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"missing checkpoint file: {e.filename}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint manifest: {e}") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unrecognised checkpoint format {manifest.get('format')!r}")
    try:
        arch = {role: config_from_dict(d) for role, d in manifest["arch"].items()}
    except ArchitectureError as e:
        raise CheckpointError(str(e)) from e
    unknown = set(arch) - {"G1", "G2", "S", "D1", "D2"}
    if unknown:
        raise CheckpointError(f"unknown architecture tag(s): {sorted(unknown)}")
    flat = np.frombuffer(blob, dtype="<f4")
    tensors, expected = {}, 0
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if count != e["count"] or e["offset"] != expected:
            raise CheckpointError(f"{e['name']}: manifest shape {list(shape)} inconsistent with blob layout")
        expected += count
        if expected > flat.size:
            raise CheckpointError(f"{e['name']}: blob truncated")
        tensors[e["name"]] = flat[e["offset"]:e["offset"] + count].reshape(shape).astype(np.float32)
    if expected != flat.size:
        raise CheckpointError(f"blob holds {flat.size} floats, manifest describes {expected}")
    return Checkpoint(manifest["epoch"], manifest["mode"], arch, tensors, manifest["optim_steps"],
                      manifest["pool_sizes"], manifest["rng_state"], path)


def state_from_checkpoint(ckpt: Checkpoint, config: TrainConfig, frozen_g1: nn.Module | None = None) -> TrainState:
    if ckpt.mode != config.mode:
        raise CheckpointError(f"checkpoint mode {ckpt.mode!r} does not match config mode {config.mode!r}")
    state = init_state(config, frozen_g1)
    for role, net in state.nets.items():
        if ckpt.arch.get(role) != net.config:
            raise CheckpointError(f"{role}: checkpoint architecture differs from config")
        _load_module(net, ckpt.tensors, f"net/{role}/")
    for name, opt in state.optimizers.items():
        params = [p for g in opt.param_groups for p in g["params"]]
        steps = ckpt.optim_steps[name]
        if len(steps) != len(params):
            raise CheckpointError(f"optimiser {name}: parameter count mismatch")
        for i, (p, step) in enumerate(zip(params, steps)):
            if step == 0:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(step), dtype=torch.float32),
                "exp_avg": torch.from_numpy(ckpt.tensors[f"opt/{name}/{i}/exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(ckpt.tensors[f"opt/{name}/{i}/exp_avg_sq"].copy()),
            }
    for name, pool in state.pools.items():
        pool.images = [torch.from_numpy(ckpt.tensors[f"pool/{name}/{i}"].copy())
                       for i in range(ckpt.pool_sizes.get(name, 0))]
    state.rng.bit_generator.state = ckpt.rng_state
    state.epoch = ckpt.epoch
    return state


# ---------------------------------------------------------------------------
# training runs


METRIC_COLUMNS = ("epoch",) + REPORT_FIELDS + ("val_dice",)


@dataclass
class EpochRecord:
    epoch: int  # 1-based
    losses: dict
    val_dice: float
    checkpoint: Path | None = None


@dataclass
class TrainingRun:
    config: TrainConfig
    records: list[EpochRecord] = field(default_factory=list)
    out_dir: Path | None = None
    best_checkpoint: Path | None = None
    last_checkpoint: Path | None = None

    @property
    def val_dice(self) -> list[float]:
        return [r.val_dice for r in self.records]


def best_epoch_index(dices: Sequence[float]) -> int:
    """0-based argmax; ties and all-NaN go to the earliest/last epoch respectively."""
    if not dices:
        raise ValueError("empty run")
    finite = [(d, i) for i, d in enumerate(dices) if not math.isnan(d)]
    if not finite:
        return len(dices) - 1
    best = max(d for d, _ in finite)
    return min(i for d, i in finite if d == best)


def select_best_epoch(run: TrainingRun) -> Checkpoint:
    """Checkpoint of the epoch with the highest validation Dice (earliest on ties)."""
    if not run.records:
        raise ValueError("cannot select from an empty run")
    rec = run.records[best_epoch_index(run.val_dice)]
    path = rec.checkpoint
    if path is None or not Path(path).exists():
        path = run.best_checkpoint
    if path is None:
        raise CheckpointError(f"no checkpoint on disk for epoch {rec.epoch}")
    ckpt = load_checkpoint(path)
    if ckpt.epoch != rec.epoch:
        raise CheckpointError(f"checkpoint at {path} is epoch {ckpt.epoch}, expected {rec.epoch}")
    return ckpt


def _fmt(v: float) -> str:
    return repr(float(v))


def _append_metrics(path: Path, rec: EpochRecord) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_COLUMNS)
        w.writerow([rec.epoch] + [_fmt(rec.losses[k]) for k in REPORT_FIELDS] + [_fmt(rec.val_dice)])


def _sources(config: TrainConfig, data: DatasetBundle, oracle_split: LabeledSplit | None):
    """(labeled split, unlabeled split or None, validation split) for a mode."""
    if config.mode == "seg_only":
        if config.seg_source == "A":
            return data.A_train, None, data.A_val
        if oracle_split is None:
            raise ValueError("seg_only on modality B needs an explicit labeled B split")
        val = data.B_test if config.paper_protocol else data.B_val
        return oracle_split, None, val
    val = data.B_test if config.paper_protocol else data.B_val
    return data.A_train, data.B_train, val


def train(
    config: TrainConfig,
    data: DatasetBundle,
    out_dir: str | Path,
    frozen_g1: nn.Module | None = None,
    oracle_split: LabeledSplit | None = None,
    resume_from: str | Path | None = None,
    stop_after: int | None = None,
) -> TrainingRun:
    """Train for ``config.epochs`` epochs, checkpointing and validating each one.

    ``frozen_g1`` is the synthesis generator consumed by ``two_stage_seg``;
    ``oracle_split`` is the labeled target split for ``seg_only`` on B.
    ``stop_after`` ends the run early (used to exercise resume).
    B_train labels are never read here.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labeled, unlabeled, val_split = _sources(config, data, oracle_split)
    if resume_from is not None:
        state = state_from_checkpoint(load_checkpoint(resume_from), config, frozen_g1)
    else:
        state = init_state(config, frozen_g1)
        metrics = out / "metrics.csv"
        if metrics.exists():
            metrics.unlink()
    run = TrainingRun(config, out_dir=out)
    if resume_from is not None and (out / "metrics.csv").exists():
        run.records = _read_records(out / "metrics.csv", out, upto=state.epoch)
        _rewrite_metrics(out / "metrics.csv", run.records)
    data_seed = derive_seed(config.seed, "data")
    best_val = max((r.val_dice for r in run.records if not math.isnan(r.val_dice)), default=-math.inf)

    last_epoch = config.epochs if stop_after is None else min(config.epochs, stop_after)
    for epoch in range(state.epoch, last_epoch):
        n_b = len(unlabeled) if unlabeled is not None else len(labeled)
        order = batch_indices(len(labeled), n_b, data_seed, epoch)
        sums = dict.fromkeys(REPORT_FIELDS, 0.0)
        n_steps = 0
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            x = images_to_tensor([labeled.items[i].image for i, _ in chunk])
            m = labels_to_tensor([labeled.items[i].labels for i, _ in chunk])
            y = images_to_tensor([unlabeled.items[j].image for _, j in chunk]) if unlabeled is not None else None
            state, report = train_step(state, x, m, y)
            for k, v in report.as_dict().items():
                sums[k] += v
            n_steps += 1
        state.epoch = epoch + 1
        losses = {k: v / n_steps for k, v in sums.items()}
        val = mean_dice(state.nets["S"], val_split, config.val_class) if "S" in state.nets else float("nan")
        rec = EpochRecord(epoch + 1, losses, val)

        ckpt_path = out / f"epoch_{epoch + 1:03d}"
        if config.keep_checkpoints == "all":
            save_checkpoint(state, ckpt_path)
            rec.checkpoint = ckpt_path
            run.last_checkpoint = ckpt_path
        else:
            save_checkpoint(state, out / "last")
            run.last_checkpoint = out / "last"
            if not math.isnan(val) and val > best_val:
                save_checkpoint(state, out / "best")
                rec.checkpoint = out / "best"
        if not math.isnan(val) and val > best_val:
            best_val = val
            run.best_checkpoint = rec.checkpoint
        run.records.append(rec)
        _append_metrics(out / "metrics.csv", rec)
        log.info("%s epoch %d: total=%.4f seg=%.4f val_dice=%.4f", config.mode, epoch + 1,
                 losses["total"], losses["seg"], val)
    if run.best_checkpoint is None:
        run.best_checkpoint = run.last_checkpoint
    if config.keep_checkpoints == "best_last":
        for r in run.records:
            if r.checkpoint is not None and r.checkpoint != run.best_checkpoint:
                r.checkpoint = None
    return run


def _read_records(path: Path, out: Path, upto: int) -> list[EpochRecord]:
    recs = []
    with path.open() as fh:
        for row in csv.DictReader(fh):
            ep = int(row["epoch"])
            if ep > upto:
                break
            ck = out / f"epoch_{ep:03d}"
            recs.append(EpochRecord(ep, {k: float(row[k]) for k in REPORT_FIELDS}, float(row["val_dice"]),
                                    ck if ck.exists() else None))
    return recs


def _rewrite_metrics(path: Path, records: list[EpochRecord]) -> None:
    path.unlink()
    for r in records:
        _append_metrics(path, r)


def train_two_stage(config: TrainConfig, data: DatasetBundle, out_dir: str | Path) -> tuple[TrainingRun, TrainingRun]:
    """CycleGAN synthesis, then an independent S on frozen G1 output."""
    out = Path(out_dir)
    syn_cfg = replace(config, mode="two_stage_synthesis")
    syn_run = train(syn_cfg, data, out / "synthesis")
    g1 = load_checkpoint(syn_run.last_checkpoint).network("G1")
    seg_cfg = replace(config, mode="two_stage_seg")
    seg_run = train(seg_cfg, data, out / "segmentation", frozen_g1=g1)
    return syn_run, seg_run


def config_to_json(config: TrainConfig) -> dict:
    d = asdict(config)
    d["weights"] = asdict(config.weights)
    return d
