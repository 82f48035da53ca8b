"""Synthetic two-modality abdominal phantoms.

Each subject is a set of rotated ellipses (body plus five organs) rendered
into a label map, then painted with a modality style.  The "A" style plays
the role of the labeled source modality and "B" the unlabeled target.
Labels of the B training split live behind :class:`SequesteredLabels`, which
counts every read so training code can prove it never looked.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image as PILImage

NUM_CLASSES = 7
CLASS_NAMES = ("background", "body", "liver", "stomach", "kidney_r", "kidney_l", "spleen")
BACKGROUND, BODY, LIVER, STOMACH, KIDNEY_R, KIDNEY_L, SPLEEN = range(NUM_CLASSES)
# z-order: later entries overwrite earlier ones
ORGAN_ORDER = ("liver", "stomach", "kidney_r", "kidney_l", "spleen")

MANIFEST_FORMAT = "essnet-dataset/1"
SPLIT_FORMAT = "essnet-split/1"


class DataError(Exception):
    """Raised for malformed datasets or invalid data-generation requests."""


class ShapeMismatchError(DataError):
    pass


class CorruptManifestError(DataError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Image:
    pixels: np.ndarray  # (H, W) float32 in [-1, 1]
    modality: str  # "A" or "B"

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise ShapeMismatchError(f"image must be 2-D, got shape {px.shape}")
        if self.modality not in ("A", "B"):
            raise DataError(f"unknown modality {self.modality!r}")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class LabelMap:
    ids: np.ndarray  # (H, W) uint8
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 2:
            raise ShapeMismatchError(f"label map must be 2-D, got shape {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_classes):
            raise DataError(f"label ids must lie in [0, {self.num_classes})")
        object.__setattr__(self, "ids", _frozen(ids.astype(np.uint8)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape


# ---------------------------------------------------------------------------
# anatomy


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float  # semi-axis along rows before rotation
    rx: float  # semi-axis along columns before rotation
    angle: float  # radians

    def mask(self, height: int, width: int) -> np.ndarray:
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        dy, dx = yy + 0.5 - self.cy, xx + 0.5 - self.cx
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.rx) ** 2 + (v / self.ry) ** 2 <= 1.0

    def boundary(self, n: int = 72) -> np.ndarray:
        t = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
        u, v = self.rx * np.cos(t), self.ry * np.sin(t)
        c, s = math.cos(self.angle), math.sin(self.angle)
        x = self.cx + u * c - v * s
        y = self.cy + u * s + v * c
        return np.stack([y, x], axis=1)

    def contains(self, points: np.ndarray) -> np.ndarray:
        dy, dx = points[:, 0] - self.cy, points[:, 1] - self.cx
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.rx) ** 2 + (v / self.ry) ** 2 <= 1.0

    def scaled(self, k: float) -> "Ellipse":
        return Ellipse(self.cy, self.cx, self.ry * k, self.rx * k, self.angle)


@dataclass(frozen=True)
class AnatomyConfig:
    height: int = 64
    width: int = 64
    spleen_scale: tuple[float, float] = (1.0, 1.8)
    jitter: float = 0.06  # organ centre jitter, fraction of body semi-axis
    size_jitter: float = 0.15


# Organ placement relative to the body ellipse: (u, v, rx, ry) where u, v are
# centre offsets and rx, ry semi-axes, all in units of the body semi-axes.
_ORGAN_TEMPLATE = {
    "liver": (-0.38, -0.12, 0.42, 0.55),
    "stomach": (0.32, -0.40, 0.26, 0.24),
    "kidney_r": (-0.36, 0.50, 0.13, 0.22),
    "kidney_l": (0.30, 0.52, 0.13, 0.22),
    "spleen": (0.58, 0.02, 0.15, 0.26),
}
_CLASS_OF = {"liver": LIVER, "stomach": STOMACH, "kidney_r": KIDNEY_R,
             "kidney_l": KIDNEY_L, "spleen": SPLEEN}


@dataclass(frozen=True)
class AnatomyLayout:
    height: int
    width: int
    body: Ellipse
    organs: dict  # organ name -> Ellipse
    spleen_scale: float
    labels: LabelMap

    def __eq__(self, other):
        if not isinstance(other, AnatomyLayout):
            return NotImplemented
        return (self.height, self.width, self.body, self.organs, self.spleen_scale) == (
            other.height, other.width, other.body, other.organs, other.spleen_scale
        ) and np.array_equal(self.labels.ids, other.labels.ids)


def _check_size(height: int, width: int) -> None:
    if height < 32 or width < 32:
        raise DataError(f"image size must be at least 32x32, got {height}x{width}")
    if height % 4 or width % 4:
        raise DataError(f"image size must be divisible by 4, got {height}x{width}")


def sample_anatomy(seed: int, config: AnatomyConfig = AnatomyConfig()) -> AnatomyLayout:
    """Draw one subject's anatomy; deterministic in ``seed``."""
    H, W = config.height, config.width
    _check_size(H, W)
    rng = np.random.default_rng(seed)

    def jit(scale):
        return rng.uniform(-scale, scale)

    body = Ellipse(
        cy=H * (0.5 + jit(0.02)),
        cx=W * (0.5 + jit(0.02)),
        ry=H * (0.33 + jit(0.03)),
        rx=W * (0.41 + jit(0.03)),
        angle=jit(0.08),
    )
    spleen_scale = float(rng.uniform(*config.spleen_scale))
    cb, sb = math.cos(body.angle), math.sin(body.angle)
    organs = {}
    for name in ORGAN_ORDER:
        u, v, rx, ry = _ORGAN_TEMPLATE[name]
        u += jit(config.jitter)
        v += jit(config.jitter)
        k = 1.0 + jit(config.size_jitter)
        if name == "spleen":
            k *= spleen_scale
        du, dv = u * body.rx, v * body.ry
        org = Ellipse(
            cy=body.cy + du * sb + dv * cb,
            cx=body.cx + du * cb - dv * sb,
            ry=max(ry * k * body.ry, 1.5),
            rx=max(rx * k * body.rx, 1.5),
            angle=body.angle + jit(0.3),
        )
        # shrink until the organ sits inside the body
        for _ in range(60):
            if body.contains(org.boundary()).all():
                break
            org = org.scaled(0.95)
        organs[name] = org

    ids = np.zeros((H, W), dtype=np.uint8)
    ids[body.mask(H, W)] = BODY
    for name in ORGAN_ORDER:
        ids[organs[name].mask(H, W)] = _CLASS_OF[name]
    return AnatomyLayout(H, W, body, organs, spleen_scale, LabelMap(ids))


# ---------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class ModalityStyle:
    name: str
    class_means: tuple  # intensity per class id, in [-1, 1]
    noise_sigma: float = 0.04
    bias_amplitude: float = 0.08
    gamma: float = 1.0


# Orderings differ: in A the kidneys/stomach are brightest and the liver dark,
# in B the liver/spleen are bright and the stomach is darker than the body.
STYLE_A = ModalityStyle("A", (-0.9, -0.35, -0.55, 0.55, 0.75, 0.75, 0.25), 0.04, 0.08, 1.0)
STYLE_B = ModalityStyle("B", (-0.9, 0.05, 0.45, -0.45, 0.8, 0.8, 0.6), 0.04, 0.08, 1.3)


def _bias_field(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    field = np.zeros((H, W))
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 1.2, size=2)
        py, px = rng.uniform(0, 2 * math.pi, size=2)
        field += np.cos(2 * math.pi * fy * yy / H + py) * np.cos(2 * math.pi * fx * xx / W + px)
    return field / 3.0


def render_modality(layout: AnatomyLayout, style: ModalityStyle, seed: int) -> Image:
    """Paint ``layout`` with ``style``; deterministic in (layout, style, seed)."""
    means = np.asarray(style.class_means, dtype=np.float64)
    if means.shape != (NUM_CLASSES,):
        raise DataError(f"style needs {NUM_CLASSES} class means")
    values = means[layout.labels.ids]
    rng = np.random.default_rng(seed)
    H, W = layout.height, layout.width
    if style.gamma != 1.0 or style.bias_amplitude:
        intensity = ((values + 1.0) / 2.0) ** style.gamma
        if style.bias_amplitude:
            intensity = intensity * (1.0 + style.bias_amplitude * _bias_field(rng, H, W))
        values = 2.0 * intensity - 1.0
    if style.noise_sigma:
        values = values + rng.normal(0.0, style.noise_sigma, size=(H, W))
    modality = style.name if style.name in ("A", "B") else "A"
    return Image(np.clip(values, -1.0, 1.0).astype(np.float32), modality)


# ---------------------------------------------------------------------------
# splits and bundle


@dataclass(frozen=True)
class Item:
    item_id: str
    anatomy_seed: int
    render_seed: int
    image: Image
    labels: LabelMap | None


class SequesteredLabels:
    """Label store that counts every read.

    Training entry points receive B-train through this guard; a non-zero
    ``access_count`` after training means target labels leaked.
    """

    def __init__(self, labels: Sequence[LabelMap]):
        self._labels = tuple(labels)
        self.access_count = 0

    def __len__(self):
        return len(self._labels)

    def read(self, index: int) -> LabelMap:
        self.access_count += 1
        return self._labels[index]

    def _unguarded(self) -> tuple[LabelMap, ...]:
        # persistence only; not a consumer read
        return self._labels


@dataclass
class LabeledSplit:
    name: str
    items: list[Item]

    def __len__(self):
        return len(self.items)

    @property
    def images(self) -> list[Image]:
        return [it.image for it in self.items]

    @property
    def labels(self) -> list[LabelMap]:
        return [it.labels for it in self.items]


@dataclass
class UnlabeledSplit:
    """Images whose labels sit behind a :class:`SequesteredLabels` guard."""

    name: str
    items: list[Item]  # Item.labels is always None here
    labels: SequesteredLabels

    def __len__(self):
        return len(self.items)

    @property
    def images(self) -> list[Image]:
        return [it.image for it in self.items]


@dataclass(frozen=True)
class DatasetConfig:
    height: int = 64
    width: int = 64
    n_a_train: int = 60
    n_a_val: int = 10
    n_b_train: int = 60
    n_b_val: int = 10
    n_b_test: int = 19
    seed: int = 0
    spleen_scale: tuple[float, float] = (1.0, 1.8)
    style_a: ModalityStyle = STYLE_A
    style_b: ModalityStyle = STYLE_B

    def counts(self) -> dict[str, int]:
        return {"A_train": self.n_a_train, "A_val": self.n_a_val, "B_train": self.n_b_train,
                "B_val": self.n_b_val, "B_test": self.n_b_test}


@dataclass
class DatasetBundle:
    A_train: LabeledSplit
    A_val: LabeledSplit
    B_train: UnlabeledSplit
    B_val: LabeledSplit
    B_test: LabeledSplit
    config: DatasetConfig = field(default_factory=DatasetConfig)

    @property
    def seed(self) -> int:
        return self.config.seed

    def counts(self) -> dict[str, int]:
        return {n: len(getattr(self, n)) for n in SPLIT_NAMES}


SPLIT_NAMES = ("A_train", "A_val", "B_train", "B_val", "B_test")


def _make_items(prefix, anatomy_seeds, render_seeds, acfg, style):
    items = []
    for i, (aseed, rseed) in enumerate(zip(anatomy_seeds, render_seeds)):
        layout = sample_anatomy(int(aseed), acfg)
        img = render_modality(layout, style, int(rseed))
        items.append(Item(f"{prefix}_{i:04d}", int(aseed), int(rseed), img, layout.labels))
    return items


def build_dataset(config: DatasetConfig = DatasetConfig(), out_dir: str | Path | None = None) -> DatasetBundle:
    """Generate every split from one master seed; optionally persist it."""
    counts = config.counts()
    for name, n in counts.items():
        if n < 1:
            raise DataError(f"split {name} needs at least one item, got {n}")
    _check_size(config.height, config.width)
    acfg = AnatomyConfig(config.height, config.width, tuple(config.spleen_scale))
    rng = np.random.default_rng(config.seed)
    total = sum(counts.values())
    # disjoint anatomy seeds across all splits: unpaired by construction
    anatomy_seeds = rng.choice(2**31 - 1, size=total, replace=False)
    render_seeds = rng.integers(0, 2**31 - 1, size=total)
    splits, start = {}, 0
    for name in SPLIT_NAMES:
        n = counts[name]
        style = config.style_a if name.startswith("A") else config.style_b
        splits[name] = _make_items(name, anatomy_seeds[start:start + n],
                                   render_seeds[start:start + n], acfg, style)
        start += n

    b_items = splits["B_train"]
    guard = SequesteredLabels([it.labels for it in b_items])
    bundle = DatasetBundle(
        A_train=LabeledSplit("A_train", splits["A_train"]),
        A_val=LabeledSplit("A_val", splits["A_val"]),
        B_train=UnlabeledSplit("B_train", [Item(it.item_id, it.anatomy_seed, it.render_seed, it.image, None)
                                           for it in b_items], guard),
        B_val=LabeledSplit("B_val", splits["B_val"]),
        B_test=LabeledSplit("B_test", splits["B_test"]),
        config=config,
    )
    if out_dir is not None:
        save_dataset(bundle, out_dir)
    return bundle


def unpaired_batches(
    A: LabeledSplit, B: UnlabeledSplit | LabeledSplit, seed: int, batch_size: int = 1, epoch: int = 0
) -> Iterator[tuple[list[Image], list[LabelMap], list[Image]]]:
    """One epoch of (x, m, y) batches with x, m from ``A`` and y from ``B``.

    The two splits are shuffled independently; the epoch length is
    ``max(|A|, |B|)`` draws with the shorter split cycled.  Never reads B's
    labels.
    """
    if len(A) == 0 or len(B) == 0:
        raise DataError("both splits must be non-empty")
    order = batch_indices(len(A), len(B), seed, epoch)
    a_items, b_items = A.items, B.items
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        yield ([a_items[i].image for i, _ in chunk], [a_items[i].labels for i, _ in chunk],
               [b_items[j].image for _, j in chunk])


def batch_indices(len_a: int, len_b: int, seed: int, epoch: int = 0) -> list[tuple[int, int]]:
    """(A-index, B-index) draw order used by :func:`unpaired_batches`."""
    n = max(len_a, len_b)
    rng = np.random.default_rng([seed, epoch])
    order_a = np.concatenate([rng.permutation(len_a) for _ in range(-(-n // len_a))])[:n]
    order_b = np.concatenate([rng.permutation(len_b) for _ in range(-(-n // len_b))])[:n]
    return list(zip(order_a.tolist(), order_b.tolist()))


# ---------------------------------------------------------------------------
# persistence


def to_png_array(pixels: np.ndarray) -> np.ndarray:
    """Linear map [-1, 1] -> [0, 255] (view-only, lossy)."""
    p = np.clip(np.asarray(pixels, dtype=np.float64), -1.0, 1.0)
    return np.round((p + 1.0) * 127.5).astype(np.uint8)


def labels_to_png_array(ids: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    return np.round(np.asarray(ids, dtype=np.float64) * 255.0 / (num_classes - 1)).astype(np.uint8)


def save_png(array: np.ndarray, path: str | Path) -> None:
    PILImage.fromarray(np.asarray(array, dtype=np.uint8), mode="L").save(path, optimize=False)


def save_split(items: Sequence[Item], path: str | Path, name: str = "split",
               labels: Sequence[LabelMap | None] | None = None) -> None:
    """Write a split as raw little-endian float32 images and uint8 label maps."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    labels = [it.labels for it in items] if labels is None else list(labels)
    entries = []
    for it, lab in zip(items, labels):
        d = path / it.item_id
        d.mkdir(exist_ok=True)
        d.joinpath("image.f32").write_bytes(it.image.pixels.astype("<f4").tobytes())
        if lab is not None:
            d.joinpath("labels.u8").write_bytes(lab.ids.astype(np.uint8).tobytes())
        entries.append({"id": it.item_id, "anatomy_seed": it.anatomy_seed, "render_seed": it.render_seed,
                        "modality": it.image.modality, "height": it.image.shape[0],
                        "width": it.image.shape[1], "labeled": lab is not None})
    manifest = {"format": SPLIT_FORMAT, "name": name, "items": entries}
    path.joinpath("split.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_split(path: str | Path) -> list[Item]:
    path = Path(path)
    try:
        manifest = json.loads(path.joinpath("split.json").read_text())
    except FileNotFoundError as e:
        raise DataError(f"missing split manifest: {e.filename}") from e
    except json.JSONDecodeError as e:
        raise CorruptManifestError(f"{path / 'split.json'}: {e}") from e
    if manifest.get("format") != SPLIT_FORMAT or not isinstance(manifest.get("items"), list):
        raise CorruptManifestError(f"{path / 'split.json'}: unrecognised split manifest")
    items = []
    for e in manifest["items"]:
        try:
            h, w = int(e["height"]), int(e["width"])
            d = path / e["id"]
            raw = d.joinpath("image.f32").read_bytes()
            lab_raw = d.joinpath("labels.u8").read_bytes() if e["labeled"] else None
        except KeyError as k:
            raise CorruptManifestError(f"split entry missing field {k}") from k
        except FileNotFoundError as f:
            raise DataError(f"missing file: {f.filename}") from f
        if len(raw) != 4 * h * w:
            raise ShapeMismatchError(f"{e['id']}/image.f32: expected {4 * h * w} bytes, got {len(raw)}")
        px = np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float32)
        lab = None
        if lab_raw is not None:
            if len(lab_raw) != h * w:
                raise ShapeMismatchError(f"{e['id']}/labels.u8: expected {h * w} bytes, got {len(lab_raw)}")
            lab = LabelMap(np.frombuffer(lab_raw, dtype=np.uint8).reshape(h, w))
        items.append(Item(e["id"], int(e["anatomy_seed"]), int(e["render_seed"]), Image(px, e["modality"]), lab))
    return items


def save_dataset(bundle: DatasetBundle, out_dir: str | Path, export_png: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = bundle.config
    for name in SPLIT_NAMES:
        split = getattr(bundle, name)
        if isinstance(split, UnlabeledSplit):
            save_split(split.items, out / name, name, labels=split.labels._unguarded())
        else:
            save_split(split.items, out / name, name)
        if export_png:
            view = out / "view" / name
            view.mkdir(parents=True, exist_ok=True)
            for it in split.items:
                save_png(to_png_array(it.image.pixels), view / f"{it.item_id}.png")
    manifest = {
        "format": MANIFEST_FORMAT,
        "height": cfg.height,
        "width": cfg.width,
        "num_classes": NUM_CLASSES,
        "class_names": list(CLASS_NAMES),
        "seed": cfg.seed,
        "spleen_scale": list(cfg.spleen_scale),
        "styles": {s.name: {"class_means": list(s.class_means), "noise_sigma": s.noise_sigma,
                            "bias_amplitude": s.bias_amplitude, "gamma": s.gamma}
                   for s in (cfg.style_a, cfg.style_b)},
        "counts": bundle.counts(),
        "splits": {name: [it.item_id for it in getattr(bundle, name).items] for name in SPLIT_NAMES},
        "sequestered": ["B_train"],
    }
    out.joinpath("manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def load_dataset(path: str | Path) -> DatasetBundle:
    path = Path(path)
    try:
        manifest = json.loads(path.joinpath("manifest.json").read_text())
    except FileNotFoundError as e:
        raise DataError(f"missing dataset manifest: {e.filename}") from e
    except json.JSONDecodeError as e:
        raise CorruptManifestError(f"{path / 'manifest.json'}: {e}") from e
    if manifest.get("format") != MANIFEST_FORMAT:
        raise CorruptManifestError(f"{path / 'manifest.json'}: unrecognised format")
    try:
        styles = {k: ModalityStyle(k, tuple(v["class_means"]), v["noise_sigma"], v["bias_amplitude"], v["gamma"])
                  for k, v in manifest["styles"].items()}
        counts = manifest["counts"]
        cfg = DatasetConfig(
            height=manifest["height"], width=manifest["width"],
            n_a_train=counts["A_train"], n_a_val=counts["A_val"], n_b_train=counts["B_train"],
            n_b_val=counts["B_val"], n_b_test=counts["B_test"], seed=manifest["seed"],
            spleen_scale=tuple(manifest["spleen_scale"]), style_a=styles["A"], style_b=styles["B"],
        )
    except (KeyError, TypeError) as e:
        raise CorruptManifestError(f"{path / 'manifest.json'}: missing or bad field {e}") from e
    splits = {}
    for name in SPLIT_NAMES:
        items = load_split(path / name)
        if [it.item_id for it in items] != manifest["splits"][name]:
            raise CorruptManifestError(f"split {name} does not match dataset manifest")
        splits[name] = items
    b = splits["B_train"]
    return DatasetBundle(
        A_train=LabeledSplit("A_train", splits["A_train"]),
        A_val=LabeledSplit("A_val", splits["A_val"]),
        B_train=UnlabeledSplit("B_train", [Item(i.item_id, i.anatomy_seed, i.render_seed, i.image, None) for i in b],
                               SequesteredLabels([i.labels for i in b])),
        B_val=LabeledSplit("B_val", splits["B_val"]),
        B_test=LabeledSplit("B_test", splits["B_test"]),
        config=cfg,
    )
