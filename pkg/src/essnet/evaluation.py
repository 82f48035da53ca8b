"""Dice scoring, Wilcoxon signed-rank tests and the four-method comparison."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .data import (
    NUM_CLASSES,
    SPLEEN,
    DatasetBundle,
    Image,
    Item,
    LabeledSplit,
    LabelMap,
    labels_to_png_array,
    save_png,
    to_png_array,
)

log = logging.getLogger(__name__)

METHODS = ("source_only", "oracle_target", "two_stage", "essnet")

# Published clinical medians; recorded for context only, the data is private.
PAPER_MEDIANS = {"essnet": 0.9188, "two_stage": 0.8801, "multi_atlas": 0.9125, "oracle_target": 0.9107}


def dice(pred: np.ndarray, ref: np.ndarray) -> float:
    """2|P & R| / (|P| + |R|); 1.0 if both masks are empty."""
    pred = np.asarray(pred, dtype=bool)
    ref = np.asarray(ref, dtype=bool)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    denom = int(pred.sum()) + int(ref.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, ref).sum()) / denom


@dataclass(frozen=True)
class DiceResult:
    per_class: dict  # class id -> Dice
    mean_foreground: float
    image_id: str = ""


def dice_multiclass(pred: LabelMap | np.ndarray, ref: LabelMap | np.ndarray,
                    classes: Sequence[int] | None = None, image_id: str = "") -> DiceResult:
    p = pred.ids if isinstance(pred, LabelMap) else np.asarray(pred)
    r = ref.ids if isinstance(ref, LabelMap) else np.asarray(ref)
    if p.shape != r.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {r.shape}")
    if classes is None:
        n = ref.num_classes if isinstance(ref, LabelMap) else int(max(p.max(initial=0), r.max(initial=0))) + 1
        classes = range(n)
    per = {int(c): dice(p == c, r == c) for c in classes}
    fg = [v for c, v in per.items() if c != 0]
    return DiceResult(per, float(np.mean(fg)) if fg else float("nan"), image_id)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class WilcoxonOutcome:
    W: float  # sum of ranks of positive differences
    n: int
    p: float  # two-sided
    significant: bool
    method: str  # "exact" | "normal"


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_null_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """counts[s] = number of sign patterns whose positive doubled-rank sum is s."""
    counts = np.zeros(sum(doubled_ranks) + 1)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:len(counts) - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], alpha: float = 0.05,
                         exact_max_n: int = 12) -> WilcoxonOutcome:
    """Two-sided paired test on a - b.

    Zero differences are dropped and tied magnitudes share their average
    rank.  Up to ``exact_max_n`` pairs the null distribution is counted
    exactly over all sign assignments; beyond that a tie- and
    continuity-corrected normal approximation is used.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n < 5:
        raise InsufficientDataError(f"need at least 5 non-zero differences, got {n}")
    ranks = _average_ranks(np.abs(d))
    w = float(ranks[d > 0].sum())
    if n <= exact_max_n:
        doubled = [int(round(2 * r)) for r in ranks]
        counts = _exact_null_counts(doubled)
        w2 = int(round(2 * w))
        total = counts.sum()
        p = 2.0 * min(counts[:w2 + 1].sum(), counts[w2:].sum()) / total
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_counts ** 3) - tie_counts).sum()) / 48.0
        dev = w - mean
        dev = math.copysign(max(abs(dev) - 0.5, 0.0), dev)
        p = 2.0 * float(norm.sf(abs(dev) / math.sqrt(var)))
        method = "normal"
    p = min(max(p, np.finfo(float).tiny), 1.0)
    return WilcoxonOutcome(w, n, p, p < alpha, method)


# ---------------------------------------------------------------------------
# comparison harness


@dataclass
class ComparisonReport:
    methods: tuple
    image_ids: list[str]
    per_class: dict  # method -> (n_images, C) array of Dice
    spleen_dice: dict  # method -> list[float]
    medians: dict
    pairwise: dict  # (method_a, method_b) -> WilcoxonOutcome | None
    best_epochs: dict = field(default_factory=dict)
    reference_medians: dict = field(default_factory=lambda: dict(PAPER_MEDIANS))
    predictions: dict = field(default_factory=dict)  # method -> list[LabelMap]
    test_images: list = field(default_factory=list)
    reference_labels: list = field(default_factory=list)
    synthesized: dict = field(default_factory=dict)  # method -> list[Image], G1 applied to A images
    label_reads: dict = field(default_factory=dict)  # method -> B_train label reads after it trained

    def means(self) -> dict:
        return {m: float(np.mean(v)) for m, v in self.spleen_dice.items()}


def pairwise_tests(spleen: dict, methods: Sequence[str]) -> dict:
    out = {}
    for ma, mb in itertools.combinations(methods, 2):
        try:
            out[(ma, mb)] = wilcoxon_signed_rank(spleen[ma], spleen[mb])
        except InsufficientDataError:
            out[(ma, mb)] = None
    return out


def build_report(bundle_test: LabeledSplit, predictions: dict, num_classes: int = NUM_CLASSES,
                 spleen_class: int = SPLEEN) -> ComparisonReport:
    methods = tuple(predictions)
    ids = [it.item_id for it in bundle_test.items]
    refs = bundle_test.labels
    per_class, spleen = {}, {}
    for m, preds in predictions.items():
        if len(preds) != len(refs):
            raise ValueError(f"{m}: {len(preds)} predictions for {len(refs)} test images")
        rows = [dice_multiclass(p, r, range(num_classes)) for p, r in zip(preds, refs)]
        per_class[m] = np.array([[row.per_class[c] for c in range(num_classes)] for row in rows])
        spleen[m] = [row.per_class[spleen_class] for row in rows]
    medians = {m: float(np.median(v)) for m, v in spleen.items()}
    return ComparisonReport(methods, ids, per_class, spleen, medians, pairwise_tests(spleen, methods),
                            predictions=dict(predictions), test_images=bundle_test.images,
                            reference_labels=refs)


def oracle_split(bundle: DatasetBundle) -> LabeledSplit:
    """Labeled copy of B_train for the oracle baseline.

    Reads every label through the sequestration guard, so the access counter
    records it.  Only the oracle may call this.
    """
    guard = bundle.B_train.labels
    items = [Item(it.item_id, it.anatomy_seed, it.render_seed, it.image, guard.read(i))
             for i, it in enumerate(bundle.B_train.items)]
    return LabeledSplit("B_train_oracle", items)


def run_comparison(bundle: DatasetBundle, config, out_dir: str | Path,
                   methods: Sequence[str] = METHODS, n_synth: int = 3) -> ComparisonReport:
    """Train every method with shared seeds and hyperparameters and score on B_test.

    ``config`` is the shared :class:`essnet.trainer.TrainConfig`; its mode is
    overridden per method.  The label-free methods run before the oracle and
    the sequestration counter is asserted to be zero after them.
    """
    from .trainer import load_checkpoint, segment_many, select_best_epoch, train, train_two_stage, translate

    out = Path(out_dir)
    test_ids = {it.anatomy_seed for it in bundle.B_test.items}
    predictions, best_epochs, synthesized, label_reads = {}, {}, {}, {}
    a_images = bundle.A_train.images[:n_synth]
    order = [m for m in ("essnet", "two_stage", "source_only", "oracle_target") if m in methods]
    for method in order:
        log.info("comparison: training %s", method)
        if method == "essnet":
            run = train(replace(config, mode="essnet"), bundle, out / method)
            ckpt = select_best_epoch(run)
            synthesized[method] = [translate(ckpt.network("G1"), im) for im in a_images]
        elif method == "two_stage":
            syn_run, run = train_two_stage(config, bundle, out / method)
            g1 = load_checkpoint(syn_run.last_checkpoint).network("G1")
            synthesized[method] = [translate(g1, im) for im in a_images]
            ckpt = select_best_epoch(run)
        elif method == "source_only":
            run = train(replace(config, mode="seg_only", seg_source="A"), bundle, out / method)
            ckpt = select_best_epoch(run)
        elif method == "oracle_target":
            if bundle.B_train.labels.access_count != 0:
                raise AssertionError("B_train labels were read before the oracle baseline")
            oracle = oracle_split(bundle)
            if {it.anatomy_seed for it in oracle.items} & test_ids:
                raise AssertionError("oracle training split overlaps B_test")
            run = train(replace(config, mode="seg_only", seg_source="B"), bundle, out / method,
                        oracle_split=oracle)
            ckpt = select_best_epoch(run)
        else:
            raise ValueError(f"unknown method {method!r}")
        best_epochs[method] = ckpt.epoch
        label_reads[method] = bundle.B_train.labels.access_count
        predictions[method] = segment_many(ckpt.network("S"), bundle.B_test.images)
    ordered = {m: predictions[m] for m in methods}
    report = build_report(bundle.B_test, ordered)
    report.best_epochs = {m: best_epochs[m] for m in methods}
    report.synthesized = synthesized
    report.label_reads = label_reads
    return report


# ---------------------------------------------------------------------------
# report files


def montage(rows: Sequence[Sequence[np.ndarray]], sep: int = 2, sep_value: int = 255) -> np.ndarray:
    """Grid of equally sized uint8 tiles with ``sep``-pixel separators."""
    h, w = rows[0][0].shape
    n_rows, n_cols = len(rows), len(rows[0])
    canvas = np.full((n_rows * h + (n_rows - 1) * sep, n_cols * w + (n_cols - 1) * sep), sep_value, dtype=np.uint8)
    for i, row in enumerate(rows):
        if len(row) != n_cols:
            raise ValueError("ragged montage rows")
        for j, tile in enumerate(row):
            if tile.shape != (h, w):
                raise ValueError(f"tile shape {tile.shape} differs from {(h, w)}")
            canvas[i * (h + sep):i * (h + sep) + h, j * (w + sep):j * (w + sep) + w] = tile
    return canvas


def montage_rows(report: ComparisonReport, method: str) -> list[list[np.ndarray]]:
    """Rows for the lowest, median and highest Dice test images of ``method``.

    Columns: real B | G1 applied to an A image | segmentation | reference.
    """
    scores = np.asarray(report.spleen_dice[method])
    order = np.argsort(scores, kind="mergesort")
    picks = [int(order[0]), int(order[len(order) // 2]), int(order[-1])]
    synth = report.synthesized.get(method, [])
    rows = []
    for k, idx in enumerate(picks):
        real = to_png_array(report.test_images[idx].pixels)
        fake = to_png_array(synth[k % len(synth)].pixels) if synth else np.zeros_like(real)
        seg = labels_to_png_array(report.predictions[method][idx].ids)
        ref = labels_to_png_array(report.reference_labels[idx].ids)
        rows.append([real, fake, seg, ref])
    return rows


def emit_report(report: ComparisonReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    n_classes = next(iter(report.per_class.values())).shape[1]
    results = out / "results.csv"
    with results.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "image_id", "class_id", "dice"])
        for m in report.methods:
            for i, img_id in enumerate(report.image_ids):
                for c in range(n_classes):
                    w.writerow([m, img_id, c, repr(float(report.per_class[m][i, c]))])
    written.append(results)

    stats = out / "stats.csv"
    with stats.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "method_a", "method_b", "value", "W", "n", "p", "significant", "note"])
        for m in report.methods:
            w.writerow(["median", m, "", repr(report.medians[m]), "", "", "", "", "spleen Dice on B_test"])
            w.writerow(["mean", m, "", repr(float(np.mean(report.spleen_dice[m]))), "", "", "", "", ""])
            if m in report.best_epochs:
                w.writerow(["best_epoch", m, "", report.best_epochs[m], "", "", "", "", ""])
        for m, v in report.reference_medians.items():
            w.writerow(["reference_median", m, "", repr(v), "", "", "", "",
                        "published clinical value; not reproducible here"])
        for (ma, mb), res in report.pairwise.items():
            if res is None:
                w.writerow(["wilcoxon", ma, mb, "", "", "", "", "", "fewer than 5 non-zero differences"])
            else:
                w.writerow(["wilcoxon", ma, mb, "", repr(res.W), res.n, repr(res.p),
                            int(res.significant), res.method])
    written.append(stats)

    for m in report.methods:
        if m not in report.predictions:
            continue
        path = out / f"montage_{m}.png"
        save_png(montage(montage_rows(report, m)), path)
        written.append(path)
    return written
