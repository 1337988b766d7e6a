"""mIoU/ASR metrics, prompt-mode evaluation, corruptions and report files."""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .attack import apply_uap
from .datagen import Sample, extract_box_prompt, extract_point_prompt
from .errors import ContractError, FormatError
from .minisam import MiniSam, binarize
from .prompts import MultiPoint, Point

MODES = ("point", "box", "multipoint", "everything")
REPORT_VERSION = 1
CSV_HEADER = ["split", "mode", "clean_miou", "adv_miou", "asr"]

CONTRAST_FACTORS = {1: 0.8, 2: 0.6, 3: 0.4, 4: 0.3, 5: 0.2}
BRIGHTNESS_SHIFTS = {1: 0.1, 2: 0.2, 3: 0.3, 4: 0.4, 5: 0.5}
MIN_EVERYTHING_AREA = 0.005  # fraction of the image


def iou(pred: np.ndarray, truth: np.ndarray) -> float:
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)


def miou(predictions: Sequence[np.ndarray], truths: Sequence[np.ndarray]) -> float:
    """Mean IoU over pairs; empty/empty scores 1, exactly one empty scores 0."""
    if len(predictions) != len(truths):
        raise ContractError(f"{len(predictions)} predictions vs {len(truths)} truths")
    if not predictions:
        raise ContractError("miou of an empty list")
    scores = []
    for p, t in zip(predictions, truths):
        if p.shape != t.shape:
            raise ContractError(f"mask shapes differ: {p.shape} vs {t.shape}")
        scores.append(iou(p, t))
    return float(np.mean(scores))


@dataclass
class EvalCell:
    split: str
    mode: str
    clean_miou: float
    adv_miou: float
    n_pairs: int = 0

    @property
    def asr(self) -> float:
        """Attack success rate in percentage points."""
        return 100.0 * self.clean_miou - 100.0 * self.adv_miou

    def to_dict(self) -> dict:
        d = asdict(self)
        d["asr"] = self.asr
        return d


@dataclass
class EvalReport:
    cells: List[EvalCell] = field(default_factory=list)
    seed: int = 0
    config: dict = field(default_factory=dict)
    wall_clock: Optional[float] = None  # left out unless timing is requested, so reruns are byte-identical

    def cell(self, split: str, mode: str) -> EvalCell:
        for c in self.cells:
            if c.split == split and c.mode == mode:
                return c
        raise KeyError((split, mode))

    def to_dict(self) -> dict:
        return {"version": REPORT_VERSION, "seed": self.seed, "config": self.config,
                "wall_clock": self.wall_clock, "cells": [c.to_dict() for c in self.cells]}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("version") != REPORT_VERSION:
            raise FormatError(f"unsupported report version {d.get('version')!r}")
        cells = []
        for c in d["cells"]:
            cell = EvalCell(c["split"], c["mode"], float(c["clean_miou"]), float(c["adv_miou"]),
                            int(c.get("n_pairs", 0)))
            if "asr" in c and abs(cell.asr - float(c["asr"])) > 1e-9:
                raise FormatError(f"cell {c['split']}/{c['mode']}: stored ASR disagrees with clean - adv")
            cells.append(cell)
        return cls(cells=cells, seed=int(d.get("seed", 0)), config=d.get("config", {}),
                   wall_clock=None if d.get("wall_clock") is None else float(d["wall_clock"]))


# ---------------------------------------------------------------------------
# prompt modes


def instance_prompts(sample: Sample, mode: str, rng: np.random.Generator, n_points: int = 3):
    if mode == "point":
        return [extract_point_prompt(m, rng) for m in sample.instances]
    if mode == "box":
        return [extract_box_prompt(m) for m in sample.instances]
    if mode == "multipoint":
        return [MultiPoint(tuple(extract_point_prompt(m, rng) for _ in range(n_points)))
                for m in sample.instances]
    raise ContractError(f"no per-instance prompts for mode {mode!r}")


def everything_mode(model: MiniSam, x: np.ndarray, grid: int = 8) -> np.ndarray:
    """Union of the masks from a grid x grid lattice of point prompts, small masks dropped."""
    if grid < 2:
        raise ContractError(f"everything-mode grid must be >= 2, got {grid}")
    size = model.size
    centres = ((np.arange(grid) + 0.5) * size / grid).astype(int)
    prompts = [Point(int(r), int(c)) for r in centres for c in centres]
    union = np.zeros((size, size), dtype=bool)
    min_area = MIN_EVERYTHING_AREA * size * size
    for logits in model.logits(x, prompts):
        m = binarize(logits)
        if m.sum() >= min_area:
            union |= m
    return union


def _prompt_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0xE7A1, index])


def _sample_predictions(model: MiniSam, sample: Sample, idx: int, delta: Optional[np.ndarray], mode: str,
                        seed: int, n_points: int, grid: int, transform):
    x = sample.image
    x_adv = x if delta is None else apply_uap(x, delta)
    if transform is not None:
        x, x_adv = transform(x), transform(x_adv)
    if mode == "everything":
        gt = np.zeros_like(sample.instances[0])
        for m in sample.instances:
            gt |= m
        clean = everything_mode(model, x, grid)
        adv = everything_mode(model, x_adv, grid) if delta is not None else clean
        return [clean], [adv], [gt]
    prompts = instance_prompts(sample, mode, _prompt_rng(seed, idx), n_points)
    clean = [binarize(z) for z in model.logits(x, prompts)]
    adv = clean if delta is None and transform is None else [binarize(z) for z in model.logits(x_adv, prompts)]
    return clean, adv, list(sample.instances)


def evaluate(model: MiniSam, samples: Sequence[Sample], delta: Optional[np.ndarray], mode: str,
             seed: int = 0, split: str = "test", n_points: int = 3, grid: int = 8,
             transform=None, workers: int = 1) -> EvalCell:
    """Clean vs adversarial mIoU with the same prompts; ``transform`` maps images (defences).

    Per-sample work may run on ``workers`` threads; results are merged in sample-index order.
    """
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}; expected one of {MODES}")
    if workers < 1:
        raise ContractError(f"workers must be >= 1, got {workers}")

    def one(idx):
        return _sample_predictions(model, samples[idx], idx, delta, mode, seed, n_points, grid, transform)

    if workers == 1:
        parts = [one(i) for i in range(len(samples))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, range(len(samples))))
    clean_pred, adv_pred, truths = [], [], []
    for c, a, t in parts:
        clean_pred.extend(c)
        adv_pred.extend(a)
        truths.extend(t)
    return EvalCell(split=split, mode=mode, clean_miou=miou(clean_pred, truths),
                    adv_miou=miou(adv_pred, truths), n_pairs=len(truths))


def cross_prompt_eval(model: MiniSam, samples: Sequence[Sample], delta: np.ndarray, craft_mode: str,
                      test_mode: str, seed: int = 0, **kwargs) -> EvalCell:
    """Evaluate a perturbation crafted with one prompt type under another."""
    cell = evaluate(model, samples, delta, test_mode, seed=seed, **kwargs)
    cell.split = f"{craft_mode}->{test_mode}"
    return cell


# ---------------------------------------------------------------------------
# corruptions


def corrupt(x: np.ndarray, kind: str, severity: int) -> np.ndarray:
    if kind == "contrast":
        table = CONTRAST_FACTORS
    elif kind == "brightness":
        table = BRIGHTNESS_SHIFTS
    else:
        raise ContractError(f"unknown corruption {kind!r}")
    if severity not in table:
        raise ContractError(f"severity must be in 1..5, got {severity!r}")
    if kind == "contrast":
        mean = x.mean()
        out = (x - mean) * table[severity] + mean
    else:
        out = x + table[severity]
    return np.clip(out, 0.0, 1.0).astype(x.dtype)


# ---------------------------------------------------------------------------
# report files


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=1, sort_keys=True)


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for c in report.cells:
        w.writerow([c.split, c.mode, repr(c.clean_miou), repr(c.adv_miou), repr(c.asr)])
    return buf.getvalue()


def report_svg(report: EvalReport, width: int = 640, height: int = 360) -> str:
    """Grouped bar chart of ASR per (split, mode) cell."""
    cells = report.cells
    pad_l, pad_b, pad_t = 48, 80, 24
    plot_w = width - pad_l - 16
    plot_h = height - pad_b - pad_t
    lo = min([0.0] + [c.asr for c in cells])
    hi = max([100.0] + [c.asr for c in cells])
    scale_y = plot_h / (hi - lo)
    zero_y = pad_t + hi * scale_y
    bar_w = plot_w / max(1, len(cells))
    colors = {"point": "#4c72b0", "box": "#dd8452", "multipoint": "#55a868", "everything": "#c44e52"}
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
           f'<line x1="{pad_l}" y1="{zero_y:.1f}" x2="{width - 16}" y2="{zero_y:.1f}" stroke="black"/>',
           f'<text x="4" y="{pad_t}" font-size="11">ASR</text>']
    for i, c in enumerate(cells):
        x = pad_l + i * bar_w + 0.1 * bar_w
        y = zero_y - max(c.asr, 0) * scale_y
        h = abs(c.asr) * scale_y
        label = escape(f"{c.split}/{c.mode}")
        out.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{0.8 * bar_w:.1f}" height="{h:.1f}" '
                   f'fill="{colors.get(c.mode, "#888888")}"><title>{label}: {c.asr:.2f}</title></rect>')
        out.append(f'<text x="{x:.1f}" y="{height - pad_b + 14}" font-size="9" '
                   f'transform="rotate(40 {x:.1f} {height - pad_b + 14})">{label}</text>')
        out.append(f'<text x="{x:.1f}" y="{y - 3:.1f}" font-size="9">{c.asr:.1f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(report: EvalReport, fmt: str, path: str) -> str:
    if fmt == "json":
        text = report_json(report)
    elif fmt == "csv":
        text = report_csv(report)
    elif fmt in ("svg", "svg-bars"):
        text = report_svg(report)
    else:
        raise ContractError(f"unknown report format {fmt!r}")
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)
    return path


def load_report(path: str) -> EvalReport:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not JSON: {exc}") from exc
    return EvalReport.from_dict(data)
