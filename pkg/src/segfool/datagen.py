"""Synthetic textured scenes with per-instance ground truth and prompt extraction."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ContractError, FormatError
from .prompts import Box, Point

SHAPES = ("rectangle", "ellipse", "triangle")
TEXTURES = ("checker", "stripes-horizontal", "stripes-vertical", "noise", "solid")

MIN_AREA_FRAC = 0.02
MAX_AREA_FRAC = 0.30
MAX_REJECTIONS = 1000
CORE_FRACTION = 0.5  # point prompts come from the inner half (by distance) of an instance


@dataclass
class SceneSpec:
    size: int = 64
    instances_per_image: Tuple[int, int] = (2, 4)
    shapes: Tuple[str, ...] = SHAPES
    textures: Tuple[str, ...] = ("checker", "stripes-horizontal", "stripes-vertical")
    background: str = "noise"
    seed: int = 0
    # faint, fine textures on a near-flat background: texture is the main object cue
    texture_amplitude: float = 0.045
    background_amplitude: float = 0.01
    colour_gap: Tuple[float, float] = (0.0, 0.01)
    area_range: Tuple[float, float] = (0.05, 0.25)  # target area before rasterization
    texture_periods: Tuple[int, ...] = (2,)  # pixels per checker/stripe band

    def __post_init__(self):
        self.instances_per_image = tuple(self.instances_per_image)
        self.colour_gap = tuple(self.colour_gap)
        self.area_range = tuple(self.area_range)
        self.texture_periods = tuple(int(p) for p in self.texture_periods)
        if not self.texture_periods or min(self.texture_periods) < 1:
            raise ContractError(f"texture periods must be positive, got {self.texture_periods}")
        self.shapes = tuple(self.shapes)
        self.textures = tuple(self.textures)
        if self.size % 2 or self.size < 8:
            raise ContractError(f"scene size must be even and >= 8, got {self.size}")
        lo, hi = self.instances_per_image
        if lo < 1 or hi < lo:
            raise ContractError(f"bad instance range {self.instances_per_image}")
        a_lo, a_hi = self.area_range
        if not MIN_AREA_FRAC <= a_lo <= a_hi <= MAX_AREA_FRAC:
            raise ContractError(f"area range {self.area_range} outside [{MIN_AREA_FRAC}, {MAX_AREA_FRAC}]")
        for s in self.shapes:
            if s not in SHAPES:
                raise ContractError(f"unknown shape {s!r}")
        for t in (*self.textures, self.background):
            if t not in TEXTURES:
                raise ContractError(f"unknown texture {t!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["instances_per_image"] = list(self.instances_per_image)
        d["colour_gap"] = list(self.colour_gap)
        d["area_range"] = list(self.area_range)
        d["texture_periods"] = list(self.texture_periods)
        d["shapes"] = list(self.shapes)
        d["textures"] = list(self.textures)
        return d


@dataclass
class Sample:
    image: np.ndarray  # float32, 3 x S x S, values in [0, 1]
    instances: List[np.ndarray]  # bool S x S, disjoint, non-empty, connected
    texture_tags: List[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.image.shape[-1]


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(rng: np.random.Generator, kind: str, size: int,
                area_range: Tuple[float, float] = (0.026, 0.225)) -> np.ndarray:
    """Rasterize one shape at a random position with a target area fraction drawn from ``area_range``."""
    total = size * size
    area = rng.uniform(*area_range) * total
    aspect = rng.uniform(0.6, 1.6)
    rr, cc = np.mgrid[0:size, 0:size]
    if kind == "rectangle":
        h = max(2, int(round(np.sqrt(area / aspect))))
        w = max(2, int(round(area / h)))
        h, w = min(h, size - 2), min(w, size - 2)
        r0 = rng.integers(1, size - h)
        c0 = rng.integers(1, size - w)
        return (rr >= r0) & (rr < r0 + h) & (cc >= c0) & (cc < c0 + w)
    if kind == "ellipse":
        a = np.sqrt(area / (np.pi * aspect))  # row semi-axis
        b = a * aspect
        a, b = min(a, size / 2 - 2), min(b, size / 2 - 2)
        cr = rng.uniform(a + 1, size - a - 1)
        cc0 = rng.uniform(b + 1, size - b - 1)
        return ((rr + 0.5 - cr) / a) ** 2 + ((cc + 0.5 - cc0) / b) ** 2 <= 1.0
    if kind == "triangle":
        # area = base * height / 2
        h = min(np.sqrt(2 * area / aspect), size - 3)
        w = min(2 * area / h, size - 3)
        r0 = rng.uniform(1, size - h - 1)
        c0 = rng.uniform(1, size - w - 1)
        apex = c0 + rng.uniform(0.2, 0.8) * w
        y = rr + 0.5 - r0
        x = cc + 0.5
        t = y / h
        left = apex + (c0 - apex) * t
        right = apex + (c0 + w - apex) * t
        return (y >= 0) & (y <= h) & (x >= left) & (x <= right)
    raise ContractError(f"unknown shape {kind!r}")


def _texture(rng: np.random.Generator, kind: str, size: int, amplitude: float,
             base: Optional[np.ndarray] = None, periods: Sequence[int] = (2, 3, 4)) -> np.ndarray:
    """Return a 3 x S x S texture field around a base colour (random if not given)."""
    if base is None:
        base = rng.uniform(0.25, 0.75, size=3)
    rr, cc = np.mgrid[0:size, 0:size]
    if kind == "solid":
        pattern = np.zeros((size, size))
    elif kind == "noise":
        pattern = rng.uniform(-1.0, 1.0, size=(size, size))
    else:
        period = int(periods[int(rng.integers(len(periods)))])
        if kind == "checker":
            pattern = ((rr // period + cc // period) % 2) * 2.0 - 1.0
        elif kind == "stripes-horizontal":
            pattern = ((rr // period) % 2) * 2.0 - 1.0
        elif kind == "stripes-vertical":
            pattern = ((cc // period) % 2) * 2.0 - 1.0
        else:
            raise ContractError(f"unknown texture {kind!r}")
    tint = rng.uniform(0.5, 1.0, size=3)
    field_ = base[:, None, None] + amplitude * tint[:, None, None] * pattern[None]
    return np.clip(field_, 0.0, 1.0)


def _instance_colour(rng: np.random.Generator, bg: np.ndarray, gap: Tuple[float, float]) -> np.ndarray:
    """Base colour whose largest per-channel distance to ``bg`` lies in ``gap``."""
    lo, hi = gap
    offset = rng.uniform(-hi, hi, size=3)
    k = int(np.argmax(np.abs(offset)))
    offset[k] = np.sign(offset[k] or 1.0) * rng.uniform(lo, hi)
    # flip channels that would leave [0, 1]
    colour = np.where((bg + offset < 0) | (bg + offset > 1), bg - offset, bg + offset)
    return np.clip(colour, 0.0, 1.0)


def _render_scene(rng: np.random.Generator, spec: SceneSpec, n_inst: int) -> Optional[Sample]:
    size = spec.size
    total = size * size
    bg_colour = rng.uniform(0.25, 0.75, size=3)
    image = _texture(rng, spec.background, size, amplitude=spec.background_amplitude, base=bg_colour,
                     periods=spec.texture_periods)
    occupied = np.zeros((size, size), dtype=bool)
    instances: List[np.ndarray] = []
    tags: List[str] = []
    rejections = 0
    while len(instances) < n_inst:
        if rejections >= MAX_REJECTIONS:
            return None
        kind = spec.shapes[rng.integers(len(spec.shapes))]
        mask = _shape_mask(rng, kind, size, spec.area_range)
        area = int(mask.sum())
        if not (MIN_AREA_FRAC * total <= area <= MAX_AREA_FRAC * total):
            rejections += 1
            continue
        # one-pixel moat keeps instances from touching
        if (ndimage.binary_dilation(mask, iterations=2) & occupied).any():
            rejections += 1
            continue
        _, n_comp = ndimage.label(mask)
        if n_comp != 1:
            rejections += 1
            continue
        tex = spec.textures[rng.integers(len(spec.textures))]
        fill = _texture(rng, tex, size, amplitude=spec.texture_amplitude,
                        base=_instance_colour(rng, bg_colour, spec.colour_gap),
                        periods=spec.texture_periods)
        image = np.where(mask[None], fill, image)
        occupied |= mask
        instances.append(mask)
        tags.append(tex)
    return Sample(image=quantize(image), instances=instances, texture_tags=tags)


def generate_sample(spec: SceneSpec, index: int) -> Sample:
    """Render sample ``index``; depends only on (spec.seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    lo, hi = spec.instances_per_image
    n_inst = int(rng.integers(lo, hi + 1))
    while True:
        sample = _render_scene(rng, spec, n_inst)
        if sample is not None:
            return sample
        # too crowded: retry with fewer instances
        n_inst = max(1, n_inst - 1)


def generate_dataset(spec: SceneSpec, n: int, start: int = 0) -> List[Sample]:
    if n < 1:
        raise ContractError(f"dataset size must be >= 1, got {n}")
    return [generate_sample(spec, start + i) for i in range(n)]


# ---------------------------------------------------------------------------
# prompts


def interior(mask: np.ndarray, core: float = CORE_FRACTION) -> np.ndarray:
    """Pixels at least ``core`` x (max inscribed distance) away from the mask boundary.

    Falls back to the mask itself when nothing qualifies (e.g. one-pixel masks).
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.all() or not mask.any():
        return mask.copy()
    dist = ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
    inner = dist >= max(1.0, np.ceil(core * dist.max()))
    return inner if inner.any() else mask.copy()


def extract_point_prompt(mask: np.ndarray, rng: np.random.Generator, core: float = CORE_FRACTION) -> Point:
    """Uniformly random pixel from the interior of ``mask``."""
    if not np.any(mask):
        raise ContractError("cannot extract a point from an empty mask")
    rows, cols = np.nonzero(interior(mask, core))
    i = int(rng.integers(rows.size))
    return Point(int(rows[i]), int(cols[i]))


def extract_box_prompt(mask: np.ndarray) -> Box:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ContractError("cannot extract a box from an empty mask")
    return Box(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))


# ---------------------------------------------------------------------------
# on-disk format: P6 images, P5 masks, JSON manifest


def write_ppm(path: str, image: np.ndarray) -> None:
    """Write a 3 x H x W float image in [0,1] as binary PPM."""
    c, h, w = image.shape
    if c != 3:
        raise ContractError(f"PPM needs 3 channels, got {c}")
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data.transpose(1, 2, 0)).tobytes())


def write_pgm(path: str, mask: np.ndarray) -> None:
    h, w = mask.shape
    data = np.where(mask, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_netpbm(path: str, magic: bytes) -> Tuple[int, int, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header", offset=pos)
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic!r}, got {tokens[0]!r}", offset=0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad header field", offset=pos) from exc
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit maxval supported", offset=pos)
    return w, h, np.frombuffer(raw, dtype=np.uint8, offset=pos)


def read_ppm(path: str) -> np.ndarray:
    w, h, data = _read_netpbm(path, b"P6")
    if data.size != w * h * 3:
        raise FormatError(f"{path}: payload has {data.size} bytes, expected {w * h * 3}")
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)


def read_pgm(path: str) -> np.ndarray:
    w, h, data = _read_netpbm(path, b"P5")
    if data.size != w * h:
        raise FormatError(f"{path}: payload has {data.size} bytes, expected {w * h}")
    return data.reshape(h, w) > 127


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap an image to the 8-bit grid used on disk."""
    levels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return levels.astype(np.float32) / np.float32(255.0)


def save_dataset(samples: Sequence[Sample], out_dir: str, spec: SceneSpec, split: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        img_name = f"{split}_{i:04d}.ppm"
        write_ppm(os.path.join(out_dir, img_name), s.image)
        mask_names = []
        for j, m in enumerate(s.instances):
            name = f"{split}_{i:04d}_m{j}.pgm"
            write_pgm(os.path.join(out_dir, name), m)
            mask_names.append(name)
        entries.append({"image": img_name, "masks": mask_names, "textures": list(s.texture_tags)})
    manifest = {"version": 1, "split": split, "spec": spec.to_dict(), "samples": entries}
    path = os.path.join(out_dir, f"{split}_manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def load_dataset(manifest_path: str) -> Tuple[List[Sample], SceneSpec]:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    root = os.path.dirname(manifest_path)
    samples = []
    for e in manifest["samples"]:
        image = read_ppm(os.path.join(root, e["image"]))
        masks = [read_pgm(os.path.join(root, m)) for m in e["masks"]]
        samples.append(Sample(image=image, instances=masks, texture_tags=list(e.get("textures", []))))
    return samples, SceneSpec(**manifest["spec"])
