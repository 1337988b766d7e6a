"""A miniature prompt-guided segmenter: image encoder, prompt encoder, mask decoder.

The image encoder is three 3x3 conv blocks (3->16->32->32, strides 2, 2, 1) giving a
32 x S/4 x S/4 feature grid. Prompts are encoded with a sinusoidal code of normalized
coordinates (16 frequencies per axis). Each feature cell receives the code of its
offset to the prompt (to both corners for a box), linearly projected to 32 channels
and added to the image features. Two convs (32->16->1) and a x4 bilinear upsample
give S x S mask logits; a pixel is segmented where its logit is > 0.
"""
from __future__ import annotations

import logging
import math
import struct
from collections import OrderedDict
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .datagen import Sample, extract_box_prompt, extract_point_prompt
from .errors import ContractError, FormatError
from .prompts import Box, Everything, MultiPoint, Point, Prompt
from .tensor import Tensor

log = logging.getLogger(__name__)

N_FREQ = 16
FREQS = np.geomspace(0.25, 4.0, N_FREQ)  # cycles per image side
CODE_DIM = 4 * N_FREQ
EMBED_DIM = 32
DOWNSAMPLE = 4

WEIGHTS_MAGIC = b"MSAM"
WEIGHTS_VERSION = 1


def sincos_code(coords: np.ndarray) -> np.ndarray:
    """(..., 2) normalized (row, col) -> (..., 4*N_FREQ) sin/cos features."""
    ang = 2.0 * math.pi * coords[..., None] * FREQS
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).reshape(coords.shape[:-1] + (CODE_DIM,))


def _pixel_centre(row: float, col: float, size: int) -> np.ndarray:
    return np.array([(row + 0.5) / size, (col + 0.5) / size])


def _cell_centres(grid: int) -> np.ndarray:
    c = (np.arange(grid) + 0.5) / grid
    rr, cc = np.meshgrid(c, c, indexing="ij")
    return np.stack([rr, cc], axis=-1).reshape(-1, 2)


class MiniSam:
    def __init__(self, size: int = 64, seed: int = 0):
        if size % (2 * DOWNSAMPLE):
            raise ContractError(f"image size must be a multiple of {2 * DOWNSAMPLE}, got {size}")
        self.size = size
        self.grid = size // DOWNSAMPLE
        rng = np.random.default_rng([seed, 0x5A3])
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

        def conv(name, c_out, c_in, k=3):
            std = math.sqrt(2.0 / (c_in * k * k))
            self.params[name + ".w"] = Tensor(rng.normal(0, std, (c_out, c_in, k, k)), requires_grad=True,
                                              dtype=np.float32)
            self.params[name + ".b"] = Tensor(np.zeros(c_out), requires_grad=True, dtype=np.float32)

        def linear(name, d_out, d_in):
            # last column is the bias
            w = np.concatenate([rng.normal(0, 1 / math.sqrt(d_in), (d_out, d_in)), np.zeros((d_out, 1))], axis=1)
            self.params[name] = Tensor(w, requires_grad=True, dtype=np.float32)

        conv("enc1", 16, 3)
        conv("enc2", 32, 16)
        conv("enc3", EMBED_DIM, 32)
        linear("prompt.point", EMBED_DIM, CODE_DIM)
        linear("prompt.box", EMBED_DIM, 2 * CODE_DIM)
        conv("dec1", 16, EMBED_DIM)
        conv("dec2", 1, 16)
        self._cells = _cell_centres(self.grid)
        self._code_cache: Dict[Tuple[int, int], np.ndarray] = {}

    # -- components ----------------------------------------------------------

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def encode_image(self, x: Tensor) -> Tensor:
        """3 x S x S image in [0, 1] -> 32 x S/4 x S/4 features."""
        if x.shape != (3, self.size, self.size):
            raise ContractError(f"expected image of shape (3, {self.size}, {self.size}), got {x.shape}")
        p = self.params
        h = T.scale(T.add(x, -0.5), 2.0)
        h = T.relu(T.conv2d(h, p["enc1.w"], p["enc1.b"], stride=2))
        h = T.relu(T.conv2d(h, p["enc2.w"], p["enc2.b"], stride=2))
        return T.relu(T.conv2d(h, p["enc3.w"], p["enc3.b"], stride=1))

    def _offset_code(self, row: int, col: int) -> np.ndarray:
        key = (row, col)
        code = self._code_cache.get(key)
        if code is None:
            code = sincos_code(self._cells - _pixel_centre(row, col, self.size)).T
            self._code_cache[key] = code
        return code

    def prompt_code(self, prompt: Prompt) -> Tuple[str, np.ndarray]:
        """Constant per-cell offset code for ``prompt``: (projection name, D+1 x cells)."""
        if isinstance(prompt, Everything):
            raise ContractError("Everything prompts must be expanded into points before predict")
        prompt.check(self.size)
        ones = np.ones((1, self._cells.shape[0]))
        if isinstance(prompt, Point):
            return "prompt.point", np.concatenate([self._offset_code(prompt.row, prompt.col), ones])
        if isinstance(prompt, MultiPoint):
            codes = [self._offset_code(q.row, q.col) for q in prompt.points]
            return "prompt.point", np.concatenate([np.mean(codes, axis=0), ones])
        if isinstance(prompt, Box):
            a = self._offset_code(prompt.r0, prompt.c0)
            b = self._offset_code(prompt.r1, prompt.c1)
            return "prompt.box", np.concatenate([a, b, ones])
        raise ContractError(f"unsupported prompt {prompt!r}")

    def decode(self, features: Tensor, prompt: Prompt) -> Tensor:
        """Image features + prompt -> S x S mask logits."""
        p = self.params
        name, code = self.prompt_code(prompt)
        emb = T.matmul(p[name], Tensor(code, dtype=features.dtype))
        h = T.add(features, T.reshape(emb, features.shape))
        h = T.relu(T.conv2d(h, p["dec1.w"], p["dec1.b"]))
        h = T.conv2d(h, p["dec2.w"], p["dec2.b"])
        up = T.upsample_bilinear(h, DOWNSAMPLE)
        return T.reshape(up, (self.size, self.size))

    def predict(self, x: Tensor, prompt: Prompt) -> Tensor:
        return self.decode(self.encode_image(x), prompt)

    # -- inference helpers ---------------------------------------------------

    def logits(self, image: np.ndarray, prompts: Sequence[Prompt]) -> List[np.ndarray]:
        """Gradient-free logits for several prompts on one image (encoder run once)."""
        feats = self.encode_image(Tensor(image)).detach()
        return [self.decode(feats, p).data for p in prompts]

    def cast(self, dtype) -> "MiniSam":
        """Copy with parameters in ``dtype`` (float64 copies serve finite-difference checks)."""
        other = MiniSam(size=self.size)
        for k, v in self.params.items():
            other.params[k] = Tensor(v.data.astype(dtype), requires_grad=True, dtype=dtype)
        return other

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ContractError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ContractError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float32)


def predict(model: MiniSam, x: Tensor, prompt: Prompt) -> Tensor:
    return model.predict(x, prompt)


def binarize(logits) -> np.ndarray:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data > 0


# ---------------------------------------------------------------------------
# weights file


def save_weights(model: MiniSam, path: str) -> None:
    chunks = [WEIGHTS_MAGIC, struct.pack("<BI", WEIGHTS_VERSION, model.size), struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_weights(path: str) -> MiniSam:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated file, wanted {n} bytes", offset=pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic", offset=0)
    version, size = struct.unpack("<BI", take(5))
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    (count,) = struct.unpack("<I", take(4))
    state = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        try:
            name = take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: parameter name is not UTF-8", offset=pos) from exc
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        nbytes = 4 * int(np.prod(dims))
        state[name] = np.frombuffer(take(nbytes), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes", offset=pos)
    model = MiniSam(size=size)
    try:
        model.load_state_dict(state)
    except ContractError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return model


# ---------------------------------------------------------------------------
# training


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad * p.grad
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= np.float32(self.lr) * p.grad


def training_prompt(sample: Sample, rng: np.random.Generator) -> Tuple[Prompt, np.ndarray]:
    """Draw one prompt and its target mask for ``sample``."""
    size = sample.size
    u = rng.random()
    if u < 0.1:
        occupied = np.zeros((size, size), dtype=bool)
        for m in sample.instances:
            occupied |= m
        if not occupied.all():
            # background points train toward the empty mask
            return extract_point_prompt(~occupied, rng, core=0.0), np.zeros((size, size), dtype=bool)
    mask = sample.instances[int(rng.integers(len(sample.instances)))]
    if u < 0.55:
        core = 0.5 if rng.random() < 0.7 else 0.0
        return extract_point_prompt(mask, rng, core=core), mask
    if u < 0.9:
        return extract_box_prompt(mask), mask
    n = int(rng.integers(2, 4))
    return MultiPoint(tuple(extract_point_prompt(mask, rng) for _ in range(n))), mask


def photometric_jitter(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random contrast scale about the mean in [0.3, 1] plus a brightness shift in [-0.2, 0.4]."""
    c = rng.uniform(0.3, 1.0)
    b = rng.uniform(-0.2, 0.4)
    mean = x.mean()
    return np.clip((x - mean) * c + mean + b, 0.0, 1.0).astype(x.dtype)


def train_victim(dataset: Sequence[Sample], epochs: int = 30, lr: float = 5e-3, seed: int = 0,
                 prompts_per_step: int = 16, optimizer: str = "adam", jitter: float = 0.0,
                 progress: Optional[callable] = None) -> MiniSam:
    """Fit a MiniSam with per-pixel BCE, one image per step, several prompts per image.

    ``jitter`` is the probability of a random contrast/brightness change per step.
    """
    if not dataset:
        raise ContractError("training set is empty")
    size = dataset[0].size
    model = MiniSam(size=size, seed=seed)
    params = model.parameters()
    opt = Adam(params, lr) if optimizer == "adam" else SGD(params, lr)
    rng = np.random.default_rng([seed, 0x7A1])
    for epoch in range(epochs):
        # cosine decay to a tenth of the base rate
        opt.lr = lr * (0.1 + 0.45 * (1 + math.cos(math.pi * epoch / max(1, epochs))))
        total = 0.0
        for idx in rng.permutation(len(dataset)):
            sample = dataset[int(idx)]
            T.zero_grads(params)
            image = sample.image
            if jitter > 0 and rng.random() < jitter:
                image = photometric_jitter(image, rng)
            feats = model.encode_image(Tensor(image))
            loss = None
            for _ in range(prompts_per_step):
                prompt, target = training_prompt(sample, rng)
                term = T.bce_with_logits(model.decode(feats, prompt), target.astype(np.float32))
                loss = term if loss is None else T.add(loss, term)
            loss = T.scale(loss, 1.0 / prompts_per_step)
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"victim training diverged at epoch {epoch}, image {int(idx)}")
            T.backward(loss)
            opt.step()
            total += value
        mean_loss = total / len(dataset)
        log.info("victim epoch %d/%d loss %.4f", epoch + 1, epochs, mean_loss)
        if progress is not None:
            progress(epoch, mean_loss)
    return model
