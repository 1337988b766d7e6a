"""Universal perturbation crafting: shadow targets, spatial and frequency losses.

The optimisation loop (:func:`run_uap_loop`) is shared with the baselines; a method
only supplies an :class:`Objective` that prepares per-image context once on the clean
image and returns a scalar loss to *minimise* for the current perturbation.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .datagen import Sample
from .errors import AttackDiverged, ContractError, FormatError
from .minisam import MiniSam, binarize
from .prompts import Box, Point, Prompt
from .tensor import Tensor
from .wavelets import high_pass, low_pass

log = logging.getLogger(__name__)

UAP_MAGIC = b"DUAP"
UAP_VERSION = 1
PROMPT_TYPES = ("point", "box", "mixed")


@dataclass
class AttackConfig:
    k: int = 10
    tau: float = 1.0
    lam: float = 0.1
    mu: float = 0.01
    eps: float = 10 / 255
    step: float = 1 / 255
    epochs: int = 20
    prompt_type: str = "point"
    seed: int = 0
    use_fe: bool = True
    use_bm: bool = True
    use_hfc: bool = True
    use_lfc: bool = True

    def __post_init__(self):
        if not self.eps > 0:
            raise ContractError(f"eps must be positive, got {self.eps}")
        if self.k < 1:
            raise ContractError(f"k must be >= 1, got {self.k}")
        if self.epochs < 0:
            raise ContractError(f"epochs must be >= 0, got {self.epochs}")
        if self.prompt_type not in PROMPT_TYPES:
            raise ContractError(f"prompt_type must be one of {PROMPT_TYPES}, got {self.prompt_type!r}")

    @property
    def eps32(self) -> np.float32:
        return np.float32(self.eps)

    def any_loss_enabled(self) -> bool:
        return self.use_fe or self.use_bm or self.use_hfc or self.use_lfc

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown attack config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SemanticBlueprint:
    m_fg: np.ndarray

    @property
    def m_bg(self) -> np.ndarray:
        return ~self.m_fg


@dataclass
class FakeMasks:
    xi_neg: np.ndarray
    xi_pos: np.ndarray

    @classmethod
    def from_blueprint(cls, bp: SemanticBlueprint, tau: float) -> "FakeMasks":
        fg = bp.m_fg.astype(np.float32)
        return cls(xi_neg=-np.float32(tau) * fg, xi_pos=np.float32(tau) * (1 - fg))


@dataclass
class Uap:
    delta: np.ndarray
    eps: float
    config: dict = field(default_factory=dict)
    history: List[float] = field(default_factory=list)
    method: str = "darksam"


# ---------------------------------------------------------------------------
# prompts and shadow targets


def random_prompts(rng: np.random.Generator, k: int, prompt_type: str, size: int) -> List[Prompt]:
    """k prompts: uniform pixels for points, random boxes with sides >= size/8."""
    out: List[Prompt] = []
    min_side = max(1, size // 8)
    for _ in range(k):
        kind = prompt_type
        if kind == "mixed":
            kind = "point" if rng.random() < 0.5 else "box"
        if kind == "point":
            out.append(Point(int(rng.integers(size)), int(rng.integers(size))))
        elif kind == "box":
            h = int(rng.integers(min_side, size + 1))
            w = int(rng.integers(min_side, size + 1))
            r0 = int(rng.integers(0, size - h + 1))
            c0 = int(rng.integers(0, size - w + 1))
            out.append(Box(r0, c0, r0 + h - 1, c0 + w - 1))
        else:
            raise ContractError(f"unknown prompt type {prompt_type!r}")
    return out


def blueprint_from_prompts(model: MiniSam, image: np.ndarray, prompts: Sequence[Prompt]) -> SemanticBlueprint:
    m_fg = np.zeros((model.size, model.size), dtype=bool)
    for logits in model.logits(image, prompts):
        m_fg |= binarize(logits)
    return SemanticBlueprint(m_fg)


def build_shadow_target(model: MiniSam, x: np.ndarray, k: int, prompt_type: str,
                        rng: np.random.Generator) -> Tuple[SemanticBlueprint, List[Prompt]]:
    """Union of the clean binarized masks of k random prompts, plus those prompts."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    prompts = random_prompts(rng, k, prompt_type, model.size)
    return blueprint_from_prompts(model, x, prompts), prompts


# ---------------------------------------------------------------------------
# losses


def apply_uap(x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    if x.shape != delta.shape:
        raise ContractError(f"apply_uap: image {x.shape} vs perturbation {delta.shape}")
    return np.clip(x + delta, 0.0, 1.0).astype(x.dtype)


def adversarial_input(x: np.ndarray, delta: Tensor) -> Tensor:
    """clamp(x + delta, 0, 1) as a graph node so gradients reach ``delta``."""
    if x.shape != delta.shape:
        raise ContractError(f"image {x.shape} vs perturbation {delta.shape}")
    return T.clamp(T.add(Tensor(x, dtype=delta.dtype), delta), 0.0, 1.0)


def spatial_loss_from_logits(logits: Sequence[Tensor], fakes: FakeMasks, use_fe: bool = True,
                             use_bm: bool = True) -> Tensor:
    """Mean over prompts of mse(z * m_fg, xi_neg) + mse(z * ~m_fg, xi_pos)."""
    fg = Tensor((fakes.xi_neg < 0).astype(np.float32))
    bg = Tensor((fakes.xi_neg >= 0).astype(np.float32))
    xi_neg, xi_pos = Tensor(fakes.xi_neg), Tensor(fakes.xi_pos)
    total = None
    for z in logits:
        if z.shape != fakes.xi_neg.shape:
            raise ContractError(f"logits {z.shape} vs fake mask {fakes.xi_neg.shape}")
        terms = []
        if use_fe:
            terms.append(T.mse(T.mul(z, fg), xi_neg))
        if use_bm:
            terms.append(T.mse(T.mul(z, bg), xi_pos))
        for t in terms:
            total = t if total is None else T.add(total, t)
    if total is None:
        return Tensor(np.float32(0.0))
    return T.scale(total, 1.0 / len(logits))


def spatial_loss(model: MiniSam, x: np.ndarray, delta: Tensor, blueprint: SemanticBlueprint,
                 fakes: FakeMasks, prompts: Sequence[Prompt], use_fe: bool = True,
                 use_bm: bool = True) -> Tensor:
    if not (use_fe or use_bm):
        return Tensor(np.float32(0.0))
    feats = model.encode_image(adversarial_input(x, delta))
    return spatial_loss_from_logits([model.decode(feats, p) for p in prompts], fakes, use_fe, use_bm)


def frequency_loss(x: np.ndarray, delta: Tensor, mu: float, use_lfc: bool = True,
                   use_hfc: bool = True) -> Tensor:
    """mse(phi(x), phi(x_adv)) - mu * mse(psi(x), psi(x_adv))."""
    if not (use_lfc or use_hfc):
        return Tensor(np.float32(0.0))
    x_adv = adversarial_input(x, delta)
    clean = Tensor(x, dtype=delta.dtype)
    out = None
    if use_lfc:
        out = T.mse(low_pass(x_adv), low_pass(clean).detach())
    if use_hfc:
        hfc = T.scale(T.mse(high_pass(x_adv), high_pass(clean).detach()), -mu)
        out = hfc if out is None else T.add(out, hfc)
    return out


def total_loss(j_sa: Tensor, j_fa: Tensor, lam: float) -> Tensor:
    return T.add(j_sa, T.scale(j_fa, lam))


# ---------------------------------------------------------------------------
# the optimisation loop


class Objective:
    """Per-method loss; ``prepare`` runs once per image on clean inputs."""

    name = "objective"

    def prepare(self, model: MiniSam, sample: Sample, rng: np.random.Generator, config: AttackConfig):
        return None

    def initial_delta(self, shape, config: AttackConfig) -> np.ndarray:
        return np.zeros(shape, dtype=np.float32)

    def loss(self, model: MiniSam, x: np.ndarray, delta: Tensor, ctx, config: AttackConfig,
             epoch: int) -> Optional[Tensor]:
        raise NotImplementedError


@dataclass
class ShadowContext:
    prompts: List[Prompt]
    blueprint: SemanticBlueprint
    fakes: FakeMasks


class DarkSamObjective(Objective):
    name = "darksam"

    def prepare(self, model, sample, rng, config):
        bp, prompts = build_shadow_target(model, sample.image, config.k, config.prompt_type, rng)
        return ShadowContext(prompts, bp, FakeMasks.from_blueprint(bp, config.tau))

    def loss(self, model, x, delta, ctx, config, epoch):
        j_sa = spatial_loss(model, x, delta, ctx.blueprint, ctx.fakes, ctx.prompts, config.use_fe, config.use_bm)
        j_fa = frequency_loss(x, delta, config.mu, config.use_lfc, config.use_hfc)
        return total_loss(j_sa, j_fa, config.lam)


def run_uap_loop(model: MiniSam, samples: Sequence[Sample], config: AttackConfig, objective: Objective,
                 progress: Optional[Callable[[int, float], None]] = None) -> Uap:
    """Signed-gradient descent on one shared perturbation, one image per step."""
    if not samples:
        raise ContractError("need at least one training image")
    shape = samples[0].image.shape
    eps = config.eps32
    step = np.float32(config.step)
    rng = np.random.default_rng([config.seed, 0xDA5])
    contexts = [objective.prepare(model, s, rng, config) for s in samples]
    delta = np.clip(objective.initial_delta(shape, config).astype(np.float32), -eps, eps)
    history: List[float] = []
    for epoch in range(config.epochs):
        total = 0.0
        for i, (sample, ctx) in enumerate(zip(samples, contexts)):
            d = Tensor(delta, requires_grad=True)
            loss = objective.loss(model, sample.image, d, ctx, config, epoch)
            if loss is None:
                continue
            value = loss.item()
            if not np.isfinite(value):
                raise AttackDiverged(f"{objective.name}: loss is {value} at epoch {epoch}, image index {i}")
            T.backward(loss)
            if d.grad is not None:
                delta = delta - step * np.sign(d.grad).astype(np.float32)
                delta = np.clip(delta, -eps, eps)
            total += value
        history.append(total / len(samples))
        log.info("%s epoch %d/%d loss %.5f", objective.name, epoch + 1, config.epochs, history[-1])
        if progress is not None:
            progress(epoch, history[-1])
    return Uap(delta=delta, eps=float(eps), config=config.to_dict(), history=history, method=objective.name)


def craft_uap(model: MiniSam, train_samples: Sequence[Sample], config: AttackConfig,
              progress: Optional[Callable[[int, float], None]] = None) -> Uap:
    if not config.any_loss_enabled():
        raise ContractError("at least one of fe, bm, hfc, lfc must be enabled")
    return run_uap_loop(model, train_samples, config, DarkSamObjective(), progress)


# ---------------------------------------------------------------------------
# UAP file


def save_uap(uap: Uap, path: str) -> None:
    delta = np.ascontiguousarray(uap.delta, dtype="<f4")
    trailer = json.dumps({"method": uap.method, "config": uap.config, "history": uap.history},
                         sort_keys=True).encode("utf-8")
    parts = [UAP_MAGIC, struct.pack("<B", UAP_VERSION), struct.pack("<f", uap.eps),
             struct.pack("<B", delta.ndim), struct.pack(f"<{delta.ndim}I", *delta.shape),
             delta.tobytes(), struct.pack("<I", len(trailer)), trailer]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_uap(path: str) -> Uap:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated UAP file", offset=pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != UAP_MAGIC:
        raise FormatError(f"{path}: bad magic", offset=0)
    (version,) = struct.unpack("<B", take(1))
    if version != UAP_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    (eps,) = struct.unpack("<f", take(4))
    (rank,) = struct.unpack("<B", take(1))
    dims = struct.unpack(f"<{rank}I", take(4 * rank))
    delta = np.frombuffer(take(4 * int(np.prod(dims))), dtype="<f4").reshape(dims).astype(np.float32)
    (n,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad JSON trailer", offset=pos) from exc
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes", offset=pos)
    return Uap(delta=delta, eps=float(eps), config=meta.get("config", {}),
               history=meta.get("history", []), method=meta.get("method", "darksam"))
