"""Self-supervised pretraining: multi-view augmentation, NT-Xent, VICReg, LARS."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DatasetBundle
from .errors import ConfigurationError, DimensionError, NumericalError
from .model import Model, forward_features, forward_head

logger = logging.getLogger(__name__)

STRENGTH_FACTORS = {"weak": 0.5, "default": 1.0, "strong": 2.0}
# VICReg's 25x-weighted terms give LARS-exempt tensors (biases, BN) steps ten times
# larger than NT-Xent does, so its base rate is lower.
DEFAULT_LR = {"simclr": 0.3, "vicreg": 0.03}


# ------------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class AugmentConfig:
    p_flip: float = 0.5
    rotation: float = 15.0  # degrees, drawn from U[-rotation, rotation]
    translation: float = 0.1  # fraction of patch size
    scale: tuple[float, float] = (0.9, 1.1)
    intensity: float = 0.2  # per-channel gain drawn from U[1-a, 1+a]
    noise: float = 0.05
    strength: str = "default"

    def __post_init__(self):
        lo, hi = self.scale
        if not 0 <= self.p_flip <= 1 or not lo <= 1 <= hi or lo <= 0:
            raise ConfigurationError(f"invalid flip probability or scale range in {self}")
        if not 0 <= self.intensity < 1 or self.noise < 0 or self.rotation < 0 or self.translation < 0:
            raise ConfigurationError(f"invalid intensity/noise/rotation/translation in {self}")

    @classmethod
    def preset(cls, strength: str = "default") -> "AugmentConfig":
        """``weak`` / ``strong`` scale intensity gain, noise and rotation by 0.5x / 2x."""
        if strength not in STRENGTH_FACTORS:
            raise ConfigurationError(f"strength must be one of {sorted(STRENGTH_FACTORS)}, got {strength!r}")
        f = STRENGTH_FACTORS[strength]
        base = cls()
        return replace(base, rotation=base.rotation * f, intensity=min(base.intensity * f, 0.95), noise=base.noise * f, strength=strength)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(p_flip=0.0, rotation=0.0, translation=0.0, scale=(1.0, 1.0), intensity=0.0, noise=0.0, strength="none")


@dataclass
class AugmentDraw:
    """The random choices behind one augmented view (kept for replay and tests)."""

    flip_h: bool
    flip_v: bool
    angle: float
    shift: tuple[float, float]
    scale: float
    gains: np.ndarray
    noise: np.ndarray | None


def _draw(cfg: AugmentConfig, c: int, h: int, w: int, rng: np.random.Generator) -> AugmentDraw:
    flip_h = bool(rng.random() < cfg.p_flip)
    flip_v = bool(rng.random() < cfg.p_flip)
    angle = float(rng.uniform(-cfg.rotation, cfg.rotation)) if cfg.rotation else 0.0
    t = cfg.translation
    shift = (float(rng.uniform(-t, t) * h), float(rng.uniform(-t, t) * w)) if t else (0.0, 0.0)
    lo, hi = cfg.scale
    scale = float(rng.uniform(lo, hi)) if hi > lo else 1.0
    gains = rng.uniform(1 - cfg.intensity, 1 + cfg.intensity, size=c) if cfg.intensity else np.ones(c)
    noise = rng.normal(0.0, cfg.noise, size=(c, h, w)) if cfg.noise else None
    return AugmentDraw(flip_h, flip_v, angle, shift, scale, gains, noise)


def _bilinear(patches: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    """Sample (B, C, H, W) patches at per-patch source coords (B, H, W), zero outside."""
    b, c, h, w = patches.shape
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    wy = sy - y0
    wx = sx - x0
    bi = np.arange(b)[:, None, None]
    out = np.zeros((b, h, w, c), dtype=patches.dtype)
    src = patches.transpose(0, 2, 3, 1)
    for dy, fy in ((0, 1 - wy), (1, wy)):
        for dx, fx in ((0, 1 - wx), (1, wx)):
            yy = y0 + dy
            xx = x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = src[bi, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += vals * (fy * fx * ok)[..., None]
    return out.transpose(0, 3, 1, 2)


def _apply(patches: np.ndarray, draws: list[AugmentDraw]) -> np.ndarray:
    b, c, h, w = patches.shape
    out = patches.copy()
    for i, d in enumerate(draws):
        if d.flip_h:
            out[i] = out[i, :, :, ::-1]
        if d.flip_v:
            out[i] = out[i, :, ::-1, :]
    if any(d.angle or d.shift != (0.0, 0.0) or d.scale != 1.0 for d in draws):
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        sy = np.empty((b, h, w))
        sx = np.empty((b, h, w))
        for i, d in enumerate(draws):
            th = math.radians(d.angle)
            cos, sin = math.cos(th), math.sin(th)
            # inverse map: source = R(-theta) (dst - center - shift) / scale + center
            v = yy - cy - d.shift[0]
            u = xx - cx - d.shift[1]
            sy[i] = (cos * v - sin * u) / d.scale + cy
            sx[i] = (sin * v + cos * u) / d.scale + cx
        out = _bilinear(out, sy, sx)
    gains = np.stack([d.gains for d in draws]).astype(out.dtype)
    out = out * gains[:, :, None, None]
    for i, d in enumerate(draws):
        if d.noise is not None:
            out[i] += d.noise.astype(out.dtype)
    return np.maximum(out, 0, out=out)


def augment(patch: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator, return_draw: bool = False):
    """One random view of a (C, H, W) patch.

    Geometry (flips, rotation/translation/scale with bilinear resampling and
    zero fill) is shared by all channels; gains are per channel; noise is
    i.i.d. per pixel; the result is clamped at zero.
    """
    c, h, w = patch.shape
    d = _draw(cfg, c, h, w, rng)
    out = _apply(patch[None], [d])[0]
    return (out, d) if return_draw else out


def view_rng(run_seed: int, iteration: int, patch_index: int, view: int) -> np.random.Generator:
    """Independent stream per (run, iteration, patch, view); schedule-independent."""
    return np.random.default_rng(np.random.SeedSequence([run_seed, iteration, int(patch_index), view]))


def augment_batch(patches: np.ndarray, cfg: AugmentConfig, rngs: list[np.random.Generator]) -> np.ndarray:
    b, c, h, w = patches.shape
    draws = [_draw(cfg, c, h, w, r) for r in rngs]
    return _apply(patches, draws)


# ------------------------------------------------------------------ objectives


def nt_xent_loss(z: Tensor, temperature: float = 0.2) -> Tensor:
    """NT-Xent over 2B rows where rows ``i`` and ``i + B`` are positives.

    Each anchor's cross-entropy runs over the 2B-1 other rows (self excluded);
    the loss is the mean over all 2B anchors.
    """
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    z = ad.as_tensor(z)
    if z.ndim != 2 or z.shape[0] % 2 or z.shape[0] < 2:
        raise DimensionError(f"nt_xent expects (2B, d) embeddings, got {z.shape}")
    n, d = z.shape
    sq = ad.sum(ad.mul(z, z), axis=1, keepdims=True)
    if np.any(sq.data <= 0):
        raise NumericalError("nt_xent: zero-norm embedding row")
    zn = ad.div(z, ad.expand(ad.sqrt(sq), (n, d)))
    sim = ad.mul(ad.matmul(zn, ad.transpose(zn)), 1.0 / temperature)
    self_mask = Tensor(np.where(np.eye(n, dtype=bool), -1e9, 0.0).astype(z.dtype))
    logits = ad.add(sim, self_mask)
    pos = (np.arange(n) + n // 2) % n
    return ad.mean(ad.sub(ad.logsumexp(logits, axis=1), ad.pick(logits, pos)))


@dataclass(frozen=True)
class VicregWeights:
    invariance: float = 25.0
    variance: float = 25.0
    covariance: float = 1.0


def _vicreg_branch(z: Tensor, eps: float) -> tuple[Tensor, Tensor]:
    b, d = z.shape
    zc = ad.sub(z, ad.expand(ad.mean(z, axis=0, keepdims=True), (b, d)))
    var = ad.mul(ad.sum(ad.mul(zc, zc), axis=0), 1.0 / (b - 1))
    std = ad.sqrt(ad.add(var, eps))
    var_term = ad.mean(ad.relu(ad.sub(1.0, std)))
    cov = ad.mul(ad.matmul(ad.transpose(zc), zc), 1.0 / (b - 1))
    off = ad.mul(cov, Tensor((1.0 - np.eye(d)).astype(z.dtype)))
    cov_term = ad.mul(ad.sum(ad.mul(off, off)), 1.0 / d)
    return var_term, cov_term


def vicreg_loss(
    za: Tensor,
    zb: Tensor,
    invariance: float = 25.0,
    variance: float = 25.0,
    covariance: float = 1.0,
    eps: float = 1e-4,
    return_terms: bool = False,
):
    """Invariance (MSE) + variance hinge per branch + off-diagonal covariance per branch."""
    za, zb = ad.as_tensor(za), ad.as_tensor(zb)
    if za.shape != zb.shape or za.ndim != 2:
        raise DimensionError(f"vicreg: branch shapes {za.shape} and {zb.shape} must match and be 2-D")
    if za.shape[0] < 2:
        raise DimensionError("vicreg needs a batch of at least 2 (variance undefined)")
    diff = ad.sub(za, zb)
    inv = ad.mean(ad.mul(diff, diff))
    va, ca = _vicreg_branch(za, eps)
    vb, cb = _vicreg_branch(zb, eps)
    loss = ad.add(
        ad.add(ad.mul(inv, invariance), ad.mul(ad.add(va, vb), variance)),
        ad.mul(ad.add(ca, cb), covariance),
    )
    if return_terms:
        terms = {"invariance": inv.item(), "variance": va.item() + vb.item(), "covariance": ca.item() + cb.item()}
        return loss, terms
    return loss


# ------------------------------------------------------------------ LARS


def is_lars_exempt(name: str) -> bool:
    """BN affine parameters and biases skip trust-ratio scaling and weight decay."""
    return name.endswith((".bias", ".gamma", ".beta"))


@dataclass
class LarsState:
    lr: float = 0.3
    momentum: float = 0.9
    weight_decay: float = 1e-6
    trust: float = 1e-3
    eps: float = 0.0
    adapt: bool = True
    exempt: Callable[[str], bool] = is_lars_exempt
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def lars_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: LarsState, lr: float | None = None) -> dict[str, np.ndarray]:
    """In-place LARS update of ``params``; returns ``params``.

    For adapted tensors ``local = trust * |w| / (|g| + wd * |w| + eps)`` (1 when
    either norm is zero); ``update = momentum * buf + local * lr * (g + wd * w)``;
    ``w -= update``. Exempt tensors use ``local = 1`` and no weight decay.
    """
    eta = state.lr if lr is None else lr
    staged = {}
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != w.shape:
            raise DimensionError(f"lars: gradient for {name} has shape {g.shape}, parameter {w.shape}")
        if not np.any(g):
            step_dir = g  # no gradient signal: no decay either, only momentum carries over
            local = 1.0
        elif state.adapt and not state.exempt(name):
            wn = float(np.linalg.norm(w))
            gn = float(np.linalg.norm(g))
            local = state.trust * wn / (gn + state.weight_decay * wn + state.eps) if wn > 0 and gn > 0 else 1.0
            step_dir = g + state.weight_decay * w
        else:
            local = 1.0
            step_dir = g
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(w)
        with np.errstate(invalid="ignore", over="ignore"):
            update = state.momentum * buf + (local * eta) * step_dir
        if not np.all(np.isfinite(update)):
            raise NumericalError(f"lars: non-finite update for {name}")
        staged[name] = update
    for name, update in staged.items():
        state.buffers[name] = update
        params[name] -= update.astype(params[name].dtype, copy=False)
    return params


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


# ------------------------------------------------------------------ pretraining


@dataclass
class SslRunConfig:
    objective: str = "simclr"
    temperature: float = 0.2
    batch_size: int = 64
    iterations: int = 500
    lr: float | None = None  # None: DEFAULT_LR[objective]
    momentum: float = 0.9
    weight_decay: float = 1e-6
    trust: float = 1e-3
    vicreg: VicregWeights = field(default_factory=VicregWeights)
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.objective not in ("simclr", "vicreg"):
            raise ConfigurationError(f"objective must be simclr or vicreg, got {self.objective!r}")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (2B >= 4 views)")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.lr is not None and self.lr <= 0:
            raise ConfigurationError("lr must be positive")

    @property
    def base_lr(self) -> float:
        return DEFAULT_LR[self.objective] if self.lr is None else self.lr

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SslRunConfig":
        d = dict(d)
        if isinstance(d.get("vicreg"), Mapping):
            d["vicreg"] = VicregWeights(**d["vicreg"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc


def view_batches(bundle: DatasetBundle, cfg: SslRunConfig, aug: AugmentConfig, iterations: int | None = None) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    """Yield ``(iteration, view1, view2)`` for the run; identical for identical seeds."""
    train = bundle.indices("train")
    if len(train) < cfg.batch_size:
        raise ConfigurationError(f"batch size {cfg.batch_size} exceeds train split size {len(train)}")
    sampler = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    dtype = np.dtype(cfg.dtype)
    for it in range(cfg.iterations if iterations is None else iterations):
        idx = np.sort(sampler.choice(train, size=cfg.batch_size, replace=False))
        x = bundle.patches[idx].astype(dtype)
        v1 = augment_batch(x, aug, [view_rng(cfg.seed, it, i, 0) for i in idx])
        v2 = augment_batch(x, aug, [view_rng(cfg.seed, it, i, 1) for i in idx])
        yield it, v1, v2


def ssl_loss(model: Model, v1: np.ndarray, v2: np.ndarray, cfg: SslRunConfig, params: Mapping[str, Tensor] | None = None) -> Tensor:
    x = np.concatenate([v1, v2])
    _, pooled = forward_features(model, x, training=True, params=params)
    z = forward_head(model, pooled, "projection", params=params)
    if cfg.objective == "simclr":
        return nt_xent_loss(z, cfg.temperature)
    b = len(v1)
    za = ad.take(z, np.arange(b))
    zb = ad.take(z, np.arange(b, 2 * b))
    w = cfg.vicreg
    return vicreg_loss(za, zb, w.invariance, w.variance, w.covariance)


def pretrain(
    bundle: DatasetBundle,
    model: Model,
    cfg: SslRunConfig | None = None,
    aug: AugmentConfig | None = None,
    checkpoint_dir=None,
    callback: Callable[[int, float], None] | None = None,
) -> tuple[Model, list[float]]:
    """SSL pretraining of backbone + projection head with LARS and cosine decay.

    Returns a new model (the input is not modified) and the per-iteration
    loss history.
    """
    cfg = cfg or SslRunConfig()
    aug = aug or AugmentConfig()
    cfg.validate()
    if "proj.fc1.weight" not in model.params:
        raise ConfigurationError("pretraining needs a model with a projection head")
    if cfg.iterations == 0:
        return model.copy(), []
    work = model.astype(np.dtype(cfg.dtype))
    state = LarsState(lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay, trust=cfg.trust)
    history: list[float] = []
    for it, v1, v2 in view_batches(bundle, cfg, aug):
        params = {k: Tensor(v, requires_grad=True) for k, v in work.params.items()}
        loss = ssl_loss(work, v1, v2, cfg, params)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"pretrain diverged at iteration {it}: loss={value}")
        loss.backward()
        grads = {k: t.grad for k, t in params.items() if t.grad is not None}
        lars_step(work.params, grads, state, lr=cosine_lr(cfg.base_lr, it, cfg.iterations))
        history.append(value)
        if callback is not None:
            callback(it, value)
        if checkpoint_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            work.save(Path(checkpoint_dir) / f"ckpt_{it + 1:06d}.cimw")
        if it % 100 == 0:
            logger.debug("iter %d loss %.4f", it, value)
    return work.astype(np.float64), history


def evaluate_ssl_loss(bundle: DatasetBundle, model: Model, cfg: SslRunConfig, aug: AugmentConfig, iterations: int | None = None) -> list[float]:
    """Loss of a fixed encoder on the batches a run with ``cfg`` would draw."""
    work = model.astype(np.dtype(cfg.dtype))
    return [ssl_loss(work, v1, v2, cfg).item() for _, v1, v2 in view_batches(bundle, cfg, aug, iterations)]


def write_loss_history(path, history: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(history):
            w.writerow([i, repr(float(v))])
