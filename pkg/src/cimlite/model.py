"""Channel-independent encoder (CIM / CIM-S) and a matched early-fusion CNN.

Parameters live in plain ``dict[str, np.ndarray]`` objects so they can be
serialized, hashed and sliced without ceremony. The forward functions accept
an optional dict of :class:`~cimlite.autodiff.Tensor` overrides; training code
passes trainable tensors there and reads gradients back by name.

CIM layer list (``C`` markers, width ``k``, ``N`` blocks)::

    stem      grouped 1x1 conv, groups=C, 1 -> k per marker, BN, ReLU
    block xN  depthwise 3x3, BN, ReLU, per-marker SE gate,
              grouped 1x1 conv (k -> k per marker), BN, + block input, ReLU
    pool      global average pool -> (N, C*k)
    heads     projection  C*k -> d_proj -> d_proj     (SSL)
              classifier  C*k -> hidden -> K          (supervised)
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError, FormatError
from .weights import load_cimw, save_cimw

HEAD_KINDS = ("projection", "classifier")


@dataclass(frozen=True)
class CimConfig:
    markers: int
    width: int = 4
    depth: int = 1
    se_reduction: int = 2
    proj_dim: int = 64
    hidden_dim: int = 64
    num_classes: int = 0
    input_size: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.markers < 1 or self.width < 1 or self.depth < 0:
            raise ConfigurationError(f"need markers>=1, width>=1, depth>=0; got {self}")
        if self.se_reduction not in (1, 2) or self.width % self.se_reduction:
            raise ConfigurationError(f"se_reduction must be 1 or 2 and divide width, got {self.se_reduction}")
        if self.proj_dim < 0 or self.hidden_dim < 1 or self.num_classes < 0 or self.input_size < 1:
            raise ConfigurationError(f"invalid head or input sizes in {self}")

    @classmethod
    def cim_s(cls, markers: int, **overrides) -> "CimConfig":
        """The shallow preset: one block, four features per marker."""
        return cls(markers=markers, width=4, depth=1, **overrides)

    @property
    def embed_dim(self) -> int:
        return self.markers * self.width

    def to_dict(self) -> dict:
        return {"kind": "cim", **asdict(self)}


@dataclass(frozen=True)
class BaselineConfig:
    """Conventional CNN whose first 3x3 conv mixes all markers."""

    markers: int
    width: int = 12
    proj_dim: int = 64
    hidden_dim: int = 64
    num_classes: int = 0
    input_size: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.markers < 1 or self.width < 1 or self.proj_dim < 0 or self.num_classes < 0:
            raise ConfigurationError(f"invalid baseline config {self}")

    @property
    def embed_dim(self) -> int:
        return self.width

    def to_dict(self) -> dict:
        return {"kind": "earlyfusion", **asdict(self)}


def config_from_dict(d: Mapping) -> CimConfig | BaselineConfig:
    d = dict(d)
    kind = d.pop("kind", "cim")
    cls = {"cim": CimConfig, "earlyfusion": BaselineConfig}.get(kind)
    if cls is None:
        raise ConfigurationError(f"unknown model kind {kind!r}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


@dataclass
class FeatureBlockView:
    """Marker ``c`` owns channels ``[c*k, (c+1)*k)`` of the pre-fusion representation."""

    markers: int
    width: int

    def __getitem__(self, c: int) -> slice:
        if not 0 <= c < self.markers:
            raise IndexError(c)
        return slice(c * self.width, (c + 1) * self.width)

    def __len__(self) -> int:
        return self.markers

    def owner(self, channel: int) -> int:
        return channel // self.width


@dataclass
class Model:
    """Learnable parameters plus BN running statistics for one network."""

    config: CimConfig | BaselineConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "cim" if isinstance(self.config, CimConfig) else "earlyfusion"

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()}, {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> "Model":
        return Model(
            self.config,
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def state(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.buffers}

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.state().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def save(self, weights_path) -> None:
        """Write ``<name>.cimw`` weights and a sibling ``<name>.json`` config."""
        weights_path = Path(weights_path)
        save_cimw(weights_path, self.state())
        weights_path.with_suffix(".json").write_text(json.dumps(self.config.to_dict(), indent=2))

    @classmethod
    def load(cls, weights_path, config_path=None) -> "Model":
        weights_path = Path(weights_path)
        config_path = Path(config_path) if config_path else weights_path.with_suffix(".json")
        config = config_from_dict(json.loads(config_path.read_text()))
        tensors = load_cimw(weights_path)
        expected = param_shapes(config)
        missing = set(expected) - set(tensors)
        if missing:
            raise FormatError(f"weights file lacks {sorted(missing)[:3]}...")
        params = {k: tensors[k] for k in expected}
        buffers = {k: v for k, v in tensors.items() if k not in expected}
        return cls(config, params, buffers)


# ------------------------------------------------------------------ shapes


def _head_shapes(cfg, in_dim: int) -> dict[str, tuple]:
    shapes = {}
    if cfg.proj_dim:
        d = cfg.proj_dim
        shapes.update({"proj.fc1.weight": (d, in_dim), "proj.fc1.bias": (d,), "proj.fc2.weight": (d, d), "proj.fc2.bias": (d,)})
    if cfg.num_classes:
        hdim, k = cfg.hidden_dim, cfg.num_classes
        shapes.update({"cls.fc1.weight": (hdim, in_dim), "cls.fc1.bias": (hdim,), "cls.fc2.weight": (k, hdim), "cls.fc2.bias": (k,)})
    return shapes


def _bn_shapes(prefix: str, c: int) -> dict[str, tuple]:
    return {f"{prefix}.gamma": (c,), f"{prefix}.beta": (c,)}


def param_shapes(cfg: CimConfig | BaselineConfig) -> dict[str, tuple]:
    """Ordered name -> shape map of every learnable tensor."""
    shapes: dict[str, tuple] = {}
    if isinstance(cfg, CimConfig):
        ck, k, h = cfg.embed_dim, cfg.width, cfg.width // cfg.se_reduction
        shapes["stem.weight"] = (ck, 1, 1, 1)
        shapes["stem.bias"] = (ck,)
        shapes.update(_bn_shapes("stem.bn", ck))
        for b in range(cfg.depth):
            p = f"blocks.{b}"
            shapes[f"{p}.dw.weight"] = (ck, 1, 3, 3)
            shapes[f"{p}.dw.bias"] = (ck,)
            shapes.update(_bn_shapes(f"{p}.bn1", ck))
            shapes[f"{p}.se.fc1.weight"] = (cfg.markers * h, k, 1, 1)
            shapes[f"{p}.se.fc1.bias"] = (cfg.markers * h,)
            shapes[f"{p}.se.fc2.weight"] = (ck, h, 1, 1)
            shapes[f"{p}.se.fc2.bias"] = (ck,)
            shapes[f"{p}.pw.weight"] = (ck, k, 1, 1)
            shapes[f"{p}.pw.bias"] = (ck,)
            shapes.update(_bn_shapes(f"{p}.bn2", ck))
    else:
        c, w = cfg.markers, cfg.width
        shapes["conv1.weight"] = (w, c, 3, 3)
        shapes["conv1.bias"] = (w,)
        shapes.update(_bn_shapes("bn1", w))
        for i in (1, 2):
            shapes[f"res.conv{i}.weight"] = (w, w, 3, 3)
            shapes[f"res.conv{i}.bias"] = (w,)
            shapes.update(_bn_shapes(f"res.bn{i}", w))
    shapes.update(_head_shapes(cfg, cfg.embed_dim))
    return shapes


def _bn_prefixes(cfg) -> list[tuple[str, int]]:
    if isinstance(cfg, CimConfig):
        ck = cfg.embed_dim
        out = [("stem.bn", ck)]
        for b in range(cfg.depth):
            out += [(f"blocks.{b}.bn1", ck), (f"blocks.{b}.bn2", ck)]
        return out
    return [("bn1", cfg.width), ("res.bn1", cfg.width), ("res.bn2", cfg.width)]


@dataclass(frozen=True)
class ParamCount:
    backbone: int
    projection: int
    classifier: int

    @property
    def total(self) -> int:
        return self.backbone + self.projection + self.classifier


def parameter_count(cfg: CimConfig | BaselineConfig) -> ParamCount:
    """Exact learnable-scalar counts, evaluated from closed-form layer formulas."""
    if isinstance(cfg, CimConfig):
        c, k, n = cfg.markers, cfg.width, cfg.depth
        h = k // cfg.se_reduction
        stem = c * k + c * k + 2 * c * k
        block = (9 * c * k + c * k) + 2 * c * k + c * (k * h + h) + c * (h * k + k) + (c * k * k + c * k) + 2 * c * k
        backbone = stem + n * block
    else:
        c, w = cfg.markers, cfg.width
        backbone = (9 * c * w + w + 2 * w) + 2 * (9 * w * w + w + 2 * w)
    e = cfg.embed_dim
    d = cfg.proj_dim
    projection = (e * d + d + d * d + d) if d else 0
    hd, kc = cfg.hidden_dim, cfg.num_classes
    classifier = (e * hd + hd + hd * kc + kc) if kc else 0
    return ParamCount(backbone, projection, classifier)


# ------------------------------------------------------------------ builders


def _init(shapes: Mapping[str, tuple], seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape)
        elif name.endswith((".beta", ".bias")):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def _init_buffers(cfg) -> dict[str, np.ndarray]:
    buffers = {}
    for prefix, c in _bn_prefixes(cfg):
        buffers[f"{prefix}.running_mean"] = np.zeros(c)
        buffers[f"{prefix}.running_var"] = np.ones(c)
    return buffers


def build_cim(config: CimConfig, rng_seed: int | None = None) -> Model:
    """Kaiming-uniform (fan-in) conv/linear weights, BN gamma=1 beta=0, zero biases."""
    seed = config.seed if rng_seed is None else rng_seed
    return Model(config, _init(param_shapes(config), seed), _init_buffers(config))


def build_earlyfusion_baseline(markers: int, num_classes: int = 0, width: int | None = None, **kw) -> Model:
    """Early-fusion CNN; ``width=None`` picks the width closest in size to CIM-S."""
    if width is None:
        width = matched_baseline_width(markers, num_classes=num_classes, proj_dim=kw.get("proj_dim", 64), hidden_dim=kw.get("hidden_dim", 64))
    cfg = BaselineConfig(markers=markers, width=width, num_classes=num_classes, **kw)
    return Model(cfg, _init(param_shapes(cfg), cfg.seed), _init_buffers(cfg))


def matched_baseline_width(markers: int, num_classes: int = 0, proj_dim: int = 64, hidden_dim: int = 64) -> int:
    """Baseline width whose backbone+head total is closest to the CIM-S total."""
    target = parameter_count(CimConfig.cim_s(markers, proj_dim=proj_dim, hidden_dim=hidden_dim, num_classes=num_classes)).total

    def total(w):
        return parameter_count(BaselineConfig(markers, w, proj_dim, hidden_dim, num_classes)).total

    return min(range(1, 257), key=lambda w: (abs(total(w) - target), w))


def build_model(config: CimConfig | BaselineConfig) -> Model:
    if isinstance(config, CimConfig):
        return build_cim(config)
    return Model(config, _init(param_shapes(config), config.seed), _init_buffers(config))


# ------------------------------------------------------------------ forward


def _tensors(model: Model, params: Mapping[str, Tensor] | None) -> dict[str, Tensor]:
    if params is not None:
        return dict(params)
    return {k: Tensor(v) for k, v in model.params.items()}


def _bn(model: Model, t: Mapping[str, Tensor], prefix: str, x: Tensor, training: bool) -> Tensor:
    return ad.batchnorm2d(
        x,
        t[f"{prefix}.gamma"],
        t[f"{prefix}.beta"],
        model.buffers[f"{prefix}.running_mean"],
        model.buffers[f"{prefix}.running_var"],
        training,
    )


def se_gate(features: Tensor, fc1_w: Tensor, fc1_b: Tensor, fc2_w: Tensor, fc2_b: Tensor, markers: int) -> tuple[Tensor, Tensor]:
    """Per-marker squeeze-and-excitation.

    Each marker's ``k`` channels are averaged spatially, passed through its own
    ``k -> k/r -> k`` bottleneck (ReLU, then sigmoid), and the resulting gates
    rescale only that marker's channels. Returns ``(gated, gates)`` with gates
    of shape ``(N, C*k)``.
    """
    n, ck, hh, ww = features.shape
    if ck % markers or fc2_w.shape[0] != ck:
        raise DimensionError(f"se_gate: {ck} channels do not split into {markers} marker blocks")
    s = ad.reshape(ad.global_avg_pool(features), (n, ck, 1, 1))
    s = ad.relu(ad.conv2d_grouped(s, fc1_w, fc1_b, groups=markers))
    gates = ad.sigmoid(ad.conv2d_grouped(s, fc2_w, fc2_b, groups=markers))
    gated = ad.mul(features, ad.expand(gates, (n, ck, hh, ww)))
    return gated, ad.reshape(gates, (n, ck))


def _cim_block(model: Model, t, b: int, x: Tensor, training: bool) -> Tensor:
    cfg = model.config
    p = f"blocks.{b}"
    h = ad.depthwise_conv2d(x, t[f"{p}.dw.weight"], t[f"{p}.dw.bias"], padding="same")
    h = ad.relu(_bn(model, t, f"{p}.bn1", h, training))
    h, _ = se_gate(h, t[f"{p}.se.fc1.weight"], t[f"{p}.se.fc1.bias"], t[f"{p}.se.fc2.weight"], t[f"{p}.se.fc2.bias"], cfg.markers)
    h = ad.conv2d_grouped(h, t[f"{p}.pw.weight"], t[f"{p}.pw.bias"], groups=cfg.markers)
    h = _bn(model, t, f"{p}.bn2", h, training)
    return ad.relu(ad.add(h, x))


def forward_features(model: Model, x, training: bool = False, params: Mapping[str, Tensor] | None = None) -> tuple[Tensor, Tensor]:
    """Backbone forward pass; returns ``(prefusion, pooled)``.

    ``prefusion`` is the last feature map before pooling, shape (N, D, H, W);
    ``pooled`` is its global average, shape (N, D). For CIM, D = C*k.
    """
    x = ad.as_tensor(x)
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != cfg.markers:
        raise DimensionError(f"expected input (N, {cfg.markers}, H, W), got {x.shape}")
    t = _tensors(model, params)
    if isinstance(cfg, CimConfig):
        h = ad.conv2d_grouped(x, t["stem.weight"], t["stem.bias"], groups=cfg.markers)
        h = ad.relu(_bn(model, t, "stem.bn", h, training))
        for b in range(cfg.depth):
            h = _cim_block(model, t, b, h, training)
    else:
        h = ad.conv2d_grouped(x, t["conv1.weight"], t["conv1.bias"], padding="same")
        h = ad.relu(_bn(model, t, "bn1", h, training))
        r = ad.conv2d_grouped(h, t["res.conv1.weight"], t["res.conv1.bias"], padding="same")
        r = ad.relu(_bn(model, t, "res.bn1", r, training))
        r = ad.conv2d_grouped(r, t["res.conv2.weight"], t["res.conv2.bias"], padding="same")
        r = _bn(model, t, "res.bn2", r, training)
        h = ad.relu(ad.add(r, h))
    return h, ad.global_avg_pool(h)


def forward_head(model: Model, pooled, head_kind: str, params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Fusion head: the only place where marker blocks are mixed."""
    if head_kind not in HEAD_KINDS:
        raise ConfigurationError(f"head_kind must be one of {HEAD_KINDS}, got {head_kind!r}")
    prefix = "proj" if head_kind == "projection" else "cls"
    if f"{prefix}.fc1.weight" not in model.params:
        raise ConfigurationError(f"model has no {head_kind} head")
    pooled = ad.as_tensor(pooled)
    t = _tensors(model, params)
    h = ad.relu(ad.linear(pooled, t[f"{prefix}.fc1.weight"], t[f"{prefix}.fc1.bias"]))
    return ad.linear(h, t[f"{prefix}.fc2.weight"], t[f"{prefix}.fc2.bias"])


def embed(model: Model, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Eval-mode pooled embeddings for a stack of patches, computed in batches."""
    out = []
    for i in range(0, len(x), batch_size):
        _, pooled = forward_features(model, x[i : i + batch_size], training=False)
        out.append(pooled.data)
    if not out:
        return np.zeros((0, model.config.embed_dim))
    return np.concatenate(out)


def with_heads(model: Model, proj_dim: int | None = None, num_classes: int | None = None, seed: int | None = None) -> Model:
    """Copy of ``model`` with re-initialized heads of the given sizes; backbone weights are kept.

    A head whose size is left as ``None`` keeps its current weights.
    """
    changes = {}
    if proj_dim is not None:
        changes["proj_dim"] = proj_dim
    if num_classes is not None:
        changes["num_classes"] = num_classes
    cfg = replace(model.config, **changes)
    fresh = _init(param_shapes(cfg), model.config.seed + 7919 if seed is None else seed)
    reset = {"proj"} if proj_dim is not None else set()
    if num_classes is not None:
        reset.add("cls")
    params = {}
    for name, arr in fresh.items():
        if name.split(".")[0] in reset or name not in model.params:
            params[name] = arr
        else:
            params[name] = model.params[name].copy()
    return Model(cfg, params, copy.deepcopy(model.buffers))
