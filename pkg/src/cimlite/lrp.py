"""Layer-wise relevance propagation through a frozen CIM encoder, and phenotyping.

Propagation runs on a *canonized* copy of the network: every eval-mode
BatchNorm is folded into the convolution before it, so each layer is a plain
affine map followed (possibly) by a ReLU. Rules per layer:

* stem (input layer): box rule with per-channel bounds ``[low, high]``
* depthwise 3x3 convolutions: gamma rule
* pointwise fusion convolutions and dense head layers: epsilon rule
* residual sums: split in proportion to each summand's contribution
* squeeze-and-excitation gates: fixed coefficients (relevance passes through)
* global average pooling: a linear layer with uniform weights ``1/(HW)``

Folded biases sit in the epsilon/gamma denominators by default and absorb part
of the relevance; ``bias_in_denominator=False`` drops them so each layer is
conservative up to epsilon, at the price of large values wherever the weighted
sum is close to zero.

Every rule is evaluated with the gradient trick ``R_in = a * W^T (R_out / z)``
on top of the autodiff convolution, so the code is batched over patches.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MarkerModule
from .errors import ConfigurationError, DimensionError, NumericalError
from .model import CimConfig, Model

TARGETS = ("pooled_sum", "unit", "logit")
INPUT_RULES = ("box", "epsilon")
POOL_RULES = ("linear", "flat")


@dataclass(frozen=True)
class RuleConfig:
    """Composite-rule settings. ``gamma=0`` with ``input_rule='epsilon'`` is the pure epsilon rule."""

    epsilon: float = 1e-6
    gamma: float = 0.25
    low: float = 0.0
    high: float = 1.0
    input_rule: str = "box"
    pool_rule: str = "linear"
    target: str = "pooled_sum"
    target_index: int = 0  # embedding unit or class index for the non-default targets
    bias_in_denominator: bool = True  # False: z is the sum of input contributions only, so nothing is absorbed

    def __post_init__(self):
        if self.epsilon < 0 or self.gamma < 0:
            raise ConfigurationError(f"epsilon and gamma must be non-negative: {self}")
        if self.high < self.low:
            raise ConfigurationError(f"box bounds reversed: [{self.low}, {self.high}]")
        if self.input_rule not in INPUT_RULES or self.pool_rule not in POOL_RULES or self.target not in TARGETS:
            raise ConfigurationError(f"unknown rule/target choice in {self}")

    @classmethod
    def epsilon_only(cls, epsilon: float = 1e-6, **kw) -> "RuleConfig":
        return cls(epsilon=epsilon, gamma=0.0, input_rule="epsilon", **kw)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# ------------------------------------------------------------------ canonization


@dataclass
class FoldedCim:
    """A CIM encoder with BatchNorm folded away; float64 affine layers only."""

    markers: int
    width: int
    layers: dict[str, tuple[np.ndarray, np.ndarray]]  # name -> (weight, bias)
    depth: int
    head: dict[str, np.ndarray] = field(default_factory=dict)  # raw head parameters, if any


def _fold(weight: np.ndarray, bias: np.ndarray, gamma, beta, mean, var, eps: float):
    s = gamma / np.sqrt(var + eps)
    return weight * s[:, None, None, None], (bias - mean) * s + beta


def fold_batchnorm(model: Model, eps: float = ad.BN_EPS) -> FoldedCim:
    """Fold eval-mode BN statistics into the preceding convolutions.

    Raises if the model is not a CIM, or if its running statistics are missing,
    non-finite or non-positive (which would mean they were never estimated).
    """
    cfg = model.config
    if not isinstance(cfg, CimConfig):
        raise ConfigurationError("LRP is implemented for the channel-independent encoder only")
    p = {k: np.asarray(v, dtype=np.float64) for k, v in model.params.items()}
    bufs = {k: np.asarray(v, dtype=np.float64) for k, v in model.buffers.items()}

    def bn(prefix):
        try:
            mean, var = bufs[f"{prefix}.running_mean"], bufs[f"{prefix}.running_var"]
        except KeyError as exc:
            raise ConfigurationError(f"missing running statistics for {prefix}") from exc
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var)) and np.all(var > 0)):
            raise ConfigurationError(f"{prefix}: running statistics are not valid eval-mode statistics")
        return p[f"{prefix}.gamma"], p[f"{prefix}.beta"], mean, var

    layers = {"stem": _fold(p["stem.weight"], p["stem.bias"], *bn("stem.bn"), eps)}
    for b in range(cfg.depth):
        q = f"blocks.{b}"
        layers[f"{q}.dw"] = _fold(p[f"{q}.dw.weight"], p[f"{q}.dw.bias"], *bn(f"{q}.bn1"), eps)
        layers[f"{q}.pw"] = _fold(p[f"{q}.pw.weight"], p[f"{q}.pw.bias"], *bn(f"{q}.bn2"), eps)
        for name in ("fc1", "fc2"):
            layers[f"{q}.se.{name}"] = (p[f"{q}.se.{name}.weight"], p[f"{q}.se.{name}.bias"])
    head = {k: v for k, v in p.items() if k.split(".")[0] in ("proj", "cls")}
    return FoldedCim(cfg.markers, cfg.width, layers, cfg.depth, head)


def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, groups: int) -> np.ndarray:
    pad = "same" if w.shape[-1] > 1 else 0
    return ad.conv2d_grouped(Tensor(x), Tensor(w), None if b is None else Tensor(b), groups=groups, padding=pad).data


def _conv_t(s: np.ndarray, x_shape: tuple, w: np.ndarray, groups: int) -> np.ndarray:
    """Transpose convolution (gradient of ``conv(x, w)`` w.r.t. ``x`` contracted with ``s``)."""
    x = Tensor(np.zeros(x_shape), requires_grad=True)
    pad = "same" if w.shape[-1] > 1 else 0
    out = ad.conv2d_grouped(x, Tensor(w), groups=groups, padding=pad)
    out.backward(s)
    return x.grad


def _stabilize(z: np.ndarray, eps: float) -> np.ndarray:
    return z + eps * np.where(z >= 0, 1.0, -1.0)


def forward_folded(net: FoldedCim, x: np.ndarray) -> dict[str, np.ndarray]:
    """Eval-mode forward pass of the canonized encoder, keeping what LRP needs."""
    x = np.asarray(x, dtype=np.float64)
    c = net.markers
    acts = {"input": x}
    w, b = net.layers["stem"]
    h = np.maximum(_conv(x, w, b, c), 0)
    acts["stem"] = h
    for blk in range(net.depth):
        q = f"blocks.{blk}"
        w, b = net.layers[f"{q}.dw"]
        a1 = np.maximum(_conv(h, w, b, h.shape[1]), 0)
        n, ck = a1.shape[:2]
        s = a1.mean(axis=(2, 3)).reshape(n, ck, 1, 1)
        s = np.maximum(_conv(s, *net.layers[f"{q}.se.fc1"], c), 0)
        z = _conv(s, *net.layers[f"{q}.se.fc2"], c)
        gate = 0.5 * (1.0 + np.tanh(0.5 * z))  # sigmoid, same form as autodiff
        g = a1 * gate
        w, b = net.layers[f"{q}.pw"]
        z2 = _conv(g, w, b, c)
        out = np.maximum(z2 + h, 0)
        acts.update({f"{q}.in": h, f"{q}.a1": a1, f"{q}.g": g, f"{q}.z2": z2, f"{q}.out": out})
        h = out
    acts["features"] = h
    acts["pooled"] = h.mean(axis=(2, 3))
    return acts


# ------------------------------------------------------------------ rules


def _eps_rule(a, w, b, r_out, groups, eps):
    z = _conv(a, w, b, groups)  # b=None: denominator is the sum of contributions only
    return a * _conv_t(r_out / _stabilize(z, eps), a.shape, w, groups)


def _gamma_rule(a, w, b, r_out, groups, eps, gamma):
    wg = w + gamma * np.maximum(w, 0)
    bg = None if b is None else b + gamma * np.maximum(b, 0)
    return _eps_rule(a, wg, bg, r_out, groups, eps)


def _box_rule(x, w, r_out, groups, eps, low, high):
    wp, wn = np.maximum(w, 0), np.minimum(w, 0)
    lo = np.full_like(x, low)
    hi = np.full_like(x, high)
    z = _conv(x, w, None, groups) - _conv(lo, wp, None, groups) - _conv(hi, wn, None, groups)
    s = r_out / _stabilize(z, eps)
    return x * _conv_t(s, x.shape, w, groups) - lo * _conv_t(s, x.shape, wp, groups) - hi * _conv_t(s, x.shape, wn, groups)


def _dense_eps(a: np.ndarray, w: np.ndarray, b: np.ndarray | None, r_out: np.ndarray, eps: float) -> np.ndarray:
    z = a @ w.T if b is None else a @ w.T + b
    return a * ((r_out / _stabilize(z, eps)) @ w)


def _check(name: str, r: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(r)):
        raise NumericalError(f"non-finite relevance at {name}")
    return r


# ------------------------------------------------------------------ explanation


@dataclass
class RelevanceMap:
    """Signed relevance for a stack of patches, shape (N, C, H, W)."""

    values: np.ndarray
    patch_ids: np.ndarray
    target: str
    explained: np.ndarray  # value of the explained scalar per patch
    layer_sums: dict[str, np.ndarray] = field(default_factory=dict)  # per-patch relevance total after each step
    layer_io: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)  # layer -> (total at output, total at input)

    def __len__(self) -> int:
        return len(self.values)


def _head_relevance(net: FoldedCim, pooled: np.ndarray, cfg: RuleConfig) -> tuple[np.ndarray, np.ndarray]:
    n, d = pooled.shape
    if cfg.target == "pooled_sum":
        return pooled.copy(), pooled.sum(axis=1)
    if cfg.target == "unit":
        if not 0 <= cfg.target_index < d:
            raise ConfigurationError(f"target unit {cfg.target_index} out of range for embedding size {d}")
        r = np.zeros_like(pooled)
        r[:, cfg.target_index] = pooled[:, cfg.target_index]
        return r, pooled[:, cfg.target_index].copy()
    if "cls.fc1.weight" not in net.head:
        raise ConfigurationError("logit target needs a classifier head")
    w1, b1, w2, b2 = (net.head[k] for k in ("cls.fc1.weight", "cls.fc1.bias", "cls.fc2.weight", "cls.fc2.bias"))
    if not 0 <= cfg.target_index < w2.shape[0]:
        raise ConfigurationError(f"target class {cfg.target_index} out of range")
    hidden = np.maximum(pooled @ w1.T + b1, 0)
    logits = hidden @ w2.T + b2
    r = np.zeros_like(logits)
    r[:, cfg.target_index] = logits[:, cfg.target_index]
    keep = cfg.bias_in_denominator
    r_hidden = _dense_eps(hidden, w2, b2 if keep else None, r, cfg.epsilon)
    return _dense_eps(pooled, w1, b1 if keep else None, r_hidden, cfg.epsilon), logits[:, cfg.target_index].copy()


def _explain_batch(net: FoldedCim, x: np.ndarray, cfg: RuleConfig) -> tuple[np.ndarray, np.ndarray, dict, dict]:
    acts = forward_folded(net, x)
    c = net.markers
    sums: dict[str, np.ndarray] = {}
    io: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def total(r):
        return r.reshape(len(r), -1).sum(axis=1)

    r_pooled, explained = _head_relevance(net, acts["pooled"], cfg)
    sums["pooled"] = total(r_pooled)
    feats = acts["features"]
    hw = feats.shape[2] * feats.shape[3]
    if cfg.pool_rule == "linear":
        denom = _stabilize(acts["pooled"], cfg.epsilon)
        r = feats / hw * (r_pooled / denom)[:, :, None, None]
    else:
        r = np.broadcast_to((r_pooled / hw)[:, :, None, None], feats.shape).copy()
    r = _check("pool", r)
    sums["features"] = total(r)
    io["pool"] = (sums["pooled"], sums["features"])

    for blk in reversed(range(net.depth)):
        q = f"blocks.{blk}"
        h, z2, g = acts[f"{q}.in"], acts[f"{q}.z2"], acts[f"{q}.g"]
        # residual: out = relu(z2 + h), relevance split by contribution
        s = r / _stabilize(z2 + h, cfg.epsilon)
        r_branch, r_skip = z2 * s, h * s
        w, b = net.layers[f"{q}.pw"]
        b = b if cfg.bias_in_denominator else None
        io[f"{q}.residual"] = (total(r), total(r_branch) + total(r_skip))
        r_g = _check(f"{q}.pw", _eps_rule(g, w, b, r_branch, c, cfg.epsilon))
        sums[f"{q}.pw"] = total(r_g)
        io[f"{q}.pw"] = (total(r_branch), sums[f"{q}.pw"])
        # the SE gate is a fixed coefficient: relevance of g passes to a1 unchanged
        w, b = net.layers[f"{q}.dw"]
        b = b if cfg.bias_in_denominator else None
        r_in = _check(f"{q}.dw", _gamma_rule(h, w, b, r_g, h.shape[1], cfg.epsilon, cfg.gamma))
        sums[f"{q}.dw"] = total(r_in)
        io[f"{q}.dw"] = (sums[f"{q}.pw"], sums[f"{q}.dw"])
        r = r_in + r_skip
        sums[f"{q}.in"] = total(r)

    w, _ = net.layers["stem"]
    if cfg.input_rule == "box":
        r_x = _box_rule(x, w, r, c, cfg.epsilon, cfg.low, cfg.high)
    else:
        r_x = _eps_rule(x, w, net.layers["stem"][1] if cfg.bias_in_denominator else None, r, c, cfg.epsilon)
    r_x = _check("input", r_x)
    sums["input"] = total(r_x)
    io["stem"] = (total(r), sums["input"])
    return r_x, explained, sums, io


def lrp_explain(model: Model | FoldedCim, patches: np.ndarray, rule_cfg: RuleConfig | None = None, batch_size: int = 256, patch_ids: Sequence[int] | None = None) -> RelevanceMap:
    """Relevance maps for one (C, H, W) patch or a stack (N, C, H, W).

    The encoder is canonized first (BN folded) when given as a ``Model``.
    """
    cfg = rule_cfg or RuleConfig()
    net = model if isinstance(model, FoldedCim) else fold_batchnorm(model)
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != net.markers:
        raise DimensionError(f"expected patches (N, {net.markers}, H, W), got {x.shape}")
    maps, explained, sums, io = [], [], {}, {}
    for i in range(0, len(x), batch_size):
        r, e, s, layer_io = _explain_batch(net, x[i : i + batch_size], cfg)
        maps.append(r)
        explained.append(e)
        for k, v in s.items():
            sums.setdefault(k, []).append(v)
        for k, v in layer_io.items():
            io.setdefault(k, []).append(v)
    ids = np.arange(len(x)) if patch_ids is None else np.asarray(patch_ids)
    return RelevanceMap(
        np.concatenate(maps) if maps else np.zeros_like(x),
        ids,
        cfg.target,
        np.concatenate(explained) if explained else np.zeros(0),
        {k: np.concatenate(v) for k, v in sums.items()},
        {k: (np.concatenate([o for o, _ in v]), np.concatenate([i for _, i in v])) for k, v in io.items()},
    )


# ------------------------------------------------------------------ aggregation and scoring


@dataclass
class ChannelRelevance:
    scores: np.ndarray  # (N, C) non-negative


def aggregate_channel_relevance(maps, patches: np.ndarray, tau_noise: float = 0.01, pct: float = 99.0) -> ChannelRelevance:
    """Per-channel relevance scores.

    1. zero entries with ``|r| < tau_noise * max|r|`` (per patch);
    2. keep positive relevance, clip it at the patch's ``pct`` percentile of
       positive entries and divide by that percentile;
    3. ``score_c = mean(clipped relevance in channel c) * mean(intensity of channel c)``.
    """
    r = np.asarray(maps.values if isinstance(maps, RelevanceMap) else maps, dtype=np.float64)
    x = np.asarray(patches, dtype=np.float64)
    if r.shape != x.shape:
        raise DimensionError(f"relevance {r.shape} and patches {x.shape} differ in shape")
    single = r.ndim == 3
    if single:
        r, x = r[None], x[None]
    n = len(r)
    flat = r.reshape(n, -1)
    thr = tau_noise * np.abs(flat).max(axis=1, initial=0.0)
    pos = np.where(np.abs(flat) >= thr[:, None], np.maximum(flat, 0.0), 0.0)
    scale = np.zeros(n)
    for i in range(n):
        vals = pos[i][pos[i] > 0]
        if vals.size:
            scale[i] = np.percentile(vals, pct)
    safe = np.where(scale > 0, scale, 1.0)
    clipped = np.minimum(pos, scale[:, None]) / safe[:, None]
    clipped = clipped.reshape(r.shape)
    scores = clipped.mean(axis=(2, 3)) * x.mean(axis=(2, 3))
    return ChannelRelevance(scores[0] if single else scores)


def module_score(scores, module: MarkerModule | Sequence[int]) -> np.ndarray | float:
    """Mean of the three highest member scores (all members if fewer than three)."""
    members = module.members if isinstance(module, MarkerModule) else tuple(module)
    if not members:
        raise ConfigurationError("empty module")
    s = np.asarray(scores.scores if isinstance(scores, ChannelRelevance) else scores, dtype=np.float64)
    sel = s[..., list(members)]
    top = np.sort(sel, axis=-1)[..., ::-1][..., :3]
    out = top.mean(axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass
class PhenotypeAssignment:
    patch_ids: np.ndarray
    module_names: list[str]
    module_scores: np.ndarray  # (N, M)
    chosen: np.ndarray  # (N,) module index
    margin: np.ndarray
    tie: np.ndarray  # bool

    @property
    def phenotypes(self) -> list[str]:
        return [self.module_names[i] for i in self.chosen]


def assign_from_scores(scores, modules: Sequence[MarkerModule], patch_ids=None) -> PhenotypeAssignment:
    """Argmax over module scores; exact ties go to the first-declared module and are flagged."""
    if not modules:
        raise ConfigurationError("need at least one marker module")
    s = np.asarray(scores.scores if isinstance(scores, ChannelRelevance) else scores, dtype=np.float64)
    if s.ndim == 1:
        s = s[None]
    ms = np.stack([np.atleast_1d(module_score(s, m)) for m in modules], axis=1)
    chosen = np.argmax(ms, axis=1)  # first occurrence wins
    best = ms[np.arange(len(ms)), chosen]
    tie = (ms == best[:, None]).sum(axis=1) > 1
    if ms.shape[1] > 1:
        second = np.sort(ms, axis=1)[:, -2]
        margin = best - second
    else:
        margin = best.copy()
    ids = np.arange(len(ms)) if patch_ids is None else np.asarray(patch_ids)
    return PhenotypeAssignment(ids, [m.name for m in modules], ms, chosen, margin, tie)


def assign_phenotype(patches: np.ndarray, model, modules: Sequence[MarkerModule], rule_cfg: RuleConfig | None = None, tau_noise: float = 0.01, pct: float = 99.0, patch_ids=None, batch_size: int = 256):
    """Explain, aggregate and score; returns ``(assignment, relevance_map, channel_relevance)``."""
    if not modules:
        raise ConfigurationError("need at least one marker module")
    maps = lrp_explain(model, patches, rule_cfg, batch_size=batch_size, patch_ids=patch_ids)
    x = np.asarray(patches, dtype=np.float64)
    scores = aggregate_channel_relevance(maps.values, x if x.ndim == 4 else x[None], tau_noise, pct)
    return assign_from_scores(scores, modules, maps.patch_ids), maps, scores


def write_phenotype_table(path, assignment: PhenotypeAssignment, centers: np.ndarray | None = None) -> None:
    """CSV with ``patch_id, x, y, <module scores>, phenotype, margin, tie_flag``."""
    n = len(assignment.chosen)
    centers = np.full((n, 2), np.nan) if centers is None or len(centers) == 0 else np.asarray(centers)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch_id", "x", "y", *[f"score_{m}" for m in assignment.module_names], "phenotype", "margin", "tie_flag"])
        for i in range(n):
            pid = int(assignment.patch_ids[i])
            cx, cy = centers[pid] if pid < len(centers) else (np.nan, np.nan)
            w.writerow([pid, repr(float(cx)), repr(float(cy)), *[repr(float(v)) for v in assignment.module_scores[i]], assignment.module_names[assignment.chosen[i]], repr(float(assignment.margin[i])), int(assignment.tie[i])])


# ------------------------------------------------------------------ separability


@dataclass
class SeparabilityRow:
    group: str
    n_cells: int
    wd_intensity: float
    wd_relevance: float


def _per_marker_scale(v: np.ndarray, q: float = 99.0) -> np.ndarray:
    ref = np.percentile(v, q, axis=0)
    return v / np.where(ref > 0, ref, 1.0)


def separability_report(groups: Sequence[str], patches: np.ndarray, scores, marker_a: int, marker_b: int, group_names: Sequence[str] | None = None, normalize: bool = True) -> list[SeparabilityRow]:
    """Wasserstein distance between two markers, per group, for intensity and relevance.

    ``groups`` gives each cell's group (e.g. its assigned phenotype). Intensity
    is the per-cell mean of the raw channel; relevance is the channel score.
    With ``normalize`` each marker's values are divided by their 99th
    percentile over all cells, separately per representation, so both
    representations live on a comparable [0, ~1] scale.
    """
    from .evaluation import wasserstein_1d

    groups = np.asarray(list(groups))
    x = np.asarray(patches, dtype=np.float64)
    s = np.asarray(scores.scores if isinstance(scores, ChannelRelevance) else scores, dtype=np.float64)
    inten = x[:, [marker_a, marker_b]].mean(axis=(2, 3))
    rel = s[:, [marker_a, marker_b]]
    if normalize:
        inten, rel = _per_marker_scale(inten), _per_marker_scale(rel)
    names = list(dict.fromkeys(groups.tolist())) if group_names is None else list(group_names)
    rows = []
    for g in names:
        idx = np.flatnonzero(groups == g)
        if len(idx) < 2:
            raise ConfigurationError(f"group {g!r} has {len(idx)} cells; need at least 2")
        rows.append(SeparabilityRow(str(g), len(idx), wasserstein_1d(inten[idx, 0], inten[idx, 1]), wasserstein_1d(rel[idx, 0], rel[idx, 1])))
    return rows
