"""Synthetic multiplex patches, preprocessing, splits and persistence.

The generator stands in for a real multiplex slide: every cell gets a
phenotype, its module markers are rendered as soft disks at the patch center,
all other markers carry uniform background, and an optional bleed-through
field adds diffuse low-frequency signal to one channel in every cell.

Binary dataset format ``MPXD`` (little-endian)::

    b"MPXD" | u32 version=1 | u32 N | u32 C | u32 H | u32 W
    f32 patches[N*C*H*W] | i32 labels[N] | u8 split[N]

Panel, phenotype names, marker modules, cell centers and the generator config
go into a JSON sidecar next to the binary file (``<path>.json``).
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, FormatError

MAGIC = b"MPXD"
RELEVANCE_MAGIC = b"RLVM"
VERSION = 1
SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
UNASSIGNED = 255


@dataclass(frozen=True)
class MarkerModule:
    """A phenotype's characteristic markers, as indices into the panel."""

    name: str
    members: tuple[int, ...]

    def __post_init__(self):
        if not self.members:
            raise ConfigurationError(f"module {self.name!r} has no markers")
        if any(m < 0 for m in self.members):
            raise ConfigurationError(f"module {self.name!r} has a negative marker index")
        object.__setattr__(self, "members", tuple(int(m) for m in self.members))

    def validate(self, n_markers: int) -> None:
        if max(self.members) >= n_markers:
            raise ConfigurationError(f"module {self.name!r} references marker {max(self.members)} >= C={n_markers}")


@dataclass(frozen=True)
class PhenotypeSpec:
    name: str
    markers: tuple[int, ...]
    frequency: float
    intensity: float = 1.0
    radius: float = 4.0


@dataclass(frozen=True)
class BleedSpec:
    """Diffuse, spatially smooth signal added to one channel in every cell."""

    channel: int
    amplitude: float = 0.5
    length_scale: float = 8.0


@dataclass
class SynthConfig:
    panel: list[str]
    phenotypes: list[PhenotypeSpec]
    noise: float = 0.03
    bleed: BleedSpec | None = None
    patch_size: int = 24
    n_cells: int = 6000
    neighbors: float = 0.0
    percentile: float = 99.9
    slide_extent: float = 4000.0
    rare_mode: bool = False
    seed: int = 0

    def validate(self) -> None:
        c = len(self.panel)
        if len(set(self.panel)) != c:
            raise ConfigurationError("marker names must be unique")
        total = sum(p.frequency for p in self.phenotypes)
        if abs(total - 1.0) > 1e-9:
            raise ConfigurationError(f"phenotype frequencies sum to {total}, not 1")
        for p in self.phenotypes:
            if not p.markers or max(p.markers) >= c or min(p.markers) < 0:
                raise ConfigurationError(f"phenotype {p.name!r} has invalid markers {p.markers}")
            if p.frequency < 0 or p.intensity <= 0 or p.radius <= 0:
                raise ConfigurationError(f"phenotype {p.name!r} has invalid frequency/intensity/radius")
        if self.rare_mode and not any(p.frequency <= 0.02 for p in self.phenotypes):
            raise ConfigurationError("rare_mode needs at least one phenotype with frequency <= 2%")
        if self.bleed is not None and not 0 <= self.bleed.channel < c:
            raise ConfigurationError(f"bleed channel {self.bleed.channel} out of range")
        if self.noise < 0 or self.patch_size < 3 or self.n_cells < 1 or self.neighbors < 0:
            raise ConfigurationError("noise, patch_size, n_cells or neighbors out of range")

    @property
    def modules(self) -> list[MarkerModule]:
        return [MarkerModule(p.name, tuple(p.markers)) for p in self.phenotypes]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        d["phenotypes"] = [PhenotypeSpec(**{**p, "markers": tuple(p["markers"])}) for p in d["phenotypes"]]
        if d.get("bleed"):
            d["bleed"] = BleedSpec(**d["bleed"])
        return cls(**d)


@dataclass
class DatasetBundle:
    patches: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int32
    panel: list[str]
    phenotypes: list[str]
    modules: list[MarkerModule]
    splits: np.ndarray  # (N,) uint8, see SPLIT_CODES
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))  # (N, 2) slide x, y
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.phenotypes)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == SPLIT_CODES[split])

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return self.patches[idx], self.labels[idx]


# ------------------------------------------------------------------ presets

_PANEL_8 = ["CD3", "CD4", "CD20", "CD30", "CD15", "CD68", "CD31", "Tryptase"]
_PANEL_18 = _PANEL_8 + ["CD8", "CD11b", "CD11c", "CD56", "CD163", "PD1", "Ki67", "HLA-DR", "Podoplanin", "Pan-CK"]
_PANEL_49 = _PANEL_18 + [f"M{i:02d}" for i in range(len(_PANEL_18), 49)]


def default_config(markers: int = 8, **overrides) -> SynthConfig:
    """Desk-scale preset: six phenotypes, two of them rare (2% each).

    The extra markers of the 18- and 49-marker panels carry background only,
    which mimics a wide panel where most channels are uninformative for a
    given cell.
    """
    panel = {8: _PANEL_8, 18: _PANEL_18, 49: _PANEL_49}.get(markers)
    if panel is None:
        raise ConfigurationError(f"no preset panel with {markers} markers (choose 8, 18 or 49)")
    ix = {name: i for i, name in enumerate(panel)}
    phenotypes = [
        PhenotypeSpec("T cell", (ix["CD3"], ix["CD4"]), 0.42, 1.0, 4.0),
        PhenotypeSpec("B cell", (ix["CD20"],), 0.30, 1.0, 4.5),
        PhenotypeSpec("Tumor", (ix["CD30"], ix["CD15"]), 0.14, 1.0, 7.0),
        PhenotypeSpec("Myeloid", (ix["CD68"],), 0.10, 0.9, 5.5),
        PhenotypeSpec("Endothelial", (ix["CD31"],), 0.02, 0.6, 3.5),
        PhenotypeSpec("Mast", (ix["Tryptase"],), 0.02, 0.6, 5.0),
    ]
    cfg = SynthConfig(panel=list(panel), phenotypes=phenotypes, rare_mode=True)
    for k, v in overrides.items():
        if not hasattr(cfg, k):
            raise ConfigurationError(f"unknown SynthConfig field {k!r}")
        setattr(cfg, k, v)
    return cfg


# ------------------------------------------------------------------ generator


def _disk(size: int, radius: float, cy: float, cx: float, edge: float = 1.0) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    d = np.hypot(yy - cy, xx - cx)
    return np.exp(-0.5 * (np.maximum(d - radius, 0.0) / edge) ** 2)


def _smooth_field(size: int, length_scale: float, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency random field in [0, 1]: a few wide Gaussian bumps."""
    yy, xx = np.mgrid[0:size, 0:size]
    f = np.zeros((size, size))
    for _ in range(4):
        cy, cx = rng.uniform(-0.25 * size, 1.25 * size, size=2)
        f += rng.uniform(0.5, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * length_scale**2))
    f = 0.5 + 0.5 * f / max(f.max(), 1e-12)
    return f


def _render_cell(img: np.ndarray, spec: PhenotypeSpec, cy: float, cx: float, rng: np.random.Generator) -> None:
    radius = spec.radius * rng.uniform(0.8, 1.2)
    disk = _disk(img.shape[-1], radius, cy, cx)
    for m in spec.markers:
        level = max(rng.normal(spec.intensity, 0.1 * spec.intensity), 0.0)
        img[m] = np.maximum(img[m], level * disk)


def generate_synthetic(cfg: SynthConfig) -> DatasetBundle:
    """Render ``cfg.n_cells`` labelled, cell-centered patches (normalized, unsplit)."""
    cfg.validate()
    c, s = len(cfg.panel), cfg.patch_size
    freqs = np.array([p.frequency for p in cfg.phenotypes])
    root = np.random.SeedSequence(cfg.seed)
    label_rng = np.random.default_rng(root.spawn(1)[0])
    labels = label_rng.choice(len(freqs), size=cfg.n_cells, p=freqs).astype(np.int32)
    centers = label_rng.uniform(0, cfg.slide_extent, size=(cfg.n_cells, 2))
    patches = np.zeros((cfg.n_cells, c, s, s), dtype=np.float64)
    mid = (s - 1) / 2.0
    for i, child in enumerate(root.spawn(cfg.n_cells)):
        rng = np.random.default_rng(child)
        spec = cfg.phenotypes[labels[i]]
        img = patches[i]
        n_nb = rng.poisson(cfg.neighbors) if cfg.neighbors else 0
        for _ in range(n_nb):
            nb = cfg.phenotypes[rng.choice(len(freqs), p=freqs)]
            ang = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(0.45 * s, 0.6 * s)
            _render_cell(img, nb, mid + dist * np.sin(ang), mid + dist * np.cos(ang), rng)
        _render_cell(img, spec, mid, mid, rng)
        module = set(spec.markers)
        for m in range(c):
            if m not in module:
                img[m] += rng.uniform(0.0, cfg.noise, size=(s, s)) if cfg.noise else 0.0
        if cfg.bleed is not None:
            img[cfg.bleed.channel] += cfg.bleed.amplitude * _smooth_field(s, cfg.bleed.length_scale, rng)
    patches = normalize_channels(patches, cfg.percentile).astype(np.float32)
    return DatasetBundle(
        patches=patches,
        labels=labels,
        panel=list(cfg.panel),
        phenotypes=[p.name for p in cfg.phenotypes],
        modules=cfg.modules,
        splits=np.full(cfg.n_cells, UNASSIGNED, dtype=np.uint8),
        centers=centers,
        meta={"synth": cfg.to_dict()},
    )


# ------------------------------------------------------------------ preprocessing


def normalize_percentile(channel_image: np.ndarray, p: float = 99.9) -> np.ndarray:
    """Divide by the ``p``-th percentile (linear interpolation); zero percentile gives zeros."""
    x = np.asarray(channel_image, dtype=np.float64)
    if np.any(x < 0):
        raise ConfigurationError("normalize_percentile expects non-negative intensities")
    q = np.percentile(x, p) if x.size else 0.0
    if q <= 0:
        return np.zeros_like(x)
    return x / q


def normalize_channels(patches: np.ndarray, p: float = 99.9) -> np.ndarray:
    """Per-marker percentile normalization computed over the whole dataset."""
    out = np.empty_like(patches, dtype=np.float64)
    for ch in range(patches.shape[1]):
        out[:, ch] = normalize_percentile(patches[:, ch], p)
    return out


def split_dataset(bundle: DatasetBundle, fractions: Sequence[float] = (0.7, 0.2, 0.1), seed: int = 0) -> DatasetBundle:
    """Stratified train/val/test assignment; returns a bundle sharing the patch array."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigurationError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    splits = np.full(len(bundle), UNASSIGNED, dtype=np.uint8)
    for cls in np.unique(bundle.labels):
        idx = np.flatnonzero(bundle.labels == cls)
        if len(idx) < 3:
            raise ConfigurationError(f"class {cls} has {len(idx)} samples; stratified split needs >= 3")
        idx = rng.permutation(idx)
        n = len(idx)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        n_train = min(max(n_train, 1), n - 2)
        n_val = min(max(n_val, 1), n - n_train - 1)
        splits[idx[:n_train]] = SPLIT_CODES["train"]
        splits[idx[n_train : n_train + n_val]] = SPLIT_CODES["val"]
        splits[idx[n_train + n_val :]] = SPLIT_CODES["test"]
    return DatasetBundle(
        bundle.patches, bundle.labels, bundle.panel, bundle.phenotypes, bundle.modules, splits, bundle.centers, dict(bundle.meta)
    )


def make_dataset(cfg: SynthConfig | None = None, split_seed: int | None = None) -> DatasetBundle:
    """Generate and split in one call (default desk-scale preset)."""
    cfg = cfg or default_config()
    bundle = generate_synthetic(cfg)
    return split_dataset(bundle, seed=cfg.seed if split_seed is None else split_seed)


# ------------------------------------------------------------------ persistence


def _write_array_file(path: Path, magic: bytes, patches: np.ndarray, labels: np.ndarray, splits: np.ndarray) -> None:
    n, c, h, w = patches.shape
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<5I", VERSION, n, c, h, w))
        fh.write(np.ascontiguousarray(patches, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(labels, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(splits, dtype=np.uint8).tobytes())


def _read_array_file(path: Path, magic: bytes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 24:
        raise FormatError(f"{path}: truncated header")
    if buf[:4] != magic:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")
    version, n, c, h, w = struct.unpack("<5I", buf[4:24])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    npix = n * c * h * w
    expected = 24 + 4 * npix + 4 * n + n
    if len(buf) != expected:
        raise FormatError(f"{path}: size {len(buf)} != expected {expected} (truncated or corrupt)")
    off = 24
    patches = np.frombuffer(buf, dtype="<f4", count=npix, offset=off).astype(np.float32).reshape(n, c, h, w)
    off += 4 * npix
    labels = np.frombuffer(buf, dtype="<i4", count=n, offset=off).astype(np.int32)
    off += 4 * n
    splits = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).copy()
    return patches, labels, splits


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_bundle(bundle: DatasetBundle, path) -> None:
    path = Path(path)
    _write_array_file(path, MAGIC, bundle.patches, bundle.labels, bundle.splits)
    side = {
        "panel": bundle.panel,
        "phenotypes": bundle.phenotypes,
        "modules": [{"name": m.name, "markers": [bundle.panel[i] for i in m.members]} for m in bundle.modules],
        "centers": np.asarray(bundle.centers, dtype=np.float64).tolist(),
        "meta": bundle.meta,
    }
    sidecar_path(path).write_text(json.dumps(side))


def load_bundle(path) -> DatasetBundle:
    path = Path(path)
    patches, labels, splits = _read_array_file(path, MAGIC)
    side_file = sidecar_path(path)
    if not side_file.exists():
        raise FormatError(f"missing sidecar {side_file}")
    side = json.loads(side_file.read_text())
    panel = list(side["panel"])
    if len(panel) != patches.shape[1]:
        raise FormatError(f"sidecar panel has {len(panel)} markers, file has {patches.shape[1]} channels")
    modules = resolve_modules(side["modules"], panel)
    centers = np.asarray(side.get("centers") or np.zeros((0, 2)), dtype=np.float64).reshape(-1, 2)
    return DatasetBundle(patches, labels, panel, list(side["phenotypes"]), modules, splits, centers, side.get("meta", {}))


def resolve_modules(entries: Sequence[dict], panel: Sequence[str]) -> list[MarkerModule]:
    """Turn ``[{"name": ..., "markers": [marker names]}]`` into index-based modules."""
    ix = {name: i for i, name in enumerate(panel)}
    modules = []
    for e in entries:
        try:
            members = tuple(ix[m] for m in e["markers"])
        except KeyError as exc:
            raise ConfigurationError(f"module {e.get('name')!r} names unknown marker {exc.args[0]!r}") from exc
        modules.append(MarkerModule(e["name"], members))
    return modules


def load_modules(path, panel: Sequence[str]) -> list[MarkerModule]:
    return resolve_modules(json.loads(Path(path).read_text()), panel)


def save_relevance_maps(maps: np.ndarray, labels: np.ndarray, path, splits: np.ndarray | None = None) -> None:
    """Dump (N, C, H, W) relevance maps in the dataset layout with ``RLVM`` magic."""
    splits = np.full(len(labels), UNASSIGNED, dtype=np.uint8) if splits is None else splits
    _write_array_file(Path(path), RELEVANCE_MAGIC, maps, labels, splits)


def load_relevance_maps(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return _read_array_file(Path(path), RELEVANCE_MAGIC)


def export_embeddings(model, bundle: DatasetBundle, path, batch_size: int = 512) -> np.ndarray:
    """Write ``patch_id,label,e0..e{D-1}`` for every patch; returns the embedding matrix."""
    from .model import embed

    emb = embed(model, bundle.patches.astype(np.float64), batch_size)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch_id", "label"] + [f"e{j}" for j in range(emb.shape[1])])
        for i, row in enumerate(emb):
            writer.writerow([i, int(bundle.labels[i])] + [repr(float(v)) for v in row])
    return emb
