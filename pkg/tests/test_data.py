import csv

import numpy as np
import pytest

from cimlite.data import (
    BleedSpec,
    PhenotypeSpec,
    SynthConfig,
    default_config,
    export_embeddings,
    generate_synthetic,
    load_bundle,
    load_modules,
    load_relevance_maps,
    make_dataset,
    normalize_percentile,
    save_bundle,
    save_relevance_maps,
    split_dataset,
)
from cimlite.errors import ConfigurationError, FormatError
from cimlite.model import CimConfig, build_cim


def _one_marker(noise=0.0, n=20):
    return SynthConfig(panel=["A", "B", "C"], phenotypes=[PhenotypeSpec("only", (1,), 1.0)], noise=noise, n_cells=n, patch_size=12)


def test_noise_free_single_marker_signal_stays_on_its_channel():
    b = generate_synthetic(_one_marker())
    assert b.patches[:, 1].max() > 0
    assert np.all(b.patches[:, [0, 2]] == 0)


def test_generation_is_byte_identical_for_a_seed():
    cfg = default_config(n_cells=400)
    a, b = make_dataset(cfg), make_dataset(cfg)
    assert a.patches.tobytes() == b.patches.tobytes()
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.splits, b.splits)
    c = make_dataset(default_config(n_cells=400, seed=1))
    assert a.patches.tobytes() != c.patches.tobytes()


def test_default_preset_module_channels_dominate():
    b = make_dataset(default_config(n_cells=1500))
    for k, module in enumerate(b.modules):
        means = b.patches[b.labels == k].mean(axis=(0, 2, 3))
        members = list(module.members)
        others = [c for c in range(means.size) if c not in members]
        assert means[members].mean() >= 5 * means[others].mean(), module.name


def test_default_preset_shape_and_rare_classes():
    cfg = default_config()
    assert len(cfg.panel) == 8 and len(cfg.phenotypes) == 6 and cfg.n_cells == 6000
    assert sum(p.frequency <= 0.02 for p in cfg.phenotypes) == 2
    assert len(default_config(18).panel) == 18 and len(default_config(49).panel) == 49
    with pytest.raises(ConfigurationError):
        default_config(12)


def test_ground_truth_recoverable_from_module_intensity():
    b = make_dataset(default_config(n_cells=1000, noise=0.0))
    means = b.patches.mean(axis=(2, 3))
    scores = np.stack([means[:, list(m.members)].mean(axis=1) for m in b.modules], axis=1)
    assert np.mean(np.argmax(scores, axis=1) == b.labels) >= 0.95


def test_config_validation():
    bad = SynthConfig(panel=["A", "B"], phenotypes=[PhenotypeSpec("x", (0,), 0.5), PhenotypeSpec("y", (1,), 0.4)])
    with pytest.raises(ConfigurationError):
        generate_synthetic(bad)
    no_rare = SynthConfig(panel=["A", "B"], phenotypes=[PhenotypeSpec("x", (0,), 0.5), PhenotypeSpec("y", (1,), 0.5)], rare_mode=True)
    with pytest.raises(ConfigurationError):
        generate_synthetic(no_rare)
    with pytest.raises(ConfigurationError):
        SynthConfig(panel=["A", "A"], phenotypes=[PhenotypeSpec("x", (0,), 1.0)]).validate()


def test_bleed_reaches_every_cell():
    cfg = default_config(n_cells=300, noise=0.0, bleed=BleedSpec(channel=1, amplitude=0.5))
    b = make_dataset(cfg)
    clean = make_dataset(default_config(n_cells=300, noise=0.0))
    b_cells = b.labels == 1  # B cells never express CD4
    assert np.all(b.patches[b_cells, 1].min(axis=(1, 2)) > 0)
    assert np.all(clean.patches[b_cells, 1] == 0)


def test_normalize_percentile_cases():
    np.testing.assert_array_equal(normalize_percentile(np.full((4, 4), 3.0)), np.ones((4, 4)))
    np.testing.assert_array_equal(normalize_percentile(np.zeros(10)), np.zeros(10))
    x = np.random.default_rng(0).uniform(size=1000)
    assert abs(np.percentile(normalize_percentile(x), 99.9) - 1.0) < 1e-9
    with pytest.raises(ConfigurationError):
        normalize_percentile(np.array([1.0, -1.0]))


def _labelled(counts):
    labels = np.concatenate([np.full(n, k) for k, n in enumerate(counts)]).astype(np.int32)
    b = generate_synthetic(_one_marker(n=len(labels)))
    b.labels = labels
    return b


def test_stratified_split_arithmetic():
    b = split_dataset(_labelled([50, 50]), seed=0)
    for k in (0, 1):
        s = b.splits[b.labels == k]
        assert [int(np.sum(s == c)) for c in (0, 1, 2)] == [35, 10, 5]
    rare = split_dataset(_labelled([90, 10]), seed=3)
    assert [int(np.sum(rare.splits[rare.labels == 1] == c)) for c in (0, 1, 2)] == [7, 2, 1]


def test_split_deterministic_and_guarded():
    base = _labelled([40, 30])
    assert np.array_equal(split_dataset(base, seed=5).splits, split_dataset(base, seed=5).splits)
    assert not np.array_equal(split_dataset(base, seed=5).splits, split_dataset(base, seed=6).splits)
    with pytest.raises(ConfigurationError):
        split_dataset(_labelled([40, 2]))


def test_split_proportions_within_one_sample():
    b = make_dataset(default_config(n_cells=2000))
    for k in range(b.n_classes):
        n = int(np.sum(b.labels == k))
        for code, frac in enumerate((0.7, 0.2, 0.1)):
            assert abs(int(np.sum(b.splits[b.labels == k] == code)) - frac * n) <= 1


def test_bundle_roundtrip_is_bit_exact(tmp_path):
    b = make_dataset(default_config(n_cells=400))
    save_bundle(b, tmp_path / "d.mpxd")
    back = load_bundle(tmp_path / "d.mpxd")
    assert back.patches.tobytes() == b.patches.tobytes()
    assert np.array_equal(back.labels, b.labels) and np.array_equal(back.splits, b.splits)
    assert back.panel == b.panel and back.modules == b.modules and back.phenotypes == b.phenotypes
    assert np.array_equal(back.centers, b.centers)


def test_corrupt_files_raise(tmp_path):
    b = make_dataset(default_config(n_cells=400))
    path = tmp_path / "d.mpxd"
    save_bundle(b, path)
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_bundle(path)
    path.write_bytes(raw[:-7])
    with pytest.raises(FormatError):
        load_bundle(path)
    path.write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError):
        load_bundle(path)


def test_modules_file_resolution(tmp_path):
    f = tmp_path / "m.json"
    f.write_text('[{"name": "T", "markers": ["CD3", "CD4"]}]')
    mods = load_modules(f, default_config().panel)
    assert mods[0].members == (0, 1)
    f.write_text('[{"name": "T", "markers": ["CD999"]}]')
    with pytest.raises(ConfigurationError):
        load_modules(f, default_config().panel)


def test_relevance_map_roundtrip(tmp_path):
    maps = np.random.default_rng(0).normal(size=(3, 2, 4, 4)).astype(np.float32)
    save_relevance_maps(maps, np.arange(3), tmp_path / "r.rlvm")
    back, labels, _ = load_relevance_maps(tmp_path / "r.rlvm")
    assert back.tobytes() == maps.tobytes() and list(labels) == [0, 1, 2]
    assert (tmp_path / "r.rlvm").read_bytes()[:4] == b"RLVM"


def test_export_embeddings_csv(tmp_path):
    b = make_dataset(default_config(n_cells=400))
    m = build_cim(CimConfig.cim_s(8))
    emb = export_embeddings(m, b, tmp_path / "e.csv")
    with open(tmp_path / "e.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["patch_id", "label"] + [f"e{j}" for j in range(32)]
    assert len(rows) - 1 == len(b) and emb.shape == (len(b), 32)
