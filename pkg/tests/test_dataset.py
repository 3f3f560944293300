import hashlib
import json
import shutil
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magtac import magnetics
from magtac.config import preset
from magtac.dataset import (
    LengthMismatchError,
    ManifestError,
    SplitSpec,
    VersionError,
    expected_sample_count,
    export_labels_csv,
    force_ramp,
    generate_dataset,
    generate_press,
    grid_locations,
    load_dataset,
    split,
)
from magtac.elastomer import DomainError


def _digest(root):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.iterdir())}


def test_press_has_sixty_frames(tiny_config):
    seq = generate_press((0.0, 0.0), 0.8, 2.0, tiny_config, np.random.default_rng(0))
    assert seq.images.shape == (60, 32, 32, 3)
    assert seq.frames.shape == (60, 24)
    assert seq.labels[0] == 0.0 and seq.labels[-1] == 0.0
    step = 0.8 / 29.5
    assert abs(seq.labels.max() - 0.8) <= step
    assert abs(seq.labels[30] - 0.8) <= step


def test_ramp_values():
    r = force_ramp(1.0, 5)
    np.testing.assert_allclose(r, [0, 0.5, 1, 0.5, 0])
    assert np.all(np.diff(force_ramp(0.7, 60)[:30]) > 0)


def test_press_errors(tiny_config):
    with pytest.raises(DomainError):
        generate_press((0.0, 0.0), 1.2, 2.0, tiny_config)
    with pytest.raises(DomainError):
        generate_press((0.0, 0.0), 0.0, 2.0, tiny_config)
    with pytest.raises(DomainError):
        generate_press((20.0, 0.0), 0.5, 2.0, tiny_config)


def test_sample_counts():
    assert expected_sample_count(preset("desk")) == 4000
    assert expected_sample_count(preset("paper")) == 16000
    assert len(grid_locations(preset("paper"))) == 400


def test_grid_inside_margin():
    locs = grid_locations(preset("desk"))
    assert np.abs(locs).max() == pytest.approx(12.5 - 3.0)


def test_tiny_dataset_shape(tiny_dataset):
    assert len(tiny_dataset) == 9 * 40
    assert tiny_dataset.mag.shape == (360, 20, 24)
    assert tiny_dataset.images.shape == (360, 3, 32, 32)
    labels = np.asarray(tiny_dataset.labels)
    assert labels.min() >= 0.0 and labels.max() <= 1.0
    frames = tiny_dataset.index[:, 1]
    assert frames.min() == 20 and frames.max() == 59


def test_window_alignment(tiny_dataset, tiny_config):
    # regenerate press 4 and compare stored rows with the raw frames
    from magtac.dataset import _press_rng, press_plan

    pid, loc_id, loc = press_plan(tiny_config)[4]
    rng = _press_rng(tiny_config.dataset.seed, pid)
    peak = float(rng.uniform(tiny_config.dataset.min_peak, tiny_config.dataset.max_peak))
    seq = generate_press(loc, peak, 2.0, tiny_config, rng, loc_id)
    rows = np.flatnonzero(tiny_dataset.index[:, 0] == pid)
    for i in rows:
        s = tiny_dataset[int(i)]
        want = (seq.frames[s.frame - 19 : s.frame + 1] * 1e6).astype(np.float32)
        np.testing.assert_array_equal(s.mag_window, want)
        np.testing.assert_array_equal(s.mag_window[19], np.float32(seq.frames[s.frame] * 1e6))
        np.testing.assert_array_equal(s.image, seq.images[s.frame])
        assert s.label == np.float32(seq.labels[s.frame])


def test_monotone_cue_noise_free(tiny_config):
    cfg = replace(tiny_config, magnet=replace(tiny_config.magnet, noise_sigma=0.0))
    for loc in grid_locations(cfg)[[0, 4, 7]]:
        seq = generate_press(loc, 0.9, 2.0, cfg, np.random.default_rng(0))
        k = np.arange(20, 60)
        cue = np.abs(seq.frames[k]).mean(axis=1)
        order = np.argsort(seq.labels[k], kind="stable")
        assert np.all(np.diff(cue[order]) >= -1e-18)


def test_regeneration_byte_identical(tiny_config, tiny_dataset, tmp_path):
    generate_dataset(tiny_config, tmp_path / "again")
    assert _digest(tmp_path / "again") == _digest(tiny_dataset.root)


def test_manifest_contents(tiny_dataset, tiny_config):
    m = json.loads((tiny_dataset.root / "manifest.json").read_text())
    assert m["n_samples"] == 360 and m["seed"] == 42
    assert m["config_sha256"] == tiny_config.digest()
    assert tiny_dataset.config == tiny_config


def test_save_load_bit_exact(tiny_dataset):
    again = load_dataset(tiny_dataset.root)
    for i in (0, 17, 359):
        a, b = tiny_dataset[i], again[i]
        assert a.image.tobytes() == b.image.tobytes()
        assert a.mag_window.tobytes() == b.mag_window.tobytes()
        assert (a.label, a.press_id, a.frame, a.location) == (b.label, b.press_id, b.frame, b.location)
    with pytest.raises(IndexError):
        again[360]


@pytest.fixture
def copy_of(tiny_dataset, tmp_path):
    dst = tmp_path / "copy"
    shutil.copytree(tiny_dataset.root, dst)
    return dst


def test_truncated_file(copy_of):
    p = copy_of / "mag.bin"
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(LengthMismatchError):
        load_dataset(copy_of)


def test_lazy_open_skips_unrequested(copy_of):
    (copy_of / "mag.bin").unlink()
    ds = load_dataset(copy_of, require=("images.bin", "labels.bin"))
    assert ds.images.shape[0] == 360
    with pytest.raises(LengthMismatchError):
        ds.mag


def test_unknown_version(copy_of):
    m = json.loads((copy_of / "manifest.json").read_text())
    m["schema_version"] = 99
    (copy_of / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(VersionError):
        load_dataset(copy_of)


@pytest.mark.parametrize("text", ["{not json", "[1, 2]", '{"schema_version": 1}'])
def test_corrupt_manifest(copy_of, text):
    (copy_of / "manifest.json").write_text(text)
    with pytest.raises(ManifestError):
        load_dataset(copy_of)


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestError):
        load_dataset(tmp_path)


def test_labels_csv(tiny_dataset, tmp_path):
    export_labels_csv(tiny_dataset, tmp_path / "labels.csv")
    lines = (tmp_path / "labels.csv").read_text().splitlines()
    assert len(lines) == 361


# -- splits --------------------------------------------------------------------


def test_split_thousand():
    tr, te, va = split(1000)
    assert (len(tr), len(te), len(va)) == (800, 100, 100)


@settings(max_examples=60, deadline=None)
@given(st.integers(10, 100_000), st.integers(0, 2**31))
def test_split_partition(n, seed):
    parts = split(n, SplitSpec(seed=seed))
    assert [len(p) for p in parts] == [n * 8 // 10, n // 10, n - n * 8 // 10 - n // 10]
    allidx = np.concatenate(parts)
    assert len(allidx) == n and np.array_equal(np.sort(allidx), np.arange(n))
    again = split(n, SplitSpec(seed=seed))
    assert all(np.array_equal(a, b) for a, b in zip(parts, again))


def test_split_by_location(tiny_dataset):
    parts = split(tiny_dataset, SplitSpec(mode="by-location"))
    locs = [set(tiny_dataset.locations[p].tolist()) for p in parts]
    assert not (locs[0] & locs[1] or locs[0] & locs[2] or locs[1] & locs[2])
    assert sum(len(p) for p in parts) == len(tiny_dataset)
    assert len(locs[0]) == 7


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(ratios=(0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        SplitSpec(mode="by-press")
    with pytest.raises(ValueError):
        split(0)
