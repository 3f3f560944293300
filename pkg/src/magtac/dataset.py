"""Press-sequence generation and the on-disk dataset format.

Dataset directory layout (all binary files little-endian):

``manifest.json``
    schema version, counts, seed, resolved config and its sha256, record layouts.
``images.bin``
    one record per sample: int32 H, int32 W, then float32 planes (3, H, W).
``mag.bin``
    float32 (N, window, 24) baseline-subtracted Hall windows in microtesla.
``labels.bin``
    float32 (N,) normal force in newtons.
``index.bin``
    int32 (N, 3) rows of (press id, frame index, location id).
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from magtac import elastomer, magnetics
from magtac.config import ConfigError, SimConfig

SCHEMA_VERSION = 1
TESLA_TO_UT = 1e6


class DatasetError(Exception):
    """Base class for dataset loading failures."""


class ManifestError(DatasetError):
    """Manifest missing, unparsable, or missing required fields."""


class LengthMismatchError(DatasetError):
    """A data file's size disagrees with the manifest."""


class VersionError(DatasetError):
    """Manifest schema version is not supported."""


@dataclass
class PressSequence:
    location_index: int
    location: tuple
    peak_force: float
    images: np.ndarray  # (T, H, W, 3) float32
    frames: np.ndarray  # (T, 24) tesla, baseline-subtracted
    labels: np.ndarray  # (T,) newtons
    fps: float = 30.0


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3)
    mag_window: np.ndarray  # (window, 24) microtesla
    label: float
    press_id: int
    frame: int
    location: int


def grid_locations(config: SimConfig):
    """Row-major (y, x) grid of indentation centres in mm, inset by the configured margin."""
    ds = config.dataset
    half = config.elastomer.extent_mm / 2.0 - ds.margin_mm
    if half < 0:
        raise ConfigError("grid margin leaves no room on the surface")
    axis = np.linspace(-half, half, ds.grid_size) if ds.grid_size > 1 else np.zeros(1)
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def force_ramp(peak_force, n_frames):
    """Triangular load/unload profile starting and ending at 0 N."""
    if n_frames < 2:
        return np.zeros(n_frames)
    k = np.arange(n_frames)
    return peak_force * (1.0 - np.abs(2.0 * k / (n_frames - 1) - 1.0))


def generate_press(location, peak_force, duration_s, config: SimConfig, rng=None, location_index=-1):
    """Simulate one vertical press: per frame deform, render, and read the Hall ring."""
    if not 0.0 < peak_force <= 1.0:
        raise elastomer.DomainError(f"peak force {peak_force} N outside (0, 1]")
    rng = np.random.default_rng() if rng is None else rng
    ds = config.dataset
    n = int(round(duration_s * ds.fps))
    labels = force_ramp(peak_force, n)
    sensors = magnetics.hall_ring(config.magnet)
    base = magnetics.baseline_frame(config.magnet)
    noise = magnetics.NoiseModel(config.magnet.noise_sigma)
    rc = config.render
    images = np.empty((n, rc.height, rc.width, 3), dtype=np.float32)
    frames = np.empty((n, magnetics.FRAME_LEN))
    for k, force in enumerate(labels):
        ind = elastomer.Indentation(tuple(location), float(force), ds.indenter_radius)
        markers = elastomer.deform(config.elastomer, ind)
        img = elastomer.render(rc, markers, ind, config.elastomer.marker_depth_mm)
        if ds.camera_noise > 0:
            img = np.clip(img + rng.normal(0.0, ds.camera_noise, img.shape), 0.0, 1.0)
        images[k] = img
        dipoles = magnetics.marker_dipoles(markers, config.magnet)
        frames[k] = magnetics.read_hall_array(dipoles, sensors, noise, rng) - base
    return PressSequence(location_index, tuple(location), float(peak_force), images, frames, labels, ds.fps)


def press_plan(config: SimConfig):
    """List of (press id, location id, location) in generation order."""
    locs = grid_locations(config)
    plan = []
    for li, loc in enumerate(locs):
        for _ in range(config.dataset.presses_per_location):
            plan.append((len(plan), li, loc))
    return plan


def expected_sample_count(config: SimConfig):
    ds = config.dataset
    per_press = max(ds.frames_per_press - ds.window, 0)
    return len(press_plan(config)) * per_press


def _press_rng(seed, press_id):
    return np.random.default_rng([seed, press_id])


def generate_dataset(config: SimConfig, out_dir, progress=None):
    """Generate every press of the grid and persist the samples; returns the loaded dataset.

    Samples are the frames with index >= window of each press, each paired
    with the ``window`` most recent magnetic frames ending at that frame.
    """
    ds = config.dataset
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = press_plan(config)
    n_frames = ds.frames_per_press
    if n_frames <= ds.window:
        raise ConfigError("press too short to fill a magnetic window")
    count = 0
    with open(out / "images.bin", "wb") as f_img, open(out / "mag.bin", "wb") as f_mag, open(
        out / "labels.bin", "wb"
    ) as f_lab, open(out / "index.bin", "wb") as f_idx:
        for press_id, loc_id, loc in plan:
            rng = _press_rng(ds.seed, press_id)
            peak = float(rng.uniform(ds.min_peak, ds.max_peak))
            seq = generate_press(loc, peak, ds.duration_s, config, rng, loc_id)
            mag_ut = seq.frames * TESLA_TO_UT
            for k in range(ds.window, n_frames):
                elastomer.write_image_raw(f_img, seq.images[k])
                f_mag.write(mag_ut[k - ds.window + 1 : k + 1].astype("<f4").tobytes())
                f_lab.write(np.asarray([seq.labels[k]], dtype="<f4").tobytes())
                f_idx.write(np.asarray([press_id, k, loc_id], dtype="<i4").tobytes())
                count += 1
            if progress:
                progress(press_id + 1, len(plan))
    h, w = config.render.height, config.render.width
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "n_samples": count,
        "n_presses": len(plan),
        "n_locations": len(grid_locations(config)),
        "seed": ds.seed,
        "config": config.to_dict(),
        "config_sha256": config.digest(),
        "image_height": h,
        "image_width": w,
        "window": ds.window,
        "frame_len": magnetics.FRAME_LEN,
        "files": {
            "images.bin": {"record": "int32 H, int32 W, float32[3][H][W]", "bytes": count * (8 + 12 * h * w)},
            "mag.bin": {"record": f"float32[{ds.window}][24] microtesla", "bytes": count * ds.window * 24 * 4},
            "labels.bin": {"record": "float32 newtons", "bytes": count * 4},
            "index.bin": {"record": "int32 press_id, frame, location_id", "bytes": count * 12},
        },
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return load_dataset(out)


DATA_FILES = ("images.bin", "mag.bin", "labels.bin", "index.bin")


class TactileDataset:
    """Read-only, memory-mapped view of a generated dataset.

    Files are mapped on first access, so a consumer that never touches
    ``mag`` never opens ``mag.bin``.
    """

    def __init__(self, root, manifest):
        self.root = Path(root)
        self.manifest = manifest
        self.n = manifest["n_samples"]
        self.image_size = manifest["image_height"]
        self._maps = {}

    def _layout(self, name):
        m = self.manifest
        h, w = m["image_height"], m["image_width"]
        if name == "images.bin":
            return np.dtype([("h", "<i4"), ("w", "<i4"), ("px", "<f4", (3, h, w))]), (self.n,)
        if name == "mag.bin":
            return np.dtype("<f4"), (self.n, m["window"], m["frame_len"])
        if name == "labels.bin":
            return np.dtype("<f4"), (self.n,)
        return np.dtype("<i4"), (self.n, 3)

    def check(self, name):
        """Raise LengthMismatchError unless ``name`` matches the manifest's size."""
        dtype, shape = self._layout(name)
        path = self.root / name
        if not path.exists():
            raise LengthMismatchError(f"{name} is missing")
        expected = int(np.prod(shape)) * dtype.itemsize
        declared = self.manifest["files"][name]["bytes"]
        actual = os.path.getsize(path)
        if actual != expected or declared != expected:
            raise LengthMismatchError(f"{name}: {actual} bytes on disk, manifest implies {expected}")
        return dtype, shape

    def _map(self, name):
        if name not in self._maps:
            dtype, shape = self.check(name)
            if self.n == 0:
                self._maps[name] = np.zeros(shape, dtype=dtype)
            else:
                self._maps[name] = np.memmap(self.root / name, dtype=dtype, mode="r", shape=shape)
        return self._maps[name]

    @property
    def images(self):
        """Channel-first pixel planes, (N, 3, H, W) float32."""
        return self._map("images.bin")["px"]

    @property
    def mag(self):
        """Baseline-subtracted windows in microtesla, (N, window, 24)."""
        return self._map("mag.bin")

    @property
    def labels(self):
        return self._map("labels.bin")

    @property
    def index(self):
        """(N, 3) int32 rows of press id, frame index, location id."""
        return self._map("index.bin")

    @property
    def locations(self):
        return np.asarray(self.index[:, 2])

    @property
    def config(self):
        return SimConfig.from_dict(self.manifest["config"])

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        if not -self.n <= i < self.n:
            raise IndexError(i)
        press, frame, loc = (int(v) for v in self.index[i])
        return Sample(
            image=np.asarray(self.images[i]).transpose(1, 2, 0),
            mag_window=np.asarray(self.mag[i]),
            label=float(self.labels[i]),
            press_id=press,
            frame=frame,
            location=loc,
        )


_REQUIRED = ("schema_version", "n_samples", "image_height", "image_width", "window", "frame_len", "files")


def load_dataset(path, require=DATA_FILES):
    """Open a dataset directory, validating the manifest and the sizes of the ``require`` files."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise ManifestError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestError(f"corrupt manifest: {exc}") from exc
    if not isinstance(manifest, dict):
        raise ManifestError("manifest must be a JSON object")
    if "schema_version" in manifest and manifest["schema_version"] != SCHEMA_VERSION:
        raise VersionError(f"unsupported schema version {manifest['schema_version']!r}, expected {SCHEMA_VERSION}")
    missing = [k for k in _REQUIRED if k not in manifest]
    if missing:
        raise ManifestError(f"manifest missing fields: {missing}")
    for name in ("images.bin", "mag.bin", "labels.bin", "index.bin"):
        if name not in manifest["files"] or "bytes" not in manifest["files"][name]:
            raise ManifestError(f"manifest has no layout for {name}")
    ds = TactileDataset(root, manifest)
    for name in require:
        ds.check(name)
    return ds


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (0.8, 0.1, 0.1)  # train, test, validation
    seed: int = 42
    mode: str = "by-sample"

    def __post_init__(self):
        if abs(sum(self.ratios) - 1.0) > 1e-12 or len(self.ratios) != 3:
            raise ValueError("split ratios must be three numbers summing to 1")
        if self.mode not in ("by-sample", "by-location"):
            raise ValueError(f"unknown split mode {self.mode!r}")


def _cut(n, ratios):
    a = int(np.floor(ratios[0] * n + 1e-9))
    b = int(np.floor(ratios[1] * n + 1e-9))
    return a, a + b


def split(data, spec: SplitSpec = SplitSpec()):
    """Partition sample indices into (train, test, validation) index arrays.

    ``data`` is a dataset or a sample count. ``by-sample`` sizes are
    floor(0.8 N) / floor(0.1 N) / remainder; ``by-location`` applies the same
    rule to whole locations.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "by-sample":
        n = data if isinstance(data, (int, np.integer)) else len(data)
        if n <= 0:
            raise ValueError("cannot split an empty dataset")
        perm = rng.permutation(n)
        i, j = _cut(n, spec.ratios)
        return perm[:i], perm[i:j], perm[j:]
    if isinstance(data, (int, np.integer)):
        raise ValueError("by-location split needs location ids")
    locs = np.asarray(data.locations if hasattr(data, "locations") else data)
    uniq = np.unique(locs)
    perm = rng.permutation(uniq)
    i, j = _cut(len(uniq), spec.ratios)
    parts = (perm[:i], perm[i:j], perm[j:])
    return tuple(np.flatnonzero(np.isin(locs, p)) for p in parts)


def export_labels_csv(dataset: TactileDataset, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "press_id", "frame", "location", "force_n"])
        for i in range(len(dataset)):
            press, frame, loc = (int(v) for v in dataset.index[i])
            writer.writerow([i, press, frame, loc, f"{float(dataset.labels[i]):.9g}"])
