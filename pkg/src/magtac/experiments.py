"""Desk-scale versions of the three studies: accuracy comparison, response time, proximity."""
from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from magtac import elastomer, fusion, magnetics
from magtac.dataset import SplitSpec, split

# Published hardware numbers, kept as reference rows only.
PAPER_TABLE2 = {
    # (mode, lr): (MSE, RMSE, R2)
    ("mag-only", 1e-3): (0.0129, 0.1138, 0.8461),
    ("mag-only", 1e-4): (0.0196, 0.1399, 0.7705),
    ("mag-only", 1e-5): (0.0248, 0.1575, 0.7187),
    ("image-only", 1e-3): (0.0032, 0.0563, 0.9644),
    ("image-only", 1e-4): (0.0031, 0.0553, 0.9657),
    ("image-only", 1e-5): (0.0038, 0.0618, 0.9571),
    ("fusion", 1e-3): (0.0027, 0.0518, 0.9684),
    ("fusion", 1e-4): (0.0025, 0.0497, 0.9709),
    ("fusion", 1e-5): (0.0025, 0.0500, 0.9706),
}
PAPER_IMPROVEMENT_PCT = 10.1
PAPER_TABLE3 = {
    # mode: (reception, preprocessing, inference) in ms; fusion reception not published
    "mag-only": (18.842, 0.690, 3.092),
    "image-only": (21.411, 2.956, 3.002),
    "fusion": (None, 3.670, 4.028),
}
LEARNING_RATES = (1e-3, 1e-4, 1e-5)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return Path(path)


def write_index(out_dir, artifacts):
    """``index.csv`` listing every artifact of a run (path relative to ``out_dir``, kind)."""
    out_dir = Path(out_dir)
    rows = [(str(Path(p).relative_to(out_dir)), kind) for p, kind in artifacts]
    return _write_csv(out_dir / "index.csv", ["artifact", "kind"], rows)


# ---------------------------------------------------------------------------
# accuracy comparison
# ---------------------------------------------------------------------------


@dataclass
class ComparisonReport:
    cells: dict = field(default_factory=dict)  # (mode, lr) -> [Metrics per seed]
    seeds: tuple = ()
    lrs: tuple = ()
    histories: dict = field(default_factory=dict)  # (mode, lr, seed) -> history rows

    def median(self, mode, lr, attr="rmse"):
        vals = [getattr(m, attr) for m in self.cells[(mode, lr)]]
        vals = [v for v in vals if v is not None]
        return statistics.median(vals) if vals else None

    def improvement_pct(self, lr):
        """Relative RMSE reduction of fusion over image-only, percent."""
        img = self.median("image-only", lr)
        fus = self.median("fusion", lr)
        return 100.0 * (img - fus) / img

    def ordering_holds(self, lr):
        """Median RMSE: fusion < image-only < mag-only (strict)."""
        modes = {m for m, l in self.cells if l == lr}
        if not set(fusion.MODES) <= modes:
            return None
        f, i, m = (self.median(k, lr) for k in ("fusion", "image-only", "mag-only"))
        return f < i < m

    def verdict(self, lr, min_improvement_pct=0.0):
        ok = self.ordering_holds(lr)
        if ok is None:
            return f"lr={lr:g}: ordering not checked (not all modes trained)"
        imp = self.improvement_pct(lr)
        passed = ok and imp >= min_improvement_pct
        return (
            f"lr={lr:g}: {'PASS' if passed else 'FAIL'} "
            f"RMSE fusion {self.median('fusion', lr):.4f} / image-only {self.median('image-only', lr):.4f} "
            f"/ mag-only {self.median('mag-only', lr):.4f}; fusion improves on image-only by {imp:.1f}%"
        )

    def table_rows(self):
        """Table II layout: one row per (mode, lr) with median MSE, RMSE, R2."""
        rows = []
        for mode in fusion.MODES:
            for lr in self.lrs:
                if (mode, lr) not in self.cells:
                    continue
                r2 = self.median(mode, lr, "r2")
                rows.append(
                    [
                        mode,
                        f"{lr:g}",
                        f"{self.median(mode, lr, 'mse'):.6g}",
                        f"{self.median(mode, lr):.6g}",
                        "undefined" if r2 is None else f"{r2:.6g}",
                    ]
                )
        return rows

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        artifacts = []
        artifacts.append((_write_csv(out_dir / "comparison.csv", fusion.METRIC_COLUMNS, self.table_rows()), "table"))
        ref = [[m, f"{lr:g}", *v] for (m, lr), v in PAPER_TABLE2.items()]
        artifacts.append((_write_csv(out_dir / "paper_reference.csv", fusion.METRIC_COLUMNS, ref), "reference"))
        for (mode, lr), metrics in self.cells.items():
            for seed, m in zip(self.seeds, metrics):
                path = out_dir / f"metrics_{mode}_lr{lr:g}_seed{seed}.csv"
                row = fusion.metrics_row(mode, lr, m)
                _write_csv(path, fusion.METRIC_COLUMNS, [[row[c] for c in fusion.METRIC_COLUMNS]])
                artifacts.append((path, "metrics"))
        for (mode, lr, seed), hist in self.histories.items():
            path = out_dir / f"history_{mode}_lr{lr:g}_seed{seed}.csv"
            fusion.write_history_csv(hist, path)
            artifacts.append((path, "history"))
        verdicts = [self.verdict(lr) for lr in self.lrs]
        vpath = out_dir / "verdict.txt"
        vpath.write_text("\n".join(verdicts) + "\n")
        artifacts.append((vpath, "verdict"))
        write_index(out_dir, artifacts)
        return artifacts


def run_comparison(
    dataset,
    seeds=(0, 1, 2),
    lrs=(1e-4,),
    modes=fusion.MODES,
    max_epochs=50,
    patience=3,
    split_spec=SplitSpec(),
    log=None,
):
    """Train every (mode, lr, seed) cell and evaluate on the validation split."""
    tr, te, va = split(dataset, split_spec)
    need = "fusion" if len(set(modes)) > 1 else modes[0]
    loaded = {name: fusion.load_arrays(dataset, idx, need) for name, idx in (("train", tr), ("test", te), ("val", va))}
    report = ComparisonReport(seeds=tuple(seeds), lrs=tuple(lrs))
    for mode in modes:
        data = {k: _restrict(v, mode) for k, v in loaded.items()}
        for lr in lrs:
            report.cells[(mode, lr)] = []
            for seed in seeds:
                model = fusion.ForceModel(mode, dataset.image_size, seed, np.float32)
                cfg = fusion.TrainConfig(mode=mode, lr=lr, seed=seed, max_epochs=max_epochs, patience=patience)
                result = fusion.train(model, data["train"], data["test"], cfg)
                metrics = fusion.evaluate(model, data["val"])
                report.cells[(mode, lr)].append(metrics)
                report.histories[(mode, lr, seed)] = result.history
                if log:
                    log(f"{mode} lr={lr:g} seed={seed}: epochs={len(result.history)} {metrics}")
    return report


def _restrict(arrays, mode):
    return fusion.Arrays(
        arrays.images if mode in ("image-only", "fusion") else None,
        arrays.mags if mode in ("mag-only", "fusion") else None,
        arrays.labels,
    )


# ---------------------------------------------------------------------------
# response time
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimingConfig:
    repetitions: int = 100
    warmup: int = 10
    # simulated hardware delivery times (ms); no hardware is measured
    mag_reception_ms: float = 18.842
    image_reception_ms: float = 21.411


@dataclass
class TimingRow:
    mode: str
    reception_ms: float
    preprocessing_ms: float
    inference_ms: float
    preprocessing_p10_p90: tuple
    inference_p10_p90: tuple


@dataclass
class TimingReport:
    rows: list
    repetitions: int
    warmup: int
    footnote: str = "fusion reception is the larger of the two modality constants (not published)"

    COLUMNS = ("mode", "reception_ms", "preprocessing_ms", "inference_ms", "pre_p10", "pre_p90", "inf_p10", "inf_p90")

    def table(self):
        return [
            [
                r.mode,
                f"{r.reception_ms:.3f}",
                f"{r.preprocessing_ms:.4f}",
                f"{r.inference_ms:.4f}",
                *(f"{v:.4f}" for v in r.preprocessing_p10_p90),
                *(f"{v:.4f}" for v in r.inference_p10_p90),
            ]
            for r in self.rows
        ]

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = _write_csv(out_dir / "timing.csv", self.COLUMNS, self.table())
        note = out_dir / "timing_notes.txt"
        note.write_text(
            f"repetitions={self.repetitions} warmup={self.warmup}\n"
            "reception_ms: configured constants simulating the hardware link, not measured\n"
            f"* {self.footnote}\n"
        )
        ref = _write_csv(
            out_dir / "timing_paper_reference.csv",
            ("mode", "reception_ms", "preprocessing_ms", "inference_ms"),
            [[m, "" if v[0] is None else v[0], v[1], v[2]] for m, v in PAPER_TABLE3.items()],
        )
        artifacts = [(path, "table"), (note, "notes"), (ref, "reference")]
        write_index(out_dir, artifacts)
        return artifacts


def _measure(fn, repetitions, warmup):
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    arr = np.asarray(samples)
    return float(np.median(arr)), (float(np.percentile(arr, 10)), float(np.percentile(arr, 90)))


def raw_sample(dataset, i=0):
    """Reconstruct what the hardware would deliver for sample ``i``.

    Returns an 8-bit (H, W, 3) camera frame and a (window, 24) window of raw
    Hall readings in tesla (baseline added back).
    """
    s = dataset[i]
    frame = np.round(np.clip(s.image, 0.0, 1.0) * 255).astype(np.uint8)
    base = magnetics.baseline_frame(dataset.config.magnet)
    raw_mag = s.mag_window.astype(np.float64) / 1e6 + base
    return frame, raw_mag


def preprocess_magnetic(raw_window, baseline):
    """Raw tesla window -> baseline-subtracted microtesla, (1, T, 24) float32."""
    return ((np.asarray(raw_window) - baseline) * 1e6).astype(np.float32)[None]


def preprocess_image(frame_u8):
    """8-bit camera frame -> standardized (1, 3, H, W) float32."""
    img = np.asarray(frame_u8, dtype=np.float64) / 255.0
    return elastomer.preprocess(img).astype(np.float32)[None]


def run_timing(models, dataset, config: TimingConfig = TimingConfig(), sample_index=0):
    """Median preprocessing and inference wall time per mode on one sample.

    ``models`` maps mode -> ForceModel or checkpoint path.
    """
    frame, raw_mag = raw_sample(dataset, sample_index)
    baseline = magnetics.baseline_frame(dataset.config.magnet)
    rows = []
    for mode in fusion.MODES:
        if mode not in models:
            continue
        model = models[mode]
        if not isinstance(model, fusion.ForceModel):
            path = Path(model)
            if not all(p.exists() for p in fusion.checkpoint_paths(path)):
                raise FileNotFoundError(f"missing checkpoint for {mode}: {path}")
            model, _ = fusion.load_checkpoint(path)
        model.eval()

        def prep(mode=mode):
            img = preprocess_image(frame) if mode != "mag-only" else None
            mag = preprocess_magnetic(raw_mag, baseline) if mode != "image-only" else None
            return img, mag

        img, mag = prep()
        pre_med, pre_pct = _measure(prep, config.repetitions, config.warmup)
        inf_med, inf_pct = _measure(lambda: model.forward(img, mag), config.repetitions, config.warmup)
        reception = {
            "mag-only": config.mag_reception_ms,
            "image-only": config.image_reception_ms,
            "fusion": max(config.mag_reception_ms, config.image_reception_ms),
        }[mode]
        rows.append(TimingRow(mode, reception, pre_med, inf_med, pre_pct, inf_pct))
    return TimingReport(rows, config.repetitions, config.warmup)


# ---------------------------------------------------------------------------
# proximity
# ---------------------------------------------------------------------------

OBJECT_PRESETS = {"watch": 0.02, "headset": 0.05, "phone": 0.1, "mouse": 0.03}  # A m^2, placeholders


@dataclass
class ProximityTrace:
    distances: np.ndarray  # m above the sensing surface, descending
    raw: np.ndarray  # |frame - baseline|, tesla
    normalized: np.ndarray  # raw / raw at contact reference, clipped to [0, 1]
    contact_distance: float
    label: str = ""

    def rows(self):
        return [[f"{d:.6f}", f"{r:.9e}", f"{n:.9f}"] for d, r, n in zip(self.distances, self.raw, self.normalized)]


def run_proximity(
    object_moment,
    steps=200,
    start=0.20,
    contact_distance=0.005,
    config: magnetics.MagnetConfig = magnetics.MagnetConfig(),
    axis=(0.0, 0.0, 1.0),
    label="",
):
    """Noise-free Hall-ring response to a dipole approaching on the sensor axis.

    The object (moment along ``axis``) moves from ``start`` down to
    ``contact_distance`` above the surface; the final sample is the contact
    reference used for normalization.
    """
    distances = np.linspace(start, contact_distance, steps)
    markers = magnetics.marker_dipoles(config.particle_positions_mm(), config)
    sensors = magnetics.hall_ring(config)
    base = magnetics.read_hall_array(markers, sensors)
    moment = float(object_moment) * np.asarray(axis, dtype=np.float64) / np.linalg.norm(axis)

    def signal(d):
        obj = magnetics.Dipole((0.0, 0.0, d), moment)
        return float(np.linalg.norm(magnetics.read_hall_array(markers + [obj], sensors) - base))

    raw = np.array([signal(d) for d in distances])
    ref = signal(contact_distance)
    normalized = np.zeros_like(raw) if ref == 0.0 else np.clip(raw / ref, 0.0, 1.0)
    if ref != 0.0:
        normalized[-1] = 1.0  # exact by definition at the reference
    return ProximityTrace(distances, raw, normalized, contact_distance, label)


def detect_proximity(trace: ProximityTrace, threshold):
    """Largest distance whose normalized signal reaches ``threshold``; None if never."""
    hits = np.flatnonzero(trace.normalized >= threshold)
    return float(trace.distances[hits].max()) if hits.size else None


def write_proximity(traces, out_dir, svg=True):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for tr in traces:
        path = _write_csv(out_dir / f"proximity_{tr.label or 'object'}.csv", ["distance_m", "raw_t", "normalized"], tr.rows())
        artifacts.append((path, "trace"))
    if svg:
        artifacts.append((plot_traces(traces, out_dir / "proximity.svg"), "plot"))
    write_index(out_dir, artifacts)
    return artifacts


def plot_traces(traces, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for tr in traces:
        ax.plot(np.arange(len(tr.distances)), tr.normalized, label=tr.label)
    ax.set_xlabel("approach step (0.20 m to contact)")
    ax.set_ylabel("normalized proximity")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)
