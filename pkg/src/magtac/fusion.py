"""Force-estimation networks (magnetic-only GRU, image-only CNN, fusion) and their training loop."""
from __future__ import annotations

import copy
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from magtac import nn
from magtac.nn import ConvSpec, GruSpec, Linear, ShapeError

MODES = ("mag-only", "image-only", "fusion")
CBR_SPECS = (
    ConvSpec(3, 16, 7, 2, 3),
    ConvSpec(16, 32, 5, 2, 2),
    ConvSpec(32, 64, 3, 2, 1),
)
FEATURE = 32
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


class CNNBranch(nn.Sequential):
    """CBR1-CBR3, flatten, FC1, FC2: (N, 3, S, S) -> (N, 32)."""

    def __init__(self, image_size, rng=None, dtype=np.float64):
        size = image_size
        for spec in CBR_SPECS:
            size = spec.out_size(size)
        self.image_size = image_size
        self.flat_features = CBR_SPECS[-1].out_channels * size * size
        super().__init__(
            *[nn.conv_bn_relu(spec, rng, dtype) for spec in CBR_SPECS],
            nn.Flatten(),
            Linear(self.flat_features, 512, rng, dtype),
            Linear(512, FEATURE, rng, dtype),
        )
        self.layers[0].layers[0].needs_input_grad = False


class ForceModel(nn.Module):
    """One of the three regressors; the fusion head sees ``[f_mag, f_img]``."""

    _buffers = ("mag_mean", "mag_std")

    def __init__(self, mode="fusion", image_size=64, seed=0, dtype=np.float64, gru_spec=GruSpec()):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        rng = np.random.default_rng(seed)
        self.mode = mode
        self.image_size = image_size
        self.seed = seed
        self.gru_spec = gru_spec
        self.uses_mag = mode in ("mag-only", "fusion")
        self.uses_image = mode in ("image-only", "fusion")
        if self.uses_mag:
            self.gru = nn.GRU(gru_spec, rng, dtype)
        if self.uses_image:
            self.cnn = CNNBranch(image_size, rng, dtype)
        self.head = Linear(2 * FEATURE if mode == "fusion" else FEATURE, 1, rng, dtype)
        self.mag_mean = np.zeros(gru_spec.input_size, dtype=dtype)
        self.mag_std = np.ones(gru_spec.input_size, dtype=dtype)

    @property
    def dtype(self):
        return self.head.weight.value.dtype

    def set_mag_normalization(self, windows):
        """Per-channel mean/std of (N, T, 24) training windows."""
        flat = np.asarray(windows, dtype=np.float64).reshape(-1, self.gru_spec.input_size)
        self.mag_mean = flat.mean(axis=0).astype(self.dtype)
        self.mag_std = np.maximum(flat.std(axis=0), 1e-6).astype(self.dtype)

    def features(self, images=None, mags=None):
        """Branch features concatenated in head order, (N, 32 or 64)."""
        feats = []
        if self.uses_mag:
            if mags is None:
                raise ShapeError(f"{self.mode} model needs magnetic windows")
            mags = np.asarray(mags, dtype=self.dtype)
            if mags.ndim != 3 or mags.shape[2] != self.gru_spec.input_size:
                raise ShapeError(f"magnetic windows must be (N, T, {self.gru_spec.input_size}), got {mags.shape}")
            seq = ((mags - self.mag_mean) / self.mag_std).transpose(1, 0, 2)
            feats.append(self.gru.forward(np.ascontiguousarray(seq)))
        if self.uses_image:
            if images is None:
                raise ShapeError(f"{self.mode} model needs images")
            images = np.asarray(images, dtype=self.dtype)
            if images.ndim != 4 or images.shape[1:] != (3, self.image_size, self.image_size):
                raise ShapeError(f"images must be (N, 3, {self.image_size}, {self.image_size}), got {images.shape}")
            feats.append(self.cnn.forward(images))
        return np.concatenate(feats, axis=1) if len(feats) > 1 else feats[0]

    def forward(self, images=None, mags=None):
        """Predicted force, shape (N,)."""
        return self.head.forward(self.features(images, mags))[:, 0]

    def backward(self, dpred):
        dfeat = self.head.backward(np.asarray(dpred, dtype=self.dtype).reshape(-1, 1))
        off = 0
        if self.uses_mag:
            self.gru.backward(np.ascontiguousarray(dfeat[:, :FEATURE]))
            off = FEATURE
        if self.uses_image:
            self.cnn.backward(np.ascontiguousarray(dfeat[:, off : off + FEATURE]))

    def state(self):
        """Ordered name -> array copy of parameters followed by buffers."""
        out = {name: p.value.copy() for name, p in self.named_parameters()}
        out.update({name: np.array(b, copy=True) for name, b in self.named_buffers()})
        return out

    def load_state(self, state):
        params = dict(self.named_parameters())
        for name, value in state.items():
            if name in params:
                params[name].value[...] = value
            else:
                self._set_buffer(name, value)

    def _set_buffer(self, dotted, value):
        obj = self
        parts = dotted.split(".")
        for part in parts[:-1]:
            obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
        current = getattr(obj, parts[-1])
        setattr(obj, parts[-1], np.asarray(value, dtype=current.dtype).reshape(current.shape).copy())

    def architecture(self):
        return {
            "mode": self.mode,
            "image_size": self.image_size,
            "cbr": [asdict(s) for s in CBR_SPECS],
            "gru": asdict(self.gru_spec),
            "feature": FEATURE,
        }


def architecture_audit(model: ForceModel, image=None, mag=None):
    """Shapes of every stage on one forward pass, plus parameter shapes and counts."""
    rows = []
    was_training = model.training
    model.eval()
    if model.uses_image:
        x = np.zeros((1, 3, model.image_size, model.image_size), dtype=model.dtype) if image is None else image
        rows.append(("input image", tuple(x.shape)))
        for i, layer in enumerate(model.cnn.layers):
            x = layer.forward(x)
            name = f"CBR{i + 1}" if i < 3 else ("Flatten" if i == 3 else f"FC{i - 3}")
            rows.append((name, tuple(x.shape)))
    if model.uses_mag:
        m = np.zeros((1, 20, model.gru_spec.input_size), dtype=model.dtype) if mag is None else mag
        rows.append(("input magnetic", tuple(m.shape)))
        rows.append(("GRU h_T", tuple(model.gru.forward(m.transpose(1, 0, 2)).shape)))
    model.train(was_training)
    params = [(name, p.shape, int(np.prod(p.shape))) for name, p in model.named_parameters()]
    return {
        "stages": rows,
        "parameters": params,
        "total_parameters": sum(n for *_, n in params),
        "head": (model.head.in_features, model.head.out_features),
    }


@dataclass
class Metrics:
    mse: float
    rmse: float
    r2: float | None  # None when labels have zero variance

    def row(self):
        return {"mse": self.mse, "rmse": self.rmse, "r2": self.r2}


def _sqrt_consistent(x):
    """sqrt(x) nudged to the neighbouring float whose square is closest to ``x``."""
    r = math.sqrt(x)
    best = r
    for cand in (math.nextafter(r, -math.inf), math.nextafter(r, math.inf)):
        if abs(cand * cand - x) < abs(best * best - x):
            best = cand
    return best


def compute_metrics(pred, target):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape or pred.size == 0:
        raise ShapeError("metrics need equal, non-empty prediction and label arrays")
    err = pred - target
    sse = float(np.sum(err * err))
    mse = sse / err.size
    sst = float(np.sum((target - target.mean()) ** 2))
    r2 = None if sst == 0.0 else 1.0 - sse / sst
    return Metrics(mse, _sqrt_consistent(mse), r2)


@dataclass
class TrainConfig:
    mode: str = "fusion"
    lr: float = 1e-4
    batch_size: int = 64
    weight_decay: float = 1e-4
    patience: int = 3
    max_epochs: int = 50
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 for batch normalization")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strictly lower loss."""

    def __init__(self, patience=3):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = None
        self.bad_epochs = 0
        self.epoch = 0

    def update(self, loss):
        """Record one epoch's loss; return True when training should stop."""
        self.epoch += 1
        if loss < self.best:
            self.best = loss
            self.best_epoch = self.epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class Arrays:
    """In-memory model inputs for one split: preprocessed images and raw microtesla windows."""

    images: np.ndarray | None
    mags: np.ndarray | None
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def take(self, idx):
        return Arrays(
            None if self.images is None else self.images[idx],
            None if self.mags is None else self.mags[idx],
            self.labels[idx],
        )


def standardize_images(planes):
    """Per-image, per-channel standardization of (N, 3, H, W) planes (variance floor 1e-6)."""
    x = np.asarray(planes, dtype=np.float64)
    mean = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    return (x - mean) / np.sqrt(np.maximum(var, 1e-6))


def load_arrays(dataset, indices, mode, dtype=np.float32, chunk=512):
    """Pull a split into memory, preprocessing only the modalities ``mode`` consumes."""
    indices = np.sort(np.asarray(indices))
    images = None
    if mode in ("image-only", "fusion"):
        images = np.empty((len(indices), 3, dataset.image_size, dataset.image_size), dtype=dtype)
        for s in range(0, len(indices), chunk):
            sel = indices[s : s + chunk]
            images[s : s + len(sel)] = standardize_images(dataset.images[sel])
    mags = np.asarray(dataset.mag[indices], dtype=dtype) if mode in ("mag-only", "fusion") else None
    return Arrays(images, mags, np.asarray(dataset.labels[indices], dtype=np.float64))


def predict(model: ForceModel, data: Arrays, batch_size=256):
    model.eval()
    out = np.empty(len(data))
    for s in range(0, len(data), batch_size):
        part = data.take(slice(s, s + batch_size))
        out[s : s + len(part)] = model.forward(part.images, part.mags)
    return out


def evaluate(model: ForceModel, data: Arrays):
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty split")
    return compute_metrics(predict(model, data), data.labels)


def split_loss(model, data: Arrays):
    pred = predict(model, data)
    return nn.smooth_l1_loss(pred, data.labels)[0]


@dataclass
class TrainResult:
    model: ForceModel
    history: list = field(default_factory=list)  # dicts: epoch, train_loss, test_loss, lr, wall_time
    best_epoch: int | None = None
    steps: int = 0


def train(model: ForceModel, train_data: Arrays, test_data: Arrays, config: TrainConfig, on_epoch=None):
    """Minibatch Adam on Smooth L1 with early stopping on the test-split loss.

    Returns the model restored to its best-test-loss epoch (the untrained
    model when ``max_epochs`` is 0).
    """
    if len(train_data) == 0 or len(test_data) == 0:
        raise ValueError("train and test splits must be non-empty")
    if config.batch_size > len(train_data):
        raise ValueError("batch size exceeds training split")
    if model.uses_mag:
        model.set_mag_normalization(train_data.mags)
    opt = nn.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    stopper = EarlyStopping(config.patience)
    result = TrainResult(model)
    best_state = model.state()
    t0 = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        perm = rng.permutation(len(train_data))
        total, seen = 0.0, 0
        for s in range(0, len(perm), config.batch_size):
            idx = perm[s : s + config.batch_size]
            if len(idx) < 2:  # batch norm needs two samples
                continue
            batch = train_data.take(idx)
            opt.zero_grad()
            pred = model.forward(batch.images, batch.mags)
            loss, grad = nn.smooth_l1_loss(pred, batch.labels.astype(pred.dtype))
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            model.backward(grad)
            opt.step()
            total += loss * len(idx)
            seen += len(idx)
        test_loss = split_loss(model, test_data)
        if not math.isfinite(test_loss):
            raise DivergenceError(f"non-finite test loss at epoch {epoch}")
        row = {
            "epoch": epoch,
            "train_loss": total / max(seen, 1),
            "test_loss": test_loss,
            "lr": config.lr,
            "wall_time": time.perf_counter() - t0,
        }
        result.history.append(row)
        if on_epoch:
            on_epoch(row)
        stop = stopper.update(test_loss)
        if stopper.best_epoch == epoch:
            best_state = model.state()
        if stop:
            break
    model.load_state(best_state)
    model.eval()
    result.best_epoch = stopper.best_epoch
    result.steps = opt.t
    return result


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "test_loss", "lr", "wall_time"])
        writer.writeheader()
        for row in history:
            writer.writerow(row)


METRIC_COLUMNS = ["mode", "lr", "MSE", "RMSE", "R2"]


def metrics_row(mode, lr, metrics: Metrics):
    return {
        "mode": mode,
        "lr": f"{lr:g}",
        "MSE": f"{metrics.mse:.6g}",
        "RMSE": f"{metrics.rmse:.6g}",
        "R2": "undefined" if metrics.r2 is None else f"{metrics.r2:.6g}",
    }


def checkpoint_paths(path):
    """``(<stem>.json, <stem>.bin)`` for a checkpoint given with or without either suffix.

    Suffixes are appended rather than substituted because stems such as
    ``checkpoint_fusion_lr0.0001_seed0`` contain dots.
    """
    path = Path(path)
    name = path.name
    for ext in (".json", ".bin"):
        if name.endswith(ext):
            name = name[: -len(ext)]
    return path.with_name(name + ".json"), path.with_name(name + ".bin")


def save_checkpoint(model: ForceModel, path, steps=0):
    """Write ``<path>.json`` (architecture, order, shapes) and ``<path>.bin`` (little-endian float32)."""
    path = Path(path)
    state = model.state()
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in state.items()]
    blob = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in state.values())
    manifest = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "architecture": model.architecture(),
        "seed": model.seed,
        "steps": steps,
        "tensors": entries,
        "blob_bytes": len(blob),
    }
    meta, bin_path = checkpoint_paths(path)
    meta.write_text(json.dumps(manifest, indent=2) + "\n")
    bin_path.write_bytes(blob)
    return meta


def load_checkpoint(path, dtype=np.float32):
    meta, bin_path = checkpoint_paths(path)
    manifest = json.loads(meta.read_text())
    if manifest.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('checkpoint_version')!r}")
    arch = manifest["architecture"]
    model = ForceModel(arch["mode"], arch["image_size"], manifest["seed"], dtype, GruSpec(**arch["gru"]))
    blob = bin_path.read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise ValueError("checkpoint blob length mismatch")
    flat = np.frombuffer(blob, dtype="<f4")
    state, off = {}, 0
    for entry in manifest["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        state[entry["name"]] = flat[off : off + n].reshape(entry["shape"])
        off += n
    model.load_state(state)
    model.eval()
    return model, manifest


def clone(model: ForceModel):
    return copy.deepcopy(model)
