"""Quasi-static marker displacement under an indenter and a synthetic tactile renderer.

Surface coordinates are millimetres, origin at the centre of the gel
surface; markers sit ``marker_depth`` below it (negative z).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

LATERAL_COUPLING = 0.3


class DomainError(ValueError):
    """Indentation outside the gel surface or force outside [0, 1] N."""


@dataclass(frozen=True)
class ElastomerConfig:
    extent_mm: float = 25.0
    thickness_mm: float = 11.0
    grid: int = 3
    spacing_mm: float = 5.0
    marker_depth_mm: float = 1.0
    compliance: float = 3.0  # mm / N
    kernel_width_mm: float = 4.0

    def __post_init__(self):
        if not self.spacing_mm * (self.grid - 1) < self.extent_mm:
            raise ValueError("marker grid does not fit on the surface")
        if not self.marker_depth_mm < self.thickness_mm:
            raise ValueError("markers must sit inside the gel")
        if self.compliance <= 0 or self.kernel_width_mm <= 0:
            raise ValueError("compliance and kernel width must be positive")

    def rest_positions(self):
        offs = (np.arange(self.grid) - (self.grid - 1) / 2.0) * self.spacing_mm
        yy, xx = np.meshgrid(offs, offs, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel(), np.full(xx.size, -self.marker_depth_mm)])


@dataclass(frozen=True)
class Indentation:
    center: tuple
    force: float
    indenter_radius: float = 3.0

    def validate(self, config: ElastomerConfig):
        half = config.extent_mm / 2.0
        cx, cy = self.center
        if not (abs(cx) <= half and abs(cy) <= half):
            raise DomainError(f"indentation centre {self.center} is off the {config.extent_mm} mm surface")
        if not 0.0 <= self.force <= 1.0:
            raise DomainError(f"force {self.force} N outside [0, 1]")


def displacement_field(config: ElastomerConfig, ind: Indentation, rest_xy):
    """Displacement (K, 3) in mm of material points with rest surface coordinates ``rest_xy`` (K, 2)."""
    rest_xy = np.atleast_2d(np.asarray(rest_xy, dtype=np.float64))
    center = np.asarray(ind.center, dtype=np.float64)
    to_center = center[None, :] - rest_xy
    d2 = np.einsum("ij,ij->i", to_center, to_center)
    sw = config.kernel_width_mm
    dz = -config.compliance * ind.force * np.exp(-d2 / (2.0 * sw * sw))
    dz = np.maximum(dz, -(config.marker_depth_mm + 2.0))
    dist = np.sqrt(d2)
    lateral = LATERAL_COUPLING * np.abs(dz)[:, None] * to_center / np.maximum(dist, sw)[:, None]
    return np.column_stack([lateral, dz])


def deform(config: ElastomerConfig, ind: Indentation):
    """Displaced marker positions (grid*grid, 3) in mm for an indentation."""
    ind.validate(config)
    rest = config.rest_positions()
    if ind.force == 0.0:
        return rest
    return rest + displacement_field(config, ind, rest[:, :2])


@dataclass(frozen=True)
class RenderConfig:
    height: int = 64
    width: int = 64
    marker_radius_px: float = 2.0
    background_level: float = 0.55
    shading_gain: float = 0.25
    extent_mm: float = 25.0
    marker_level: float = 0.30  # intensity of a marker at rest depth
    darkness_gain: float = 0.07  # intensity drop per mm of marker depression
    radius_gain: float = 0.15  # fractional radius growth per mm of depression
    tint: tuple = (1.0, 0.94, 0.86)

    def __post_init__(self):
        if self.height != self.width:
            raise ValueError("tactile images are square")

    @classmethod
    def for_size(cls, size, **overrides):
        """Defaults scaled to a square image of ``size`` pixels."""
        return cls(height=size, width=size, marker_radius_px=2.0 * size / 64.0, **overrides)


def _to_pixels(config, xy_mm):
    scale = config.width / config.extent_mm
    return (np.asarray(xy_mm) + config.extent_mm / 2.0) * scale - 0.5


def render(config: RenderConfig, markers, ind: Indentation, marker_depth_mm=1.0):
    """Deterministic (H, W, 3) image in [0, 1] of the marker layer seen from below.

    Background plus a contact-shading bump of amplitude ``shading_gain * F``;
    markers are anti-aliased dark disks that grow and darken with depression.
    """
    markers = np.asarray(markers, dtype=np.float64)
    h, w = config.height, config.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    scale = w / config.extent_mm
    cx, cy = _to_pixels(config, ind.center)
    sigma_px = max(ind.indenter_radius * scale, 1.0)
    bump = config.shading_gain * ind.force * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma_px**2))
    gray = config.background_level + bump

    depress = np.abs(markers[:, 2] + marker_depth_mm)
    centers = _to_pixels(config, markers[:, :2])
    for (px, py), dz in zip(centers, depress):
        radius = config.marker_radius_px * (1.0 + config.radius_gain * dz)
        level = max(config.marker_level - config.darkness_gain * dz, 0.0)
        r0 = int(np.ceil(radius + 1))
        y0, y1 = max(int(py) - r0, 0), min(int(py) + r0 + 2, h)
        x0, x1 = max(int(px) - r0, 0), min(int(px) + r0 + 2, w)
        if y0 >= y1 or x0 >= x1:
            continue
        dist = np.hypot(xs[y0:y1, x0:x1] - px, ys[y0:y1, x0:x1] - py)
        alpha = np.clip(radius - dist + 0.5, 0.0, 1.0)
        patch = gray[y0:y1, x0:x1]
        gray[y0:y1, x0:x1] = patch * (1.0 - alpha) + alpha * level
    img = gray[:, :, None] * np.asarray(config.tint)[None, None, :]
    return np.clip(img, 0.0, 1.0)


def preprocess(img, var_floor=1e-6):
    """(H, W, 3) image -> (3, H, W) with each channel standardized over the image."""
    x = np.asarray(img, dtype=np.float64).transpose(2, 0, 1)
    mean = x.mean(axis=(1, 2), keepdims=True)
    var = x.var(axis=(1, 2), keepdims=True)
    # a flat channel carries no signal; rounding in the mean would otherwise leak through
    centered = np.where(var < var_floor * 1e-6, 0.0, x - mean)
    return centered / np.sqrt(np.maximum(var, var_floor))


def write_image_raw(fh, img):
    """Write one image record: int32 H, W header then float32 channel planes (3, H, W)."""
    img = np.asarray(img)
    h, w, _ = img.shape
    fh.write(struct.pack("<ii", h, w))
    fh.write(np.ascontiguousarray(img.transpose(2, 0, 1), dtype="<f4").tobytes())


def read_image_raw(fh):
    header = fh.read(8)
    if len(header) != 8:
        raise EOFError("truncated image header")
    h, w = struct.unpack("<ii", header)
    n = 3 * h * w * 4
    data = fh.read(n)
    if len(data) != n:
        raise EOFError("truncated image data")
    return np.frombuffer(data, dtype="<f4").reshape(3, h, w).transpose(1, 2, 0).astype(np.float32)


def export_png(path, img):
    """8-bit RGB PNG for eyeballing a rendered frame."""
    from PIL import Image

    arr = np.round(np.clip(np.asarray(img), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)
