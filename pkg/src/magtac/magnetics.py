"""Point-dipole model of the embedded magnet array and the 8-sensor Hall ring.

Lengths are metres and fields tesla throughout this module.  The sensing
surface is the plane ``z = 0``; particles sit below it and the Hall ring
further below, sensor z-axes pointing up (+z).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MU0 = 4e-7 * np.pi
N_SENSORS = 8
FRAME_LEN = 3 * N_SENSORS
SINGULAR_DISTANCE = 1e-6


class SingularityError(ValueError):
    """Observation point coincides with a dipole."""


class ConfigurationError(ValueError):
    """Invalid sensor or geometry configuration."""


def sphere_moment(br=1.2, diameter=1e-3):
    """Moment magnitude (A m^2) of a uniformly magnetized sphere: ``Br * V / mu0``."""
    return br * (np.pi / 6.0 * diameter**3) / MU0


@dataclass(frozen=True)
class Dipole:
    position: np.ndarray
    moment: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "moment", np.asarray(self.moment, dtype=np.float64).reshape(3))
        if not np.all(np.isfinite(self.position)):
            raise ConfigurationError("dipole position must be finite")


@dataclass(frozen=True)
class HallSensor:
    position: np.ndarray
    # rows are the sensor's x, y, z axes expressed in world coordinates
    axes: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        axes = np.asarray(self.axes, dtype=np.float64).reshape(3, 3)
        if not np.allclose(axes @ axes.T, np.eye(3), atol=1e-12, rtol=0):
            raise ConfigurationError("sensor axes must be orthonormal")
        object.__setattr__(self, "axes", axes)


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.5e-6  # tesla, per axis
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigurationError("noise sigma must be >= 0")

    def generator(self):
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class MagnetConfig:
    """Marker array and Hall ring geometry (lengths in mm, fields in tesla)."""

    moment: float = sphere_moment()
    grid: int = 3
    spacing_mm: float = 5.0
    marker_depth_mm: float = 1.0
    hall_radius_mm: float = 12.0
    hall_drop_mm: float = 15.0  # below the particle plane
    noise_sigma: float = 0.5e-6

    def particle_positions_mm(self):
        """Rest positions of the marker grid, row-major in (y, x), shape (grid*grid, 3)."""
        offs = (np.arange(self.grid) - (self.grid - 1) / 2.0) * self.spacing_mm
        yy, xx = np.meshgrid(offs, offs, indexing="ij")
        z = np.full(xx.size, -self.marker_depth_mm)
        return np.column_stack([xx.ravel(), yy.ravel(), z])

    def hall_z_mm(self):
        return -self.marker_depth_mm - self.hall_drop_mm


def rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def hall_ring(config: MagnetConfig = MagnetConfig()):
    """Eight sensors evenly spaced on a ring; sensor ``s`` is the rotation of sensor 0 by ``s * 45 deg``."""
    sensors = []
    r = config.hall_radius_mm * 1e-3
    z = config.hall_z_mm() * 1e-3
    for s in range(N_SENSORS):
        rot = rotation_z(2.0 * np.pi * s / N_SENSORS)
        pos = rot @ np.array([r, 0.0, z])
        sensors.append(HallSensor(pos, rot.T))
    return sensors


def marker_dipoles(positions_mm, config: MagnetConfig = MagnetConfig()):
    """Dipoles at the given marker positions (mm), all polarized along +z."""
    m = np.array([0.0, 0.0, config.moment])
    return [Dipole(np.asarray(p) * 1e-3, m) for p in np.asarray(positions_mm)]


def field_at(points, positions, moments):
    """Superposed dipole field at ``points`` (S, 3) from sources (P, 3) / (P, 3); returns (S, 3)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    moments = np.atleast_2d(np.asarray(moments, dtype=np.float64))
    if positions.size == 0:
        return np.zeros_like(points)
    r = points[:, None, :] - positions[None, :, :]
    dist = np.linalg.norm(r, axis=2)
    if np.any(dist <= SINGULAR_DISTANCE):
        raise SingularityError("observation point within 1e-6 m of a dipole")
    rhat = r / dist[..., None]
    mdotr = np.einsum("spk,pk->sp", rhat, moments)
    b = (3.0 * mdotr[..., None] * rhat - moments[None, :, :]) / dist[..., None] ** 3
    return MU0 / (4.0 * np.pi) * b.sum(axis=1)


def dipole_field(observation, source: Dipole):
    """Field (T) of a single point dipole at ``observation`` (m)."""
    return field_at(np.asarray(observation)[None, :], source.position[None, :], source.moment[None, :])[0]


def read_hall_array(particles, sensors, noise: NoiseModel | None = None, rng=None):
    """One 24-value frame: each sensor's field in its own axes, sensor-major.

    Noise is zero-mean Gaussian with ``noise.sigma`` per axis, drawn from
    ``rng`` if given, otherwise from a generator seeded with ``noise.seed``.
    """
    if len(sensors) != N_SENSORS:
        raise ConfigurationError(f"expected {N_SENSORS} Hall sensors, got {len(sensors)}")
    sensor_pos = np.array([s.position for s in sensors])
    if particles:
        positions = np.array([p.position for p in particles])
        moments = np.array([p.moment for p in particles])
        b = field_at(sensor_pos, positions, moments)
    else:
        b = np.zeros((N_SENSORS, 3))
    frame = np.einsum("sij,sj->si", np.array([s.axes for s in sensors]), b).reshape(FRAME_LEN)
    if noise is not None and noise.sigma > 0:
        rng = noise.generator() if rng is None else rng
        frame = frame + rng.normal(0.0, noise.sigma, FRAME_LEN)
    return frame


def baseline_frame(config: MagnetConfig = MagnetConfig()):
    """Noise-free reading with every marker at its rest position."""
    return read_hall_array(marker_dipoles(config.particle_positions_mm(), config), hall_ring(config))


def frame_to_bytes(frame):
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (FRAME_LEN,) or not np.all(np.isfinite(frame)):
        raise ValueError("a magnetic frame is 24 finite values")
    return frame.astype("<f8").tobytes()


def frame_from_bytes(data):
    if len(data) != FRAME_LEN * 8:
        raise ValueError(f"expected {FRAME_LEN * 8} bytes, got {len(data)}")
    return np.frombuffer(data, dtype="<f8").astype(np.float64)
