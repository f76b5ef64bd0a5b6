"""Room acoustics: image-method RIRs, the tetrahedral reference array and
multichannel rendering of a source signal.

Coordinates are meters in a shoe-box room spanning ``[0, Lx] x [0, Ly] x
[0, Lz]``.  Azimuth is measured counter-clockwise from +x in the horizontal
plane, elevation upward from that plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.signal import fftconvolve

SPEED_OF_SOUND = 343.0
SINC_TAPS = 81  # fractional-delay kernel length (Hann-windowed sinc)


@dataclass(frozen=True)
class Room:
    dims: tuple[float, float, float]
    rt60: float
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        dims = tuple(float(v) for v in self.dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise ValueError(f"room dims must be three positive lengths, got {self.dims}")
        if self.rt60 < 0:
            raise ValueError(f"rt60 must be >= 0, got {self.rt60}")
        object.__setattr__(self, "dims", dims)

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dims
        return lx * ly * lz

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dims
        return 2.0 * (lx * ly + lx * lz + ly * lz)

    def contains(self, point, margin: float = 0.0) -> bool:
        p = np.asarray(point, dtype=float)
        d = np.asarray(self.dims)
        return bool(np.all(p > margin) and np.all(p < d - margin))

    def clearance(self, point) -> float:
        """Distance from ``point`` to the nearest wall, floor or ceiling."""
        p = np.asarray(point, dtype=float)
        return float(min(p.min(), (np.asarray(self.dims) - p).min()))


@dataclass(frozen=True)
class MicArray:
    center: np.ndarray
    positions: np.ndarray  # (4, 3)
    diameter: float

    @property
    def n_mics(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class SourcePlacement:
    azimuth_deg: float
    elevation_deg: float
    distance_m: float

    def __post_init__(self):
        if not 0.0 <= self.azimuth_deg < 360.0:
            raise ValueError(f"azimuth must lie in [0, 360), got {self.azimuth_deg}")
        if not -90.0 <= self.elevation_deg <= 90.0:
            raise ValueError(f"elevation must lie in [-90, 90], got {self.elevation_deg}")
        if self.distance_m <= 0:
            raise ValueError(f"distance must be positive, got {self.distance_m}")


@dataclass
class ImpulseResponse:
    taps: np.ndarray
    fs: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=float)
        if self.taps.ndim != 1 or self.taps.size == 0:
            raise ValueError("impulse response needs a non-empty 1-D tap vector")
        if not np.all(np.isfinite(self.taps)):
            raise ValueError("impulse response contains non-finite taps")

    def __len__(self):
        return self.taps.size


def make_tetrahedral_array(center, diameter: float = 0.025, rotation_deg: float = 0.0) -> MicArray:
    """Regular tetrahedron inscribed in a sphere of ``diameter`` about ``center``.

    Vertex 0 sits on the +z axis; the remaining three lie at z = -R/3 with
    azimuths 0, 120 and 240 degrees, optionally yawed by ``rotation_deg``.
    """
    if diameter <= 0:
        raise ValueError(f"array diameter must be positive, got {diameter}")
    center = np.asarray(center, dtype=float).reshape(3)
    r = diameter / 2.0
    rho = r * math.sqrt(8.0) / 3.0
    verts = [np.array([0.0, 0.0, r])]
    for k in range(3):
        a = math.radians(rotation_deg + 120.0 * k)
        verts.append(np.array([rho * math.cos(a), rho * math.sin(a), -r / 3.0]))
    positions = center + np.stack(verts)
    return MicArray(center=center, positions=positions, diameter=float(diameter))


def direction_vector(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    th, ph = math.radians(azimuth_deg), math.radians(elevation_deg)
    return np.array([math.cos(ph) * math.cos(th), math.cos(ph) * math.sin(th), math.sin(ph)])


def place_source(array: MicArray | np.ndarray, placement: SourcePlacement) -> np.ndarray:
    center = array.center if isinstance(array, MicArray) else np.asarray(array, dtype=float)
    return center + placement.distance_m * direction_vector(placement.azimuth_deg, placement.elevation_deg)


def rt60_to_reflection(room: Room) -> np.ndarray:
    """Uniform wall reflection coefficients from Sabine's formula (6 walls)."""
    if room.rt60 <= 0:
        raise ValueError("rt60 must be positive to derive a reflection coefficient")
    alpha = 0.161 * room.volume / (room.surface * room.rt60)
    if alpha >= 1.0:
        raise ValueError(
            f"rt60={room.rt60} s is unreachable for a {room.dims} room (Sabine absorption {alpha:.3f} >= 1)"
        )
    return np.full(6, math.sqrt(1.0 - alpha))


@njit(cache=True)
def _image_method(src, rcv, dims, beta, fs, c, n_taps, out):
    half = (SINC_TAPS - 1) // 2
    max_dist = (n_taps + half + 1) / fs * c
    lx, ly, lz = dims[0], dims[1], dims[2]
    nx = int(max_dist / (2.0 * lx)) + 1
    ny = int(max_dist / (2.0 * ly)) + 1
    nz = int(max_dist / (2.0 * lz)) + 1
    for mx in range(-nx, nx + 1):
        for ux in range(2):
            dx = (1 - 2 * ux) * src[0] + 2 * mx * lx - rcv[0]
            if abs(dx) > max_dist:
                continue
            gx = beta[0] ** abs(mx - ux) * beta[1] ** abs(mx)
            for my in range(-ny, ny + 1):
                for uy in range(2):
                    dy = (1 - 2 * uy) * src[1] + 2 * my * ly - rcv[1]
                    dxy2 = dx * dx + dy * dy
                    if dxy2 > max_dist * max_dist:
                        continue
                    gxy = gx * beta[2] ** abs(my - uy) * beta[3] ** abs(my)
                    if gxy == 0.0:
                        continue
                    for mz in range(-nz, nz + 1):
                        for uz in range(2):
                            dz = (1 - 2 * uz) * src[2] + 2 * mz * lz - rcv[2]
                            dist = math.sqrt(dxy2 + dz * dz)
                            if dist > max_dist:
                                continue
                            g = gxy * beta[4] ** abs(mz - uz) * beta[5] ** abs(mz)
                            if g == 0.0:
                                continue
                            amp = g / (4.0 * math.pi * dist)
                            tau = dist / c * fs
                            n0 = int(math.floor(tau + 0.5))
                            # sin(pi (n - tau)) alternates sign with n
                            s0 = -math.sin(math.pi * tau)
                            sign = 1.0 if (n0 - half) % 2 == 0 else -1.0
                            for n in range(n0 - half, n0 + half + 1):
                                if 0 <= n < n_taps:
                                    t = n - tau
                                    if abs(t) < 1e-12:
                                        h = 1.0
                                    else:
                                        h = sign * s0 / (math.pi * t)
                                    w = 0.5 * (1.0 + math.cos(2.0 * math.pi * t / SINC_TAPS))
                                    out[n] += amp * w * h
                                sign = -sign


def simulate_rir(room: Room, source, receiver, fs: float = 16000.0, n_taps: int | None = None) -> ImpulseResponse:
    """Image-method RIR between two points.

    Every image source whose fractional-delay kernel reaches into the first
    ``n_taps`` samples is included.  ``room.rt60 == 0`` gives an anechoic
    (direct path only) response.  The default length covers one RT60.
    """
    src = np.asarray(source, dtype=float).reshape(3)
    rcv = np.asarray(receiver, dtype=float).reshape(3)
    if not room.contains(src) or not room.contains(rcv):
        raise ValueError("source and receiver must lie strictly inside the room")
    dist = float(np.linalg.norm(src - rcv))
    if dist < 1e-9:
        raise ValueError("source and receiver coincide")
    if n_taps is None:
        n_taps = max(int(math.ceil(room.rt60 * fs)), int(math.ceil(dist / room.speed_of_sound * fs)) + SINC_TAPS)
    if n_taps <= 0:
        raise ValueError("n_taps must be positive")
    beta = np.zeros(6) if room.rt60 == 0 else rt60_to_reflection(room)
    out = np.zeros(int(n_taps))
    _image_method(src, rcv, np.asarray(room.dims), beta, float(fs), float(room.speed_of_sound), int(n_taps), out)
    return ImpulseResponse(out, fs, {"distance_m": dist})


def array_rirs(room: Room, source, array: MicArray, fs: float = 16000.0, n_taps: int | None = None) -> list[ImpulseResponse]:
    return [simulate_rir(room, source, p, fs, n_taps) for p in array.positions]


def render_mic_signals(x, rirs, snr_db: float | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Convolve ``x`` with each RIR (truncated to ``len(x)``), optionally
    adding independent white Gaussian sensor noise at ``snr_db`` per channel."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("source signal is empty")
    rates = {float(h.fs) for h in rirs}
    if len(rates) != 1:
        raise ValueError(f"RIR sampling rates differ: {sorted(rates)}")
    out = np.stack([fftconvolve(x, h.taps)[: x.size] for h in rirs])
    if snr_db is not None:
        if rng is None:
            raise ValueError("an rng is required when adding sensor noise")
        power = np.mean(out**2, axis=1, keepdims=True)
        noise = rng.standard_normal(out.shape)
        out = out + noise * np.sqrt(power / 10.0 ** (snr_db / 10.0))
    return out
