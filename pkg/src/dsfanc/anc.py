"""Multi-reference ANC signal chain (J references, one secondary source, one
error microphone): fixed-filter control, FxLMS adaptation and the
direction-indexed control filter library."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.signal import fftconvolve, lfilter

from .dsp import FS, bandlimited_noise
from .room import (ImpulseResponse, MicArray, Room, SourcePlacement, array_rirs,
                   make_tetrahedral_array, place_source, render_mic_signals, simulate_rir)

log = logging.getLogger(__name__)

AZIMUTH_CLASSES = (0.0, 60.0, 120.0, 180.0, 240.0, 300.0)
ELEVATION_CLASSES = (90.0, 30.0, -30.0)
POLE_CLASS = 0  # elevation index of the 90 degree pole


class DivergenceError(RuntimeError):
    """FxLMS produced a non-finite error or weight."""


@dataclass
class ControlFilterSet:
    weights: np.ndarray  # (J, L)
    azimuth_deg: float
    elevation_deg: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim != 2:
            raise ValueError("control filters must be a (J, L) array")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("control filters contain non-finite taps")

    @property
    def n_refs(self) -> int:
        return self.weights.shape[0]

    @property
    def length(self) -> int:
        return self.weights.shape[1]


@dataclass
class FxlmsConfig:
    step_size: float = 1e-4
    filter_length: int = 1024
    secondary_path: ImpulseResponse | None = None

    def __post_init__(self):
        if self.step_size < 0:
            raise ValueError("step size must be non-negative")
        if self.filter_length <= 0:
            raise ValueError("filter length must be positive")
        if self.secondary_path is not None and len(self.secondary_path) == 0:
            raise ValueError("secondary path estimate is empty")


def control_output(w, ref_history) -> float:
    """``y(n) = sum_j r_j(n)^T w_j``; ``ref_history[j, l] = r_j(n - l)``."""
    w = w.weights if isinstance(w, ControlFilterSet) else np.asarray(w, dtype=float)
    ref_history = np.asarray(ref_history, dtype=float)
    if w.shape != ref_history.shape:
        raise ValueError(f"filter shape {w.shape} does not match history shape {ref_history.shape}")
    return float(np.sum(w * ref_history))


def error_sample(d: float, y_history, s) -> float:
    """``e(n) = d(n) - y(n)^T s`` with ``y_history[l] = y(n - l)``."""
    s = s.taps if isinstance(s, ImpulseResponse) else np.asarray(s, dtype=float)
    y_history = np.asarray(y_history, dtype=float)
    if y_history.shape != s.shape:
        raise ValueError(f"control history of length {y_history.size} does not match path length {s.size}")
    return float(d - y_history @ s)


def filtered_reference(r, s_hat) -> np.ndarray:
    """Causal, length-preserving convolution of a reference stream with the
    secondary path estimate."""
    s_hat = s_hat.taps if isinstance(s_hat, ImpulseResponse) else np.asarray(s_hat, dtype=float)
    if s_hat.size == 0:
        raise ValueError("secondary path estimate is empty")
    return lfilter(s_hat, [1.0], np.asarray(r, dtype=float), axis=-1)


class FxlmsState:
    """Filter weights and signal histories of one FxLMS controller.

    :func:`fxlms_step` advances it one sample at a time; :func:`run_fxlms`
    runs the identical recursion over whole blocks.
    """

    def __init__(self, n_refs: int, cfg: FxlmsConfig, weights=None):
        if cfg.secondary_path is None:
            raise ValueError("FxLMS needs a secondary path estimate")
        L, Ls = cfg.filter_length, len(cfg.secondary_path)
        self.weights = np.zeros((n_refs, L)) if weights is None else np.array(weights, dtype=float)
        if self.weights.shape != (n_refs, L):
            raise ValueError(f"initial weights must be ({n_refs}, {L})")
        self.ref_hist = np.zeros((n_refs, max(L, Ls)))
        self.fref_hist = np.zeros((n_refs, L))
        self.y_hist = np.zeros(Ls)
        self.n = 0


def _match_path(state: FxlmsState, s: np.ndarray):
    # the true path may differ in length from the estimate; size the control history to it
    if state.y_hist.size != s.size:
        if state.n:
            raise ValueError("secondary path length changed mid-run")
        state.y_hist = np.zeros(s.size)


def fxlms_step(state: FxlmsState, r, d: float, cfg: FxlmsConfig, s=None) -> float:
    """Advance one sample; ``s`` is the true secondary path (defaults to the
    estimate in ``cfg``).  Returns ``e(n)`` and updates ``state`` in place."""
    s_hat = cfg.secondary_path.taps
    s = s_hat if s is None else (s.taps if isinstance(s, ImpulseResponse) else np.asarray(s, float))
    L, Ls = cfg.filter_length, s_hat.size
    r = np.asarray(r, dtype=float)
    _match_path(state, s)
    state.ref_hist[:, 1:] = state.ref_hist[:, :-1]
    state.ref_hist[:, 0] = r
    state.fref_hist[:, 1:] = state.fref_hist[:, :-1]
    state.fref_hist[:, 0] = state.ref_hist[:, :Ls] @ s_hat
    y = control_output(state.weights, state.ref_hist[:, :L])
    state.y_hist[1:] = state.y_hist[:-1]
    state.y_hist[0] = y
    e = error_sample(d, state.y_hist, s)
    if not math.isfinite(e):
        raise DivergenceError(f"non-finite error at sample {state.n}")
    state.weights += cfg.step_size * state.fref_hist * e
    state.n += 1
    return e


@njit(cache=True)
def _fxlms_block(refs, d, s, s_hat, mu, w, ref_hist, fref_hist, y_hist, e_out):
    J, L = w.shape
    Ls = s.shape[0]
    Lsh = s_hat.shape[0]
    H = ref_hist.shape[1]
    for n in range(d.shape[0]):
        for j in range(J):
            for k in range(H - 1, 0, -1):
                ref_hist[j, k] = ref_hist[j, k - 1]
            ref_hist[j, 0] = refs[j, n]
            acc = 0.0
            for k in range(Lsh):
                acc += ref_hist[j, k] * s_hat[k]
            for k in range(L - 1, 0, -1):
                fref_hist[j, k] = fref_hist[j, k - 1]
            fref_hist[j, 0] = acc
        y = 0.0
        for j in range(J):
            for k in range(L):
                y += w[j, k] * ref_hist[j, k]
        for k in range(Ls - 1, 0, -1):
            y_hist[k] = y_hist[k - 1]
        y_hist[0] = y
        acc = 0.0
        for k in range(Ls):
            acc += y_hist[k] * s[k]
        e = d[n] - acc
        e_out[n] = e
        if not math.isfinite(e):
            return n
        g = mu * e
        for j in range(J):
            for k in range(L):
                w[j, k] += g * fref_hist[j, k]
    return -1


def run_fxlms(state: FxlmsState, refs, d, cfg: FxlmsConfig, s=None) -> np.ndarray:
    """Run FxLMS over a block of ``(J, N)`` references and ``N`` disturbance
    samples, continuing from ``state``.  Returns the error trace."""
    refs = np.ascontiguousarray(refs, dtype=float)
    d = np.ascontiguousarray(d, dtype=float)
    s_hat = np.ascontiguousarray(cfg.secondary_path.taps)
    s = s_hat if s is None else np.ascontiguousarray(s.taps if isinstance(s, ImpulseResponse) else s, dtype=float)
    if refs.shape != (state.weights.shape[0], d.size):
        raise ValueError(f"references {refs.shape} do not match {state.weights.shape[0]} channels x {d.size} samples")
    _match_path(state, s)
    e = np.empty_like(d)
    bad = _fxlms_block(refs, d, s, s_hat, float(cfg.step_size), state.weights,
                       state.ref_hist, state.fref_hist, state.y_hist, e)
    if bad >= 0 or not np.all(np.isfinite(state.weights)):
        raise DivergenceError(
            f"FxLMS diverged at sample {state.n + max(bad, 0)} (step size {cfg.step_size}); reduce the step size"
        )
    state.n += d.size
    return e


def fixed_filter_output(weights, refs) -> np.ndarray:
    """Control signal of a fixed filter set over whole reference streams."""
    weights = np.asarray(weights, dtype=float)
    refs = np.asarray(refs, dtype=float)
    n = refs.shape[1]
    return sum(fftconvolve(refs[j], weights[j])[:n] for j in range(refs.shape[0]))


def secondary_output(y, s) -> np.ndarray:
    s = s.taps if isinstance(s, ImpulseResponse) else np.asarray(s, dtype=float)
    return fftconvolve(np.asarray(y, dtype=float), s)[: len(y)]


# --- acoustic setup and the pre-trained library ---------------------------------


def _offset(distance: float, azimuth_deg: float, elevation_deg: float = 0.0) -> np.ndarray:
    th, ph = math.radians(azimuth_deg), math.radians(elevation_deg)
    return distance * np.array([math.cos(ph) * math.cos(th), math.cos(ph) * math.sin(th), math.sin(ph)])


@dataclass
class AncGeometry:
    """Room, reference array, error microphone and secondary source of the
    4x1x1 system.  Offsets are vectors in meters: the error microphone
    relative to the array center, the secondary source relative to the
    error microphone."""

    room: Room = field(default_factory=lambda: Room((11.0, 9.0, 3.2), 0.48))
    array_center: tuple = (4.0, 4.5, 1.5)
    error_offset: tuple = tuple(_offset(0.6, 30.0))
    secondary_offset: tuple = tuple(_offset(0.1, 30.0))
    array_diameter: float = 0.025
    array_rotation_deg: float = 0.0
    source_distance: float = 0.2
    secondary_length: int = 512
    fs: int = FS
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name, p in (("array center", self.center), ("error microphone", self.error_mic),
                        ("secondary source", self.secondary_source)):
            if not self.room.contains(p):
                raise ValueError(f"{name} {p} lies outside room {self.room.dims}")

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.array_center, dtype=float)

    @property
    def error_mic(self) -> np.ndarray:
        return self.center + np.asarray(self.error_offset, dtype=float)

    @property
    def secondary_source(self) -> np.ndarray:
        return self.error_mic + np.asarray(self.secondary_offset, dtype=float)

    def array(self) -> MicArray:
        return make_tetrahedral_array(self.center, self.array_diameter, self.array_rotation_deg)

    def secondary_path(self) -> ImpulseResponse:
        if "s" not in self._cache:
            self._cache["s"] = simulate_rir(self.room, self.secondary_source, self.error_mic, self.fs,
                                            self.secondary_length)
        return self._cache["s"]

    def source_position(self, placement: SourcePlacement) -> np.ndarray:
        pos = place_source(self.array(), placement)
        if not self.room.contains(pos):
            raise ValueError(f"source {pos} lies outside room {self.room.dims}")
        return pos

    def paths(self, placement: SourcePlacement):
        """Reference RIRs ``q_j`` and primary path ``p`` for a source placement."""
        key = (placement.azimuth_deg, placement.elevation_deg, placement.distance_m)
        if key not in self._cache:
            src = self.source_position(placement)
            q = array_rirs(self.room, src, self.array(), self.fs)
            p = simulate_rir(self.room, src, self.error_mic, self.fs)
            self._cache[key] = (q, p)
        return self._cache[key]

    def render(self, x, placement: SourcePlacement, snr_db=None, rng=None):
        """References ``(J, N)`` (sensor noise at ``snr_db``) and the clean
        disturbance ``d`` at the error microphone."""
        q, p = self.paths(placement)
        refs = render_mic_signals(x, q, snr_db, rng)
        d = render_mic_signals(x, [p])[0]
        return refs, d

    def to_dict(self) -> dict:
        return {"room_dims": list(self.room.dims), "rt60": self.room.rt60,
                "speed_of_sound": self.room.speed_of_sound,
                "array_center": [float(v) for v in self.array_center],
                "error_offset": [float(v) for v in self.error_offset],
                "secondary_offset": [float(v) for v in self.secondary_offset],
                "array_diameter": self.array_diameter, "array_rotation_deg": self.array_rotation_deg,
                "source_distance": self.source_distance, "secondary_length": self.secondary_length,
                "fs": self.fs}


def grid_directions():
    """The 13 library directions as ``((a, b), azimuth, elevation)``: the
    pole first, then the 30 and -30 degree rings."""
    out = [((0, POLE_CLASS), 0.0, ELEVATION_CLASSES[POLE_CLASS])]
    for b, el in enumerate(ELEVATION_CLASSES):
        if b == POLE_CLASS:
            continue
        out.extend(((a, b), az, el) for a, az in enumerate(AZIMUTH_CLASSES))
    return out


@dataclass
class PretrainConfig:
    band: tuple[float, float] = (20.0, 2020.0)
    step_size: float = 1e-4
    filter_length: int = 1024
    max_seconds: float = 40.0
    plateau_db: float = 0.1
    plateau_seconds: int = 5
    seed: int = 0

    def to_dict(self) -> dict:
        return {"band": list(self.band), "step_size": self.step_size, "filter_length": self.filter_length,
                "max_seconds": self.max_seconds, "plateau_db": self.plateau_db,
                "plateau_seconds": self.plateau_seconds, "seed": self.seed}


def _block_nr(d, e) -> float:
    pd, pe = float(np.sum(d * d)), float(np.sum(e * e))
    return 10.0 * math.log10(pd / max(pe, pd * 1e-12)) if pd > 0 else 0.0


def pretrain_filter(placement: SourcePlacement, geom: AncGeometry, cfg: PretrainConfig = PretrainConfig(),
                    key: int = 0) -> ControlFilterSet:
    """FxLMS-train a fixed filter set for one source direction.

    Training runs in 1 s blocks of band-limited noise and stops once the
    per-second NR has gained less than ``plateau_db`` over the last
    ``plateau_seconds`` seconds, or at ``max_seconds``.
    """
    fs = geom.fs
    rng = np.random.default_rng([cfg.seed, key])
    x = bandlimited_noise(cfg.band[0], cfg.band[1], cfg.max_seconds, fs, rng)
    refs, d = geom.render(x, placement)
    fx = FxlmsConfig(cfg.step_size, cfg.filter_length, geom.secondary_path())
    state = FxlmsState(refs.shape[0], fx)
    nr, converged = [], False
    n_blocks = int(cfg.max_seconds)
    for k in range(n_blocks):
        sl = slice(k * fs, (k + 1) * fs)
        e = run_fxlms(state, refs[:, sl], d[sl], fx)
        nr.append(_block_nr(d[sl], e))
        if k >= cfg.plateau_seconds and nr[k] - nr[k - cfg.plateau_seconds] < cfg.plateau_db:
            converged = True
            break
    if not converged:
        log.warning("filter for (%.0f, %.0f) not converged after %d s (last NR %.2f dB)",
                    placement.azimuth_deg, placement.elevation_deg, len(nr), nr[-1])
    return ControlFilterSet(state.weights.copy(), placement.azimuth_deg, placement.elevation_deg,
                            {"converged": converged, "seconds": len(nr), "nr_trace_db": nr,
                             "final_nr_db": nr[-1]})


def replay_nr(filters: ControlFilterSet, geom: AncGeometry, placement: SourcePlacement, x,
              skip_s: float = 0.5) -> float:
    """NR of a fixed filter set over ``x`` rendered from ``placement``."""
    refs, d = geom.render(x, placement)
    e = d - secondary_output(fixed_filter_output(filters.weights, refs), geom.secondary_path())
    k = int(skip_s * geom.fs)
    return _block_nr(d[k:], e[k:])


class ControlFilterLibrary:
    """13 direction-indexed filter sets; every azimuth at the pole
    elevation resolves to the one pole entry."""

    def __init__(self, entries: dict, meta: dict | None = None):
        self.entries = dict(entries)
        self.meta = dict(meta or {})
        keys = {k for k, _, _ in grid_directions()}
        if set(self.entries) != keys:
            raise ValueError(f"library needs entries for exactly {sorted(keys)}")
        shapes = {fs_.weights.shape for fs_ in self.entries.values()}
        if len(shapes) != 1:
            raise ValueError(f"library entries disagree on (J, L): {shapes}")

    @property
    def grid(self) -> dict:
        return {"azimuth_classes": list(AZIMUTH_CLASSES), "elevation_classes": list(ELEVATION_CLASSES)}

    @property
    def shape(self) -> tuple[int, int]:
        return next(iter(self.entries.values())).weights.shape

    def __len__(self):
        return len(self.entries)

    def lookup(self, a: int, b: int) -> ControlFilterSet:
        if not (0 <= a < len(AZIMUTH_CLASSES) and 0 <= b < len(ELEVATION_CLASSES)):
            raise KeyError(f"class ({a}, {b}) outside the grid")
        return self.entries[(0, POLE_CLASS) if b == POLE_CLASS else (a, b)]

    def nearest(self, azimuth_deg: float, elevation_deg: float) -> ControlFilterSet:
        from .dataset import nearest_class_labels

        lab = nearest_class_labels(azimuth_deg % 360.0, elevation_deg)
        return self.lookup(lab.azim_class, lab.elev_class)

    def ordered(self):
        return [(k, self.entries[k]) for k, _, _ in grid_directions()]

    def save(self, path) -> dict:
        from pathlib import Path

        from . import tensorio

        path = Path(path)
        stack = np.stack([fs_.weights for _, fs_ in self.ordered()])
        digest = tensorio.write_tensor(path, stack, "f64")
        J, L = self.shape
        manifest = {
            "kind": "control_filter_library", "tensor": path.name, "tensor_sha256": digest,
            "grid": self.grid, "n_refs": J, "filter_length": L,
            "entries": [{"azim_class": a, "elev_class": b, "azimuth_deg": f.azimuth_deg,
                         "elevation_deg": f.elevation_deg,
                         **{k: v for k, v in f.meta.items() if k in ("converged", "seconds", "final_nr_db")}}
                        for (a, b), f in self.ordered()],
            **self.meta,
        }
        manifest["manifest_hash"] = tensorio.write_manifest(path.with_suffix(".json"), manifest)
        return manifest

    @classmethod
    def load(cls, path) -> "ControlFilterLibrary":
        from pathlib import Path

        from . import tensorio

        path = Path(path)
        manifest = tensorio.read_manifest(path.with_suffix(".json"))
        if manifest.get("grid") != {"azimuth_classes": list(AZIMUTH_CLASSES),
                                    "elevation_classes": list(ELEVATION_CLASSES)}:
            raise ValueError(f"{path}: library grid {manifest.get('grid')} does not match this toolkit")
        stack = tensorio.read_tensor(path)
        entries = {}
        for w, ent in zip(stack, manifest["entries"]):
            meta = {k: ent[k] for k in ("converged", "seconds", "final_nr_db") if k in ent}
            entries[(ent["azim_class"], ent["elev_class"])] = ControlFilterSet(
                w, ent["azimuth_deg"], ent["elevation_deg"], meta)
        extra = {k: v for k, v in manifest.items()
                 if k not in ("entries", "grid", "tensor", "tensor_sha256", "n_refs", "filter_length", "kind")}
        return cls(entries, extra)


def _pretrain_job(args):
    key, az, el, geom, cfg, idx = args
    return key, pretrain_filter(SourcePlacement(az, el, geom.source_distance), geom, cfg, idx)


def build_filter_library(geom: AncGeometry, cfg: PretrainConfig = PretrainConfig(),
                         threads: int = 1) -> ControlFilterLibrary:
    """Pre-train all 13 grid directions at ``geom.source_distance``."""
    jobs = [(k, az, el, geom, cfg, i) for i, (k, az, el) in enumerate(grid_directions())]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_pretrain_job, jobs))
    else:
        results = [_pretrain_job(j) for j in jobs]
    from .tensorio import canonical_hash

    return ControlFilterLibrary(dict(results), {"geometry": geom.to_dict(), "pretrain": cfg.to_dict(),
                                                "fs": geom.fs, "pretrain_hash": canonical_hash(cfg.to_dict())})
