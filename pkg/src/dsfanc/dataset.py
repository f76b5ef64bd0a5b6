"""Labeled multichannel reference frames for DoA training and evaluation.

Each sample is one reverberant scene: a noise clip rendered from a random
direction around the tetrahedral array, with sensor noise at a random SNR,
cut to one 0.5 s frame.  Frames are stored raw; the STFT feature tensor is
derived on load by :func:`dsfanc.dsp.features`.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from . import tensorio
from .anc import AZIMUTH_CLASSES, ELEVATION_CLASSES
from .dsp import FRAME_LEN, FS, bandlimited_noise, features, normalize_magnitude
from .room import Room, SourcePlacement, array_rirs, make_tetrahedral_array, place_source, render_mic_signals

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
# columns of the per-sample label/provenance tensor
LABEL_COLUMNS = ("azim_class", "elev_class", "azimuth_deg", "elevation_deg", "distance_m",
                 "room", "position", "rt60", "snr_db", "real", "noise_id")


@dataclass(frozen=True)
class DoaLabel:
    azim_class: int
    elev_class: int

    def __post_init__(self):
        if not 0 <= self.azim_class < len(AZIMUTH_CLASSES):
            raise ValueError(f"azimuth class {self.azim_class} out of range")
        if not 0 <= self.elev_class < len(ELEVATION_CLASSES):
            raise ValueError(f"elevation class {self.elev_class} out of range")


def nearest_class_labels(azim_deg: float, elev_deg: float) -> DoaLabel:
    """Nearest grid class; azimuth wraps at 360 and exact midpoints go to the
    lower class index."""
    if not 0.0 <= azim_deg < 360.0:
        raise ValueError(f"azimuth {azim_deg} outside [0, 360)")
    if not -90.0 <= elev_deg <= 90.0:
        raise ValueError(f"elevation {elev_deg} outside [-90, 90]")
    diff = np.abs(azim_deg - np.asarray(AZIMUTH_CLASSES)) % 360.0
    diff = np.minimum(diff, 360.0 - diff)
    elev = np.abs(elev_deg - np.asarray(ELEVATION_CLASSES))
    return DoaLabel(int(np.argmin(diff)), int(np.argmin(elev)))


@dataclass(frozen=True)
class RoomSpec:
    dims: tuple[float, float, float]
    rt60s: tuple[float, ...]


@dataclass(frozen=True)
class DatasetConfig:
    train_rooms: tuple[RoomSpec, ...]
    test_rooms: tuple[RoomSpec, ...]
    n_train: int
    n_val: int
    n_test: int
    train_positions: int = 8
    test_positions: int = 4
    snr_range: tuple[float, float] = (30.0, 50.0)
    test_snrs: tuple[float, ...] = (30.0, 40.0, 50.0)
    azimuth_range: tuple[float, float] = (0.0, 360.0)
    elevation_range: tuple[float, float] = (-60.0, 90.0)
    distance_range: tuple[float, float] = (0.1, 0.6)
    real_fraction: float = 0.0
    corpus: str | None = None
    test_corpus: str | None = None
    clearance_m: float = 1.0
    warmup_s: float = 0.5
    scene_s: float = 1.5
    array_diameter: float = 0.025
    seed: int = 0
    fs: int = FS
    # class-level disjointness of real noises between train/val and test
    disjoint_noise_classes: bool = False

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        lo, hi = self.snr_range
        if lo > hi:
            raise ValueError("snr_range must be (low, high)")
        a0, a1 = self.azimuth_range
        if not (0 <= a0 < a1 <= 360):
            raise ValueError("azimuth_range must sit inside [0, 360]")
        e0, e1 = self.elevation_range
        if not (-90 <= e0 < e1 <= 90):
            raise ValueError("elevation_range must sit inside [-90, 90]")
        d0, d1 = self.distance_range
        if not (0 < d0 <= d1):
            raise ValueError("distance_range must be positive and ordered")
        if not 0.0 <= self.real_fraction <= 1.0:
            raise ValueError("real_fraction must lie in [0, 1]")
        if self.real_fraction > 0 and not self.corpus:
            raise ValueError("real_fraction > 0 requires a noise corpus directory")
        if self.scene_s < self.warmup_s + FRAME_LEN / self.fs:
            raise ValueError("scene too short for warm-up plus one frame")
        if not self.train_rooms or not self.test_rooms:
            raise ValueError("at least one train and one test room are required")

    def counts(self) -> dict:
        out = {}
        for split, n in (("train", self.n_train), ("val", self.n_val), ("test", self.n_test)):
            real = int(round(n * self.real_fraction))
            out[split] = {"total": n, "synthetic": n - real, "real": real}
        return out

    @classmethod
    def full_scale(cls, corpus: str | None = "urbansound8k/", seed: int = 0) -> "DatasetConfig":
        rooms = (RoomSpec((6.0, 4.0, 3.0), (0.1, 0.2, 0.3)),
                 RoomSpec((12.0, 8.0, 3.5), (0.4, 0.5, 0.6)),
                 RoomSpec((16.0, 14.0, 4.0), (0.7, 0.8, 0.9)))
        return cls(train_rooms=rooms, test_rooms=(RoomSpec((11.0, 9.0, 3.2), (0.48,)),),
                   n_train=46080, n_val=5760, n_test=4800, real_fraction=1 / 6,
                   corpus=corpus, test_corpus=corpus, seed=seed)

    @classmethod
    def desk_scale(cls, seed: int = 0, n_train: int = 2000, n_val: int = 400, n_test: int = 400) -> "DatasetConfig":
        return cls(train_rooms=(RoomSpec((12.0, 8.0, 3.5), (0.2, 0.4)),),
                   test_rooms=(RoomSpec((11.0, 9.0, 3.2), (0.48,)),),
                   n_train=n_train, n_val=n_val, n_test=n_test, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_rooms"] = [asdict(r) for r in self.train_rooms]
        d["test_rooms"] = [asdict(r) for r in self.test_rooms]
        return d


def draw_band(rng: np.random.Generator, lo: float = 20.0, hi: float = 2020.0, min_width: float = 100.0):
    """``(a, b)`` uniform over the region ``lo <= a < b <= hi``, ``b - a >= min_width``."""
    while True:
        a, b = np.sort(rng.uniform(lo, hi, 2))
        if b - a >= min_width:
            return float(a), float(b)


def synth_noise_bank(count: int, duration_s: float, fs: float = FS, rng: np.random.Generator | None = None):
    """``count`` band-limited noises with random bands inside 20-2020 Hz
    (width at least 100 Hz).  Returns ``(signals, bands)``."""
    if count <= 0:
        raise ValueError("count must be positive")
    if rng is None:
        raise ValueError("rng is required")
    bands = [draw_band(rng) for _ in range(count)]
    return [bandlimited_noise(lo, hi, duration_s, fs, rng) for lo, hi in bands], bands


def _load_wav(path: Path, fs: int) -> np.ndarray:
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data.astype(float) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        x = data.astype(float)
    elif data.dtype == np.int32:
        x = data.astype(float) / 2147483648.0
    else:
        raise ValueError(f"unsupported sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if rate != fs:
        g = math.gcd(int(rate), int(fs))
        x = resample_poly(x, fs // g, rate // g)
    return x


def ingest_wav_corpus(directory, fs: int = FS, min_s: float = 0.5) -> list[tuple[str, np.ndarray]]:
    """Mono, ``fs``-resampled, peak-normalized (0.5) clips from every WAV in
    ``directory``, sorted by relative path.  Unreadable files are skipped."""
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"noise corpus {root} is not a directory")
    clips = []
    for path in sorted(root.rglob("*")):
        if path.suffix.lower() != ".wav" or not path.is_file():
            continue
        try:
            x = _load_wav(path, fs)
        except Exception as exc:  # noqa: BLE001 - any decode failure means skip
            log.warning("skipping unreadable %s: %s", path, exc)
            continue
        if x.size < min_s * fs:
            log.warning("skipping %s: %.3f s is shorter than %.1f s", path, x.size / fs, min_s)
            continue
        peak = np.max(np.abs(x))
        if peak == 0:
            log.warning("skipping silent %s", path)
            continue
        clips.append((str(path.relative_to(root)), 0.5 * x / peak))
    if not clips:
        raise ValueError(f"no usable WAV clips under {root}")
    return clips


def _noise_class(name: str) -> str:
    # UrbanSound8K-style names "<fsID>-<classID>-..." ; otherwise the parent folder
    stem = Path(name).stem.split("-")
    if len(stem) >= 2 and stem[1].isdigit():
        return stem[1]
    return str(Path(name).parent)


def array_center(room: Room, rng: np.random.Generator, clearance: float, margin: float = 0.0):
    """Rejection-sample an array center at least ``clearance`` from every surface."""
    lo = clearance + margin
    hi = np.asarray(room.dims) - clearance - margin
    if np.any(hi <= lo):
        raise ValueError(f"room {room.dims} cannot give {clearance} m clearance")
    for _ in range(1000):
        p = rng.uniform(0.0, 1.0, 3) * np.asarray(room.dims)
        if room.clearance(p) > lo:
            return p
    raise RuntimeError("array position sampling did not converge")


@dataclass
class _SplitPlan:
    name: str
    rooms: tuple[RoomSpec, ...]
    n_positions: int
    group: int  # positions are drawn per group; train and val share one


def _plans(cfg: DatasetConfig):
    return {
        "train": _SplitPlan("train", cfg.train_rooms, cfg.train_positions, 0),
        "val": _SplitPlan("val", cfg.train_rooms, cfg.train_positions, 0),
        "test": _SplitPlan("test", cfg.test_rooms, cfg.test_positions, 1),
    }


def array_positions(cfg: DatasetConfig, plan: _SplitPlan):
    out = []
    for ri, rs in enumerate(plan.rooms):
        room = Room(rs.dims, max(rs.rt60s))
        rng = np.random.default_rng([cfg.seed, 7919, plan.group, ri])
        out.append([array_center(room, rng, cfg.clearance_m) for _ in range(plan.n_positions)])
    return out


_SPLIT_ID = {"train": 0, "val": 1, "test": 2}


def make_sample(cfg: DatasetConfig, split: str, index: int, positions, clips=None):
    """Render sample ``index`` of ``split``; returns ``(frame, label_row)``.

    The generator is derived from (seed, split, index) alone, so samples can
    be produced in any order or in parallel.
    """
    plan = _plans(cfg)[split]
    rng = np.random.default_rng([cfg.seed, _SPLIT_ID[split], index])
    ri = int(rng.integers(len(plan.rooms)))
    rs = plan.rooms[ri]
    rt60 = float(rs.rt60s[int(rng.integers(len(rs.rt60s)))])
    pi = int(rng.integers(plan.n_positions))
    center = positions[ri][pi]
    az = float(rng.uniform(*cfg.azimuth_range)) % 360.0
    el = float(rng.uniform(*cfg.elevation_range))
    dist = float(rng.uniform(*cfg.distance_range))
    if split == "test":
        snr = float(cfg.test_snrs[int(rng.integers(len(cfg.test_snrs)))])
    else:
        snr = float(rng.uniform(*cfg.snr_range))
    n_scene = int(round(cfg.scene_s * cfg.fs))
    real = clips is not None and len(clips) > 0 and rng.uniform() < cfg.real_fraction
    if real:
        noise_id = int(rng.integers(len(clips)))
        clip = clips[noise_id][1]
        start = int(rng.integers(max(clip.size - n_scene, 0) + 1))
        x = np.resize(clip[start:], n_scene) if clip.size - start < n_scene else clip[start:start + n_scene]
        x = x / (np.std(x) + 1e-12)
    else:
        lo, hi = draw_band(rng)
        noise_id = -1
        x = bandlimited_noise(lo, hi, cfg.scene_s, cfg.fs, rng)
    room = Room(rs.dims, rt60)
    arr = make_tetrahedral_array(center, cfg.array_diameter)
    src = place_source(arr, SourcePlacement(az, el, dist))
    if not room.contains(src):
        raise ValueError(f"source {src} falls outside room {rs.dims}")
    rirs = array_rirs(room, src, arr, cfg.fs)
    sig = render_mic_signals(x, rirs, snr, rng)
    w0 = int(round(cfg.warmup_s * cfg.fs))
    start = int(rng.integers(w0, n_scene - FRAME_LEN + 1))
    frame = sig[:, start:start + FRAME_LEN]
    lab = nearest_class_labels(az, el)
    row = np.array([lab.azim_class, lab.elev_class, az, el, dist, ri, pi, rt60, snr, float(real), noise_id])
    return frame, row


def _work(args):
    cfg, split, idx, positions, clips = args
    try:
        return idx, make_sample(cfg, split, idx, positions, clips), None
    except Exception as exc:  # noqa: BLE001 - failures are counted, not fatal
        return idx, None, f"{type(exc).__name__}: {exc}"


def _split_clips(cfg: DatasetConfig):
    if cfg.real_fraction <= 0:
        return None, None
    train = ingest_wav_corpus(cfg.corpus, cfg.fs)
    if cfg.test_corpus and Path(cfg.test_corpus).resolve() != Path(cfg.corpus).resolve():
        test = ingest_wav_corpus(cfg.test_corpus, cfg.fs)
    else:
        # one corpus: hold out every 6th file (or class) for testing
        keys = sorted({_noise_class(n) for n, _ in train}) if cfg.disjoint_noise_classes else None
        if keys:
            held = set(keys[::6])
            test = [c for c in train if _noise_class(c[0]) in held]
            train = [c for c in train if _noise_class(c[0]) not in held]
        else:
            test = train[::6]
            train = [c for i, c in enumerate(train) if i % 6]
    if not train or not test:
        raise ValueError("noise corpus too small to split between train and test")
    return train, test


def build_dataset(cfg: DatasetConfig, out_dir, threads: int = 1, max_failure_rate: float = 0.01) -> dict:
    """Generate all splits into ``out_dir`` and write ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_clips, test_clips = _split_clips(cfg)
    plans = _plans(cfg)
    manifest = {"kind": "dataset", "config": cfg.to_dict(), "label_columns": list(LABEL_COLUMNS),
                "planned_counts": cfg.counts(), "splits": {}}
    for split in SPLITS:
        n = getattr(cfg, f"n_{split}")
        positions = array_positions(cfg, plans[split])
        clips = test_clips if split == "test" else train_clips
        jobs = [(cfg, split, i, positions, clips) for i in range(n)]
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as ex:
                results = list(ex.map(_work, jobs, chunksize=16))
        else:
            results = [_work(j) for j in jobs]
        failures = [(i, msg) for i, res, msg in results if res is None]
        if len(failures) > max_failure_rate * n:
            raise RuntimeError(f"{split}: {len(failures)}/{n} samples failed, first: {failures[0][1]}")
        for i, msg in failures:
            log.warning("%s sample %d failed: %s", split, i, msg)
        ok = [res for _, res, _ in results if res is not None]
        frames = np.stack([f for f, _ in ok]).astype(np.float32)
        labels = np.stack([r for _, r in ok])
        h_frames = tensorio.write_tensor(out / f"{split}_frames.bin", frames, "f32")
        h_labels = tensorio.write_tensor(out / f"{split}_labels.bin", labels, "f64")
        hist = Counter((int(a), int(b)) for a, b in labels[:, :2])
        manifest["splits"][split] = {
            "count": int(len(ok)),
            "failures": [{"index": i, "error": m} for i, m in failures],
            "synthetic": int(np.sum(labels[:, 9] == 0)),
            "real": int(np.sum(labels[:, 9] == 1)),
            "class_histogram": {f"{a},{b}": hist[(a, b)] for a, b in sorted(hist)},
            "frames_sha256": h_frames,
            "labels_sha256": h_labels,
            "array_positions": [[list(map(float, p)) for p in room] for room in positions],
        }
    manifest["content_hash"] = tensorio.canonical_hash(
        [manifest["splits"][s][k] for s in SPLITS for k in ("frames_sha256", "labels_sha256")])
    manifest["manifest_hash"] = tensorio.write_manifest(out / "manifest.json", manifest)
    return manifest


@dataclass
class Dataset:
    """One split loaded from disk; features are computed per access."""

    frames: np.ndarray  # (N, J, 8000)
    labels: np.ndarray  # (N, len(LABEL_COLUMNS))
    log_magnitude: bool = False
    normalize: str = "relative"

    @classmethod
    def load(cls, directory, split: str, **kw) -> "Dataset":
        d = Path(directory)
        return cls(tensorio.read_tensor(d / f"{split}_frames.bin"),
                   tensorio.read_tensor(d / f"{split}_labels.bin"), **kw)

    def __len__(self):
        return len(self.frames)

    @property
    def azim(self) -> np.ndarray:
        return self.labels[:, 0].astype(int)

    @property
    def elev(self) -> np.ndarray:
        return self.labels[:, 1].astype(int)

    def feature(self, i: int) -> np.ndarray:
        f = features(np.asarray(self.frames[i], dtype=float), log_magnitude=self.log_magnitude)
        return normalize_magnitude(f, self.normalize)

    def batch(self, idx) -> np.ndarray:
        return np.stack([self.feature(i) for i in idx])

    def subset(self, mask) -> "Dataset":
        return replace(self, frames=self.frames[mask], labels=self.labels[mask])
