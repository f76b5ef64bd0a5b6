"""Key-value experiment configuration shared by every subcommand.

One ``key = value`` per line; ``#`` starts a comment.  A ``[section]``
line prefixes the keys that follow (``[dataset]`` then ``n_train = 10``
is ``dataset.n_train``).  Unknown keys are errors.  Lists are
comma-separated; room lists separate rooms with ``;`` and write each room
as ``LxWxH``; RT60 lists give one comma list per room, also ``;``-separated.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: int | None = None):
        self.source, self.line = source, line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _rooms(text: str):
    out = []
    for part in text.split(";"):
        dims = tuple(float(v) for v in part.lower().replace("*", "x").split("x"))
        if len(dims) != 3:
            raise ValueError(f"room {part.strip()!r} must be LxWxH")
        out.append(dims)
    return tuple(out)


def _groups(text: str):
    return tuple(_floats(part) for part in text.split(";"))


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def _opt_float(text: str):
    return None if text.strip().lower() in ("none", "") else float(text)


def _words(text: str) -> tuple[str, ...]:
    return tuple(w.strip() for w in text.split(",") if w.strip())


_PARSERS = {"int": int, "float": float, "str": str.strip, "bool": _bool, "floats": _floats,
            "rooms": _rooms, "groups": _groups, "opt_float": _opt_float, "words": _words}


@dataclass(frozen=True)
class Option:
    kind: str
    default: str
    help: str


SCHEMA: dict[str, Option] = {
    "seed": Option("int", "0", "master seed; --seed overrides"),
    # dataset build
    "dataset.train_rooms": Option("rooms", "12x8x3.5", "train/validation rooms"),
    "dataset.train_rt60": Option("groups", "0.2, 0.4", "RT60 values per train room"),
    "dataset.test_rooms": Option("rooms", "11x9x3.2", "test rooms"),
    "dataset.test_rt60": Option("groups", "0.48", "RT60 values per test room"),
    "dataset.train_positions": Option("int", "8", "array positions per train room"),
    "dataset.test_positions": Option("int", "4", "array positions per test room"),
    "dataset.snr_range": Option("floats", "30, 50", "train/val SNR range (dB)"),
    "dataset.test_snrs": Option("floats", "30, 40, 50", "test SNR levels (dB)"),
    "dataset.azimuth_range": Option("floats", "0, 360", "source azimuth range (deg)"),
    "dataset.elevation_range": Option("floats", "-60, 90", "source elevation range (deg)"),
    "dataset.distance_range": Option("floats", "0.1, 0.6", "source distance range (m)"),
    "dataset.n_train": Option("int", "2000", "training samples"),
    "dataset.n_val": Option("int", "400", "validation samples"),
    "dataset.n_test": Option("int", "400", "test samples"),
    "dataset.real_fraction": Option("float", "0", "fraction of samples using corpus noise"),
    "dataset.corpus": Option("str", "", "WAV directory of real noises"),
    "dataset.test_corpus": Option("str", "", "separate WAV directory for the test split"),
    "dataset.disjoint_noise_classes": Option("bool", "false", "hold out whole noise classes for test"),
    "dataset.clearance": Option("float", "1.0", "array-to-surface clearance (m)"),
    "dataset.warmup_s": Option("float", "0.5", "reverberant warm-up before a frame may start (s)"),
    "dataset.scene_s": Option("float", "1.5", "rendered scene length (s)"),
    # CNN
    "cnn.epochs": Option("int", "20", "training epochs"),
    "cnn.batch": Option("int", "32", "minibatch size"),
    "cnn.micro_batch": Option("int", "4", "samples per forward/backward chunk (memory bound)"),
    "cnn.lr": Option("float", "1e-3", "Adam learning rate"),
    "cnn.dtype": Option("str", "f64", "compute precision, f64 or f32"),
    "cnn.log_magnitude": Option("bool", "false", "log1p magnitude features"),
    "cnn.normalize": Option("str", "relative", "magnitude input normalization: relative, pooled or none"),
    "cnn.channels": Option("floats", "16, 32, 64", "conv widths"),
    "cnn.groups": Option("floats", "4, 8, 8", "GroupNorm groups per conv module"),
    "cnn.max_minutes": Option("opt_float", "none", "training budget; stop before an epoch that would exceed it"),
    # acoustics shared by filters pretrain / sim run / report
    "room.dims": Option("floats", "11, 9, 3.2", "room dimensions (m)"),
    "room.rt60": Option("float", "0.48", "reverberation time (s)"),
    "room.speed_of_sound": Option("float", "343", "speed of sound (m/s)"),
    "array.center": Option("floats", "4.0, 4.5, 1.5", "reference array center (m)"),
    "array.diameter": Option("float", "0.025", "tetrahedral array diameter (m)"),
    "array.rotation_deg": Option("float", "0", "array yaw about +z (deg)"),
    "anc.error_offset": Option("floats", "0.519615, 0.3, 0", "error mic minus array center (m)"),
    "anc.secondary_offset": Option("floats", "0.0866025, 0.05, 0", "secondary source minus error mic (m)"),
    "anc.source_distance": Option("float", "0.2", "library source distance (m)"),
    "anc.secondary_length": Option("int", "512", "secondary path taps"),
    "anc.filter_length": Option("int", "1024", "control filter taps"),
    "anc.step_size": Option("float", "1e-4", "FxLMS step size"),
    "filters.band": Option("floats", "20, 2020", "pre-training noise band (Hz)"),
    "filters.max_seconds": Option("float", "40", "pre-training cap (s of signal)"),
    "filters.plateau_db": Option("float", "0.1", "convergence: NR gain threshold (dB)"),
    "filters.plateau_seconds": Option("int", "5", "convergence: look-back (s)"),
    # simulation
    "sim.azimuth": Option("float", "120", "noise source azimuth (deg)"),
    "sim.elevation": Option("float", "30", "noise source elevation (deg)"),
    "sim.distance": Option("float", "0.2", "noise source distance (m)"),
    "sim.band": Option("floats", "100, 700", "band of synthetic source noise (Hz)"),
    "sim.wav": Option("str", "", "WAV source noise; overrides sim.band"),
    "sim.duration": Option("float", "10", "scenario length (s)"),
    "sim.snr": Option("opt_float", "40", "reference-mic SNR (dB) or none"),
    "sim.methods": Option("words", "off, fxlms, sfanc, dsfanc", "methods to compare"),
    "sim.fixed_direction": Option("floats", "0, 30", "training direction of the single fixed filter"),
    "sim.crossfade": Option("bool", "false", "64-sample linear crossfade on filter swaps"),
    "sim.save_traces": Option("bool", "false", "write d(n)/e(n) traces to traces.csv"),
    "report.wav": Option("str", "", "WAV noise for the off-grid real-noise scenario"),
}

REQUIRED = {
    "filters": ("room.dims", "room.rt60"),
    "sim": ("room.dims", "room.rt60"),
}


class Config(dict):
    """Resolved configuration: every schema key mapped to its parsed value.

    ``explicit`` holds the keys that appeared in the file.
    """

    def __init__(self, values: dict, explicit: set, source: str = "<config>"):
        super().__init__(values)
        self.explicit = set(explicit)
        self.source = source

    def require(self, command: str):
        missing = [k for k in REQUIRED.get(command, ()) if k not in self.explicit]
        if missing:
            raise ConfigError(f"'{command}' needs {', '.join(missing)} in the config", self.source)

    def raw(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self.items())}


def parse_config(text: str, source: str = "<config>") -> Config:
    raw: dict[str, tuple[str, int]] = {}
    prefix = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            prefix = stripped[1:-1].strip()
            prefix = prefix + "." if prefix else ""
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", source, lineno)
        key, value = (s.strip() for s in stripped.split("=", 1))
        key = prefix + key
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", source, lineno)
        if key in raw:
            raise ConfigError(f"duplicate key {key!r} (first set on line {raw[key][1]})", source, lineno)
        raw[key] = (value, lineno)
    values = {}
    for key, opt in SCHEMA.items():
        text_value, lineno = raw.get(key, (opt.default, None))
        try:
            values[key] = _PARSERS[opt.kind](text_value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r} ({opt.kind}): {exc}", source, lineno) from None
    return Config(values, set(raw), source)


def load_config(path) -> Config:
    if path is None:
        return parse_config("", "<defaults>")
    p = Path(path)
    return parse_config(p.read_text(), str(p))


def describe_schema() -> str:
    lines = []
    for key, opt in SCHEMA.items():
        lines.append(f"{key} = {opt.default}    # {opt.kind}: {opt.help}")
    return "\n".join(lines)
