"""Frame-synchronized cancellation simulations of the 4x1x1 system.

The controller produces ``y(n)`` every sample.  For the directional
method a co-processor classifies each completed 0.5 s reference frame and
the controller adopts the selected filter set at the next frame boundary.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anc import (POLE_CLASS, AncGeometry, ControlFilterLibrary, FxlmsConfig,
                  FxlmsState, fixed_filter_output, run_fxlms, secondary_output)
from .dataset import _load_wav
from .doa_net import Checkpoint, argmax_classes, forward
from .dsp import FRAME_LEN, FS, bandlimited_noise, features, noise_reduction_series, normalize_magnitude, psd
from .room import SourcePlacement

log = logging.getLogger(__name__)

METHODS = ("off", "fxlms", "sfanc", "dsfanc")
CROSSFADE_SAMPLES = 64


@dataclass
class Scenario:
    geometry: AncGeometry
    placement: SourcePlacement
    noise_band: tuple[float, float] | None = (100.0, 700.0)
    noise_wav: str | None = None
    snr_db: float | None = 40.0
    duration_s: float = 10.0
    method: str = "dsfanc"
    step_size: float = 1e-4
    filter_length: int = 1024
    fixed_direction: tuple[float, float] = (0.0, 30.0)
    crossfade: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.duration_s < 1.0:
            raise ValueError("scenario duration must be at least 1 s")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.noise_wav is None and self.noise_band is None:
            raise ValueError("scenario needs a noise band or a WAV file")
        self.geometry.source_position(self.placement)

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.geometry.fs))

    def to_dict(self) -> dict:
        return {"geometry": self.geometry.to_dict(),
                "placement": [self.placement.azimuth_deg, self.placement.elevation_deg, self.placement.distance_m],
                "noise_band": list(self.noise_band) if self.noise_band else None, "noise_wav": self.noise_wav,
                "snr_db": self.snr_db, "duration_s": self.duration_s, "method": self.method,
                "step_size": self.step_size, "filter_length": self.filter_length,
                "fixed_direction": list(self.fixed_direction),
                "crossfade": self.crossfade, "seed": self.seed}


@dataclass
class Selection:
    frame: int          # frame whose references were classified
    active_from: int    # sample index at which the selection takes effect
    azim_class: int
    elev_class: int
    p_azim: np.ndarray
    p_elev: np.ndarray


@dataclass
class SimResult:
    method: str
    d: np.ndarray
    e: np.ndarray
    fs: int = FS
    selections: list = field(default_factory=list)
    swaps: list = field(default_factory=list)  # (sample index, (a, b)) of every filter change

    @property
    def nr_series(self) -> np.ndarray:
        return noise_reduction_series(self.d, self.e, 0.5, self.fs)

    def psd(self):
        return psd(self.e, self.fs)

    def summary(self) -> dict:
        nr = self.nr_series
        return {"method": self.method, "mean_nr_db": float(np.mean(nr)), "first_window_nr_db": float(nr[0]),
                "second_window_nr_db": float(nr[1]) if nr.size > 1 else float("nan"),
                "final_window_nr_db": float(nr[-1]), "overall_nr_db": float(_overall_nr(self.d, self.e))}


def _overall_nr(d, e) -> float:
    pd, pe = np.sum(d * d), np.sum(e * e)
    return 10.0 * np.log10(pd / max(pe, pd * 1e-12))


def load_noise(sc: Scenario, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance source signal of the scenario duration."""
    n = sc.n_samples
    if sc.noise_wav:
        x = _load_wav(Path(sc.noise_wav), sc.geometry.fs)
        x = np.resize(x, n) if x.size < n else x[:n]
    else:
        x = bandlimited_noise(sc.noise_band[0], sc.noise_band[1], sc.duration_s, sc.geometry.fs, rng)
    x = x - x.mean()
    return x / (x.std() + 1e-12)


def render_scenario(sc: Scenario):
    """References and disturbance for ``sc``; identical for every method
    under the same seed."""
    rng = np.random.default_rng([sc.seed, 1])
    x = load_noise(sc, rng)
    return sc.geometry.render(x, sc.placement, sc.snr_db, np.random.default_rng([sc.seed, 2]))


def check_grid(checkpoint: Checkpoint, library: ControlFilterLibrary):
    if checkpoint.grid != library.grid:
        raise ValueError(f"checkpoint grid {checkpoint.grid} does not match library grid {library.grid}")


def coprocessor_select(frame, checkpoint: Checkpoint, library: ControlFilterLibrary):
    """Classify one ``(J, 8000)`` reference frame and look up its filter set.

    Returns ``(a, b, ControlFilterSet, DoaPrediction)``.
    """
    check_grid(checkpoint, library)
    feat = features(frame, log_magnitude=checkpoint.log_magnitude)
    feat = normalize_magnitude(feat, checkpoint.normalize)
    pred, _ = forward(feat, checkpoint.params)
    a, b = argmax_classes(pred)
    return a, b, library.lookup(a, b), pred


def _segment_output(weights, refs, start, stop) -> np.ndarray:
    L = weights.shape[1]
    lo = max(0, start - L + 1)
    return fixed_filter_output(weights, refs[:, lo:stop])[start - lo:]


def run_directional(refs, checkpoint: Checkpoint, library: ControlFilterLibrary, crossfade: bool = False,
                    frame_len: int = FRAME_LEN):
    """Control signal of the directional method plus its selection and
    swap logs.  Frame 0 runs on the pole entry."""
    check_grid(checkpoint, library)
    n = refs.shape[1]
    active_key = (0, POLE_CLASS)
    active = library.lookup(*active_key)
    y = np.zeros(n)
    selections, swaps = [], [(0, active_key)]
    prev = None
    for k in range(0, (n + frame_len - 1) // frame_len):
        start, stop = k * frame_len, min((k + 1) * frame_len, n)
        seg = _segment_output(active.weights, refs, start, stop)
        if crossfade and prev is not None and prev is not active:
            m = min(CROSSFADE_SAMPLES, stop - start)
            old = _segment_output(prev.weights, refs, start, start + m)
            ramp = np.arange(1, m + 1) / m
            seg[:m] = (1.0 - ramp) * old + ramp * seg[:m]
        y[start:stop] = seg
        prev = active
        if stop - start == frame_len and stop < n:
            # co-processor sees the completed frame; its choice applies from the next boundary
            a, b, chosen, pred = coprocessor_select(refs[:, start:stop], checkpoint, library)
            selections.append(Selection(k, stop, a, b, pred.p_azim, pred.p_elev))
            key = (0, POLE_CLASS) if b == POLE_CLASS else (a, b)
            if key != active_key:
                swaps.append((stop, key))
            active_key, active = key, chosen
    return y, selections, swaps


def run_scenario(sc: Scenario, library: ControlFilterLibrary | None = None,
                 checkpoint: Checkpoint | None = None, rendered=None) -> SimResult:
    refs, d = rendered if rendered is not None else render_scenario(sc)
    s = sc.geometry.secondary_path()
    if sc.method == "off":
        return SimResult("off", d, d.copy(), sc.geometry.fs)
    if sc.method == "fxlms":
        cfg = FxlmsConfig(sc.step_size, sc.filter_length, s)
        state = FxlmsState(refs.shape[0], cfg)
        return SimResult("fxlms", d, run_fxlms(state, refs, d, cfg), sc.geometry.fs)
    if library is None:
        raise ValueError(f"method {sc.method!r} needs a control filter library")
    if sc.method == "sfanc":
        fixed = library.nearest(*sc.fixed_direction)
        y = fixed_filter_output(fixed.weights, refs)
        return SimResult("sfanc", d, d - secondary_output(y, s), sc.geometry.fs,
                         swaps=[(0, (fixed.azimuth_deg, fixed.elevation_deg))])
    if checkpoint is None:
        raise ValueError("the directional method needs a trained CNN checkpoint")
    y, selections, swaps = run_directional(refs, checkpoint, library, sc.crossfade)
    return SimResult("dsfanc", d, d - secondary_output(y, s), sc.geometry.fs, selections, swaps)


def compare_methods(sc: Scenario, methods=METHODS, library=None, checkpoint=None) -> dict[str, SimResult]:
    """Run each method on the identical rendered signals."""
    rendered = render_scenario(sc)
    out = {}
    for m in methods:
        sc_m = Scenario(**{**sc.__dict__, "method": m})
        out[m] = run_scenario(sc_m, library, checkpoint, rendered)
    return out
