import time

import numpy as np
import pytest

from dsfanc.anc import AncGeometry, ControlFilterLibrary, ControlFilterSet, PretrainConfig, _offset, grid_directions
from dsfanc.doa_net import Architecture, CnnParams, save_checkpoint
from dsfanc.room import Room


def small_geometry(rt60=0.15):
    return AncGeometry(Room((4.0, 3.5, 2.8), rt60), (1.8, 1.7, 1.3), tuple(_offset(0.4, 30.0)),
                       tuple(_offset(0.1, 30.0)), secondary_length=128)


SMALL_CFG = PretrainConfig(band=(100, 1500), step_size=1e-3, filter_length=128, max_seconds=8, plateau_seconds=3)


def random_library(n_refs=4, length=128, seed=0, scale=0.05):
    """A library of distinct random filter sets: structure only, no acoustics."""
    rng = np.random.default_rng(seed)
    entries = {k: ControlFilterSet(scale * rng.standard_normal((n_refs, length)), az, el)
               for k, az, el in grid_directions()}
    return ControlFilterLibrary(entries, {"fs": 16000})


def constant_params(azim_class, elev_class):
    """Network whose output ignores the input: zero conv weights, head biases
    put all the mass on the given classes."""
    arch = Architecture(channels=(2,), groups=(1,))
    p = CnnParams.init(arch, seed=0)
    for k in p:
        p[k][...] = 0.0
    p["fc_azim.b"][azim_class] = 20.0
    p["fc_elev.b"][elev_class] = 20.0
    return p


def constant_checkpoint(tmp_path, azim_class, elev_class, name="cnn.bin"):
    from dsfanc.doa_net import load_checkpoint

    save_checkpoint(tmp_path / name, constant_params(azim_class, elev_class))
    return load_checkpoint(tmp_path / name)


def washer_wav(path, fs=44100, seconds=6.0):
    """Stand-in for a recorded washing machine: drum hum with harmonics, slow
    load modulation and broadband motor noise."""
    from scipy.io import wavfile

    t = np.arange(int(fs * seconds)) / fs
    rng = np.random.default_rng(8)
    x = sum(np.sin(2 * np.pi * f * t + ph) / k
            for k, (f, ph) in enumerate(zip((97.0, 194.0, 291.0, 388.0, 485.0), rng.uniform(0, 6.28, 5)), 1))
    x = x * (1 + 0.3 * np.sin(2 * np.pi * 0.8 * t))
    x = x + 0.3 * np.convolve(rng.standard_normal(t.size), np.ones(8) / 8, "same")
    wavfile.write(path, fs, (x / np.abs(x).max() * 20000).astype(np.int16))
    return path


# one PASS/FAIL line per acceptance criterion, echoed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


# acoustics of the desk room; every other key keeps its default
DESK_ROOM = "room.dims = 11, 9, 3.2\nroom.rt60 = 0.48\n"

# desk-scale DoA run: 2000/400 samples from one room at RT60 0.2 and 0.4
DESK_CNN = """
dataset.train_rooms = 12x8x3.5
dataset.train_rt60 = 0.2, 0.4
dataset.n_train = 2000
dataset.n_val = 400
dataset.n_test = 400
cnn.epochs = 30
cnn.max_minutes = 28
cnn.dtype = f32
cnn.micro_batch = 8
"""


def run_cli(*args):
    from dsfanc.cli import main

    t0 = time.perf_counter()
    code = main([str(a) for a in args])
    return code, time.perf_counter() - t0


# desk-scale library, dataset and CNN, built once per session through the CLI
@pytest.fixture(scope="session")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def desk_library(work):
    cfg = work / "room.cfg"
    cfg.write_text(DESK_ROOM)
    code, secs = run_cli("filters", "pretrain", "--config", cfg, "--out-dir", work / "lib")
    assert code == 0
    return work / "lib", secs


@pytest.fixture(scope="session")
def desk_cnn(work):
    cfg = work / "cnn.cfg"
    cfg.write_text(DESK_CNN)
    code, build_s = run_cli("dataset", "build", "--config", cfg, "--out-dir", work / "ds")
    assert code == 0
    code, train_s = run_cli("cnn", "train", "--config", cfg, "--dataset", work / "ds", "--out-dir", work / "cnn")
    assert code == 0
    return work / "cnn", build_s, train_s
