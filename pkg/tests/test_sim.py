import numpy as np
import pytest

from conftest import constant_checkpoint, random_library, small_geometry, washer_wav
from dsfanc.anc import POLE_CLASS
from dsfanc.cli import read_csv, write_sim_outputs
from dsfanc.room import SourcePlacement
from dsfanc.sim import (CROSSFADE_SAMPLES, Scenario, compare_methods, load_noise, render_scenario, run_directional,
                        run_scenario)

FS = 16000


def fir_sum(weights, refs):
    # y(n) = sum_j sum_l w_j(l) r_j(n - l)
    return sum(np.convolve(refs[j], weights[j])[:refs.shape[1]] for j in range(refs.shape[0]))


def scenario(**kw):
    base = dict(placement=SourcePlacement(120.0, 30.0, 0.2), duration_s=2.0, step_size=1e-3, filter_length=128,
                seed=4)
    return Scenario(small_geometry(), **(base | kw))


@pytest.fixture(scope="module")
def library():
    return random_library()


def test_render_identical_across_methods(library, tmp_path):
    ck = constant_checkpoint(tmp_path, 1, 1)
    res = compare_methods(scenario(), library=library, checkpoint=ck)
    assert list(res) == ["off", "fxlms", "sfanc", "dsfanc"]
    for r in res.values():
        np.testing.assert_array_equal(r.d, res["off"].d)
    np.testing.assert_array_equal(res["off"].e, res["off"].d)
    assert res["off"].summary()["mean_nr_db"] == 0.0
    # the same seed renders the same signals again
    refs, d = render_scenario(scenario())
    np.testing.assert_array_equal(d, res["off"].d)


def test_sfanc_uses_nearest_fixed_filter(library):
    sc = scenario(method="sfanc", fixed_direction=(10.0, 35.0))
    r = run_scenario(sc, library)
    refs, d = render_scenario(sc)
    s = sc.geometry.secondary_path()
    w = library.lookup(0, 1).weights
    expected = d - np.convolve(fir_sum(w, refs), s.taps)[:d.size]
    np.testing.assert_allclose(r.e, expected, atol=1e-12)


def test_directional_frame0_pole_then_selection(library, tmp_path):
    ck = constant_checkpoint(tmp_path, 2, 1)
    refs, _ = render_scenario(scenario())
    y, sel, swaps = run_directional(refs, ck, library)
    pole, chosen = library.lookup(0, POLE_CLASS).weights, library.lookup(2, 1).weights
    np.testing.assert_allclose(y[:8000], fir_sum(pole, refs)[:8000], atol=1e-12)
    np.testing.assert_allclose(y[8000:], fir_sum(chosen, refs)[8000:], atol=1e-12)
    # 4 frames: frames 0..2 are classified, each effective at the next boundary
    assert [(s.frame, s.active_from, s.azim_class, s.elev_class) for s in sel] == [
        (0, 8000, 2, 1), (1, 16000, 2, 1), (2, 24000, 2, 1)]
    assert swaps == [(0, (0, POLE_CLASS)), (8000, (2, 1))]
    assert all(idx % 8000 == 0 for idx, _ in swaps)
    assert sel[0].p_azim[2] > 0.99 and abs(sel[0].p_azim.sum() - 1) < 1e-6


def test_directional_pole_prediction_never_swaps(library, tmp_path):
    ck = constant_checkpoint(tmp_path, 4, POLE_CLASS)
    refs, _ = render_scenario(scenario())
    y, sel, swaps = run_directional(refs, ck, library)
    assert swaps == [(0, (0, POLE_CLASS))]
    np.testing.assert_allclose(y, fir_sum(library.lookup(0, POLE_CLASS).weights, refs), atol=1e-12)


def test_crossfade(library, tmp_path):
    ck = constant_checkpoint(tmp_path, 3, 2)
    refs, _ = render_scenario(scenario())
    hard, _, _ = run_directional(refs, ck, library)
    soft, _, _ = run_directional(refs, ck, library, crossfade=True)
    old = fir_sum(library.lookup(0, POLE_CLASS).weights, refs)
    new = fir_sum(library.lookup(3, 2).weights, refs)
    m = CROSSFADE_SAMPLES
    ramp = np.arange(1, m + 1) / m
    np.testing.assert_allclose(soft[8000:8000 + m], (1 - ramp) * old[8000:8000 + m] + ramp * new[8000:8000 + m],
                               atol=1e-12)
    np.testing.assert_array_equal(soft[:8000], hard[:8000])
    np.testing.assert_array_equal(soft[8000 + m:], hard[8000 + m:])
    assert soft[8000 + m - 1] == pytest.approx(hard[8000 + m - 1])


def test_grid_mismatch_rejected(library, tmp_path):
    ck = constant_checkpoint(tmp_path, 0, 0)
    ck.manifest["grid"] = {"azimuth_classes": [0, 90, 180, 270], "elevation_classes": [90, 0, -60]}
    refs, _ = render_scenario(scenario())
    with pytest.raises(ValueError, match="grid"):
        run_directional(refs, ck, library)


def test_fxlms_learns(library):
    r = run_scenario(scenario(method="fxlms", duration_s=4.0))
    nr = r.nr_series
    assert nr.size == 8 and nr[-1] > nr[0] and nr[-1] > 3.0


@pytest.mark.parametrize("kw", [dict(duration_s=0.5), dict(method="lms"), dict(noise_band=None)])
def test_scenario_validation(kw):
    with pytest.raises(ValueError):
        scenario(**kw)


def test_methods_need_models():
    with pytest.raises(ValueError, match="library"):
        run_scenario(scenario(method="sfanc"))
    with pytest.raises(ValueError, match="checkpoint"):
        run_scenario(scenario(method="dsfanc"), random_library())


def test_wav_noise_source(tmp_path):
    wav = washer_wav(tmp_path / "washer.wav", seconds=1.5)
    sc = scenario(noise_wav=str(wav), noise_band=None, duration_s=3.0)
    x = load_noise(sc, np.random.default_rng(0))
    assert x.size == 3 * FS
    assert abs(x.mean()) < 1e-12 and x.std() == pytest.approx(1.0, rel=1e-9)
    # a 1.5 s clip loops to fill the 3 s scenario
    np.testing.assert_allclose(x[:FS], x[int(1.5 * FS):int(1.5 * FS) + FS], atol=1e-9)
    r = run_scenario(Scenario(**{**sc.__dict__, "method": "fxlms"}))
    assert np.all(np.isfinite(r.e))


def test_output_schema(library, tmp_path):
    ck = constant_checkpoint(tmp_path, 1, 1)
    res = compare_methods(scenario(), library=library, checkpoint=ck)
    write_sim_outputs(tmp_path, "abc", res, save_traces=True)
    mh, header, rows = read_csv(tmp_path / "summary.csv")
    assert mh == "abc"
    assert header == ["method", "mean_nr_db", "first_window_nr_db", "second_window_nr_db", "final_window_nr_db",
                      "overall_nr_db"]
    assert [r[0] for r in rows] == ["off", "fxlms", "sfanc", "dsfanc"]
    _, header, rows = read_csv(tmp_path / "psd.csv")
    assert header == ["frequency_hz", "off", "fxlms", "sfanc", "dsfanc"] and len(rows) == 2049
    _, header, rows = read_csv(tmp_path / "nr.csv")
    assert header[:2] == ["window_index", "time_s"] and len(rows) == 4
    _, header, rows = read_csv(tmp_path / "selections.csv")
    assert len(rows) == 3 and all(r[0] == "dsfanc" for r in rows)
    _, header, rows = read_csv(tmp_path / "traces.csv")
    assert header == ["sample", "d", "e_off", "e_fxlms", "e_sfanc", "e_dsfanc"] and len(rows) == 2 * FS


def test_coprocessor_deterministic_with_real_network(library, tmp_path):
    from dsfanc.doa_net import CnnParams, load_checkpoint, save_checkpoint
    from dsfanc.sim import coprocessor_select

    save_checkpoint(tmp_path / "rand.bin", CnnParams.init(seed=3))
    ck = load_checkpoint(tmp_path / "rand.bin")
    refs, _ = render_scenario(scenario())
    a = coprocessor_select(refs[:, :8000], ck, library)
    b = coprocessor_select(refs[:, :8000].copy(), ck, library)
    assert a[:2] == b[:2] and a[2] is b[2] is library.lookup(*a[:2])
    assert np.array_equal(a[3].p_azim, b[3].p_azim) and np.array_equal(a[3].p_elev, b[3].p_elev)


def test_fixed_filter_chain_is_lti(library, tmp_path):
    sc = scenario(method="sfanc")
    refs, d = render_scenario(sc)
    e1 = run_scenario(sc, library, rendered=(refs, d)).e
    e2 = run_scenario(sc, library, rendered=(2.5 * refs, 2.5 * d)).e
    np.testing.assert_allclose(e2, 2.5 * e1, rtol=1e-10, atol=1e-14)


def test_signal_lengths(library, tmp_path):
    ck = constant_checkpoint(tmp_path, 0, 1)
    sc = scenario(duration_s=1.75)
    for r in compare_methods(sc, library=library, checkpoint=ck).values():
        assert len(r.e) == len(r.d) == 28000
    # three complete frames are classified; the trailing partial frame is not
    assert [s.frame for s in compare_methods(sc, ("dsfanc",), library, ck)["dsfanc"].selections] == [0, 1, 2]
