"""``dsfanc`` command line.

Subcommands: ``dataset build``, ``cnn train``, ``cnn eval``,
``filters pretrain``, ``sim run`` and ``report``.  Exit status is 0 on
success, 1 on a validation error (bad config or arguments, grid
mismatch) and 2 on a runtime failure (divergence, I/O).

Every artifact is deterministic for a given config and seed.  Each output
directory also gets a ``run.json`` with the run manifest; only that file
carries wall-clock data, and the ``manifest_hash`` quoted in every CSV
covers everything in it except the timing and the input file locations.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .config import ConfigError, describe_schema, load_config

log = logging.getLogger("dsfanc")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


# --- run manifest and CSV output ---------------------------------------------


class RunManifest:
    def __init__(self, command: str, cfg, seed: int, threads: int):
        self.body = {"command": command, "config": cfg.raw(), "seed": seed, "threads_deterministic": threads == 1,
                     "inputs": {}, "tool_version": __version__}
        self.paths = {}
        self.t0 = time.time()

    def add_input(self, name: str, path):
        from .tensorio import file_sha256

        # only the digest is hashed, so relocating an input does not change the outputs
        self.body["inputs"][name] = file_sha256(path)
        self.paths[name] = str(path)

    @property
    def hash(self) -> str:
        from .tensorio import canonical_hash

        return canonical_hash(self.body)

    def write(self, out_dir: Path, outputs: dict, timing: dict | None = None):
        import json

        clock = {"started_unix": self.t0, "elapsed_s": time.time() - self.t0, **(timing or {})}
        doc = {**self.body, "manifest_hash": self.hash, "outputs": outputs, "input_paths": self.paths,
               "wall_clock": clock}
        (out_dir / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def write_csv(path: Path, manifest_hash: str, header, rows):
    lines = [f"# manifest_hash={manifest_hash}", ",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_csv(path):
    """``(manifest_hash, header, rows)`` of a CSV written by this tool; cells stay strings."""
    lines = Path(path).read_text().splitlines()
    mh = lines[0].split("=", 1)[1] if lines and lines[0].startswith("# manifest_hash=") else None
    body = [ln for ln in lines if not ln.startswith("#")]
    return mh, body[0].split(","), [ln.split(",") for ln in body[1:]]


# --- config translation ------------------------------------------------------


def dataset_config(cfg, seed: int):
    from .dataset import DatasetConfig, RoomSpec

    def rooms(dims_key, rt_key):
        dims, rts = cfg[dims_key], cfg[rt_key]
        if len(rts) == 1 and len(dims) > 1:
            rts = rts * len(dims)
        if len(rts) != len(dims):
            raise ConfigError(f"{rt_key} lists {len(rts)} groups for {len(dims)} rooms", cfg.source)
        return tuple(RoomSpec(d, tuple(r)) for d, r in zip(dims, rts))

    return DatasetConfig(
        train_rooms=rooms("dataset.train_rooms", "dataset.train_rt60"),
        test_rooms=rooms("dataset.test_rooms", "dataset.test_rt60"),
        n_train=cfg["dataset.n_train"], n_val=cfg["dataset.n_val"], n_test=cfg["dataset.n_test"],
        train_positions=cfg["dataset.train_positions"], test_positions=cfg["dataset.test_positions"],
        snr_range=tuple(cfg["dataset.snr_range"]), test_snrs=tuple(cfg["dataset.test_snrs"]),
        azimuth_range=tuple(cfg["dataset.azimuth_range"]), elevation_range=tuple(cfg["dataset.elevation_range"]),
        distance_range=tuple(cfg["dataset.distance_range"]), real_fraction=cfg["dataset.real_fraction"],
        corpus=cfg["dataset.corpus"] or None, test_corpus=cfg["dataset.test_corpus"] or None,
        clearance_m=cfg["dataset.clearance"], warmup_s=cfg["dataset.warmup_s"], scene_s=cfg["dataset.scene_s"],
        array_diameter=cfg["array.diameter"], seed=seed,
        disjoint_noise_classes=cfg["dataset.disjoint_noise_classes"])


def geometry(cfg):
    from .anc import AncGeometry
    from .room import Room

    def vec(key):
        v = tuple(cfg[key])
        if len(v) != 3:
            raise ConfigError(f"{key} needs 3 values, got {len(v)}", cfg.source)
        return v

    room = Room(vec("room.dims"), cfg["room.rt60"], cfg["room.speed_of_sound"])
    return AncGeometry(room, vec("array.center"), vec("anc.error_offset"), vec("anc.secondary_offset"),
                       cfg["array.diameter"], cfg["array.rotation_deg"], cfg["anc.source_distance"],
                       cfg["anc.secondary_length"])


def pretrain_config(cfg, seed: int):
    from .anc import PretrainConfig

    return PretrainConfig(tuple(cfg["filters.band"]), cfg["anc.step_size"], cfg["anc.filter_length"],
                          cfg["filters.max_seconds"], cfg["filters.plateau_db"], cfg["filters.plateau_seconds"],
                          seed)


def train_config(cfg, seed: int):
    from .doa_net import TrainConfig

    from .dsp import NORMALIZATIONS

    if cfg["cnn.normalize"] not in NORMALIZATIONS:
        raise ConfigError(f"cnn.normalize must be one of {NORMALIZATIONS}, got {cfg['cnn.normalize']!r}",
                          cfg.source)
    if cfg["cnn.dtype"] not in ("f32", "f64"):
        raise ConfigError(f"cnn.dtype must be f32 or f64, got {cfg['cnn.dtype']!r}", cfg.source)
    mm = cfg["cnn.max_minutes"]
    return TrainConfig(epochs=cfg["cnn.epochs"], batch_size=cfg["cnn.batch"], lr=cfg["cnn.lr"], seed=seed,
                       micro_batch=cfg["cnn.micro_batch"], dtype=cfg["cnn.dtype"],
                       max_seconds=None if mm is None else 60.0 * mm)


def architecture(cfg):
    from .doa_net import Architecture

    ch = tuple(int(c) for c in cfg["cnn.channels"])
    gr = tuple(int(g) for g in cfg["cnn.groups"])
    return Architecture(channels=ch, groups=gr)


def scenario(cfg, seed: int, **override):
    from .room import SourcePlacement
    from .sim import Scenario

    values = dict(
        placement=SourcePlacement(cfg["sim.azimuth"] % 360.0, cfg["sim.elevation"], cfg["sim.distance"]),
        noise_band=tuple(cfg["sim.band"]), noise_wav=cfg["sim.wav"] or None, snr_db=cfg["sim.snr"],
        duration_s=cfg["sim.duration"], step_size=cfg["anc.step_size"], filter_length=cfg["anc.filter_length"],
        fixed_direction=tuple(cfg["sim.fixed_direction"]), crossfade=cfg["sim.crossfade"], seed=seed)
    values.update(override)
    return Scenario(geometry(cfg), **values)


# --- subcommands ---------------------------------------------------------------


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_dataset_build(args, cfg, seed) -> dict:
    from .dataset import build_dataset

    dcfg = dataset_config(cfg, seed)
    out = _out(args)
    rm = RunManifest("dataset build", cfg, seed, args.threads)
    manifest = build_dataset(dcfg, out, threads=args.threads)
    rm.write(out, {"manifest.json": manifest["manifest_hash"]})
    log.info("dataset written to %s: %s", out, {s: v["count"] for s, v in manifest["splits"].items()})
    return manifest


def _dataset_dir(args) -> Path:
    if not args.dataset:
        raise ConfigError("--dataset DIR is required", "<args>")
    d = Path(args.dataset)
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset manifest in {d}")
    return d


def cmd_cnn_train(args, cfg, seed):
    from .dataset import Dataset
    from .doa_net import save_checkpoint, train

    d = _dataset_dir(args)
    out = _out(args)
    rm = RunManifest("cnn train", cfg, seed, args.threads)
    rm.add_input("dataset_manifest", d / "manifest.json")
    kw = {"log_magnitude": cfg["cnn.log_magnitude"], "normalize": cfg["cnn.normalize"]}
    tr, va = Dataset.load(d, "train", **kw), Dataset.load(d, "val", **kw)
    tcfg = train_config(cfg, seed)
    params, history = train(tr, va, tcfg, architecture(cfg))
    cols = ["epoch", "train_loss", "val_loss", "acc_azim", "acc_elev"]
    write_csv(out / "history.csv", rm.hash, cols, [[h.get(c, float("nan")) for c in cols] for h in history])
    epochs = [{c: h.get(c) for c in cols} for h in history]
    ck = save_checkpoint(out / "cnn.bin", params, kw["log_magnitude"], kw["normalize"],
                         {"train": tcfg.to_dict(), "history": epochs, "run_manifest_hash": rm.hash})
    rm.write(out, {"cnn.json": ck["manifest_hash"]}, {"epoch_seconds": [h["seconds"] for h in history]})
    return ck


def _confusion(y, p, n):
    import numpy as np

    m = np.zeros((n, n), dtype=int)
    np.add.at(m, (y, p), 1)
    return m


def cmd_cnn_eval(args, cfg, seed):
    import numpy as np

    from .dataset import Dataset
    from .doa_net import count_params_and_macs, evaluate, load_checkpoint
    from .tensorio import read_manifest

    d = _dataset_dir(args)
    if not args.checkpoint:
        raise ConfigError("--checkpoint PATH is required", "<args>")
    out = _out(args)
    rm = RunManifest("cnn eval", cfg, seed, args.threads)
    rm.add_input("dataset_manifest", d / "manifest.json")
    rm.add_input("checkpoint", args.checkpoint)
    rm.body["split"] = args.split
    ck = load_checkpoint(args.checkpoint)
    from .anc import AZIMUTH_CLASSES, ELEVATION_CLASSES

    if ck.grid != {"azimuth_classes": list(AZIMUTH_CLASSES), "elevation_classes": list(ELEVATION_CLASSES)}:
        raise ValueError(f"checkpoint grid {ck.grid} does not match this toolkit")
    ds = Dataset.load(d, args.split, log_magnitude=ck.log_magnitude, normalize=ck.normalize)
    ev = evaluate(ds, ck.params)
    snr = ds.labels[:, 8]
    levels = sorted(set(np.round(snr, 6).tolist()))
    if args.split == "test":
        # every configured level gets a column even if a small split never drew it
        levels = sorted(set(levels) | set(read_manifest(d / "manifest.json")["config"]["test_snrs"]))
    groups = [(f"snr_{lv:g}", np.isclose(snr, lv)) for lv in levels] if len(levels) <= 10 else []
    groups.append(("all", np.ones(len(ds), dtype=bool)))
    rows = []
    for name, pred, truth in (("azimuth", ev["pred_azim"], ds.azim), ("elevation", ev["pred_elev"], ds.elev)):
        rows.append([name] + [float(np.mean(pred[m] == truth[m])) if m.any() else float("nan") for _, m in groups])
    rows.append(["count"] + [int(m.sum()) for _, m in groups])
    h = rm.hash
    write_csv(out / "accuracy.csv", h, ["metric"] + [g for g, _ in groups], rows)
    for name, pred, truth, n in (("azim", ev["pred_azim"], ds.azim, len(AZIMUTH_CLASSES)),
                                 ("elev", ev["pred_elev"], ds.elev, len(ELEVATION_CLASSES))):
        cm = _confusion(truth, pred, n)
        write_csv(out / f"confusion_{name}.csv", h, ["true_class"] + [f"pred_{j}" for j in range(n)],
                  [[i] + cm[i].tolist() for i in range(n)])
    n_params, macs = count_params_and_macs(ck.params)
    write_csv(out / "model.csv", h, ["quantity", "value"], [["parameters", n_params], ["macs", macs]])
    rm.write(out, {"accuracy.csv": "see file"})
    return ev


def cross_application(library, geom, band=(100.0, 700.0), seconds=4.0, seed=0):
    """NR matrix: row = true direction, column = filter set used."""
    import numpy as np

    from .anc import grid_directions, replay_nr
    from .dsp import bandlimited_noise
    from .room import SourcePlacement

    dirs = grid_directions()
    x = bandlimited_noise(band[0], band[1], seconds, geom.fs, np.random.default_rng([seed, 99]))
    m = np.zeros((len(dirs), len(dirs)))
    for i, (_, az, el) in enumerate(dirs):
        pl = SourcePlacement(az, el, geom.source_distance)
        for j, (key, _, _) in enumerate(dirs):
            m[i, j] = replay_nr(library.entries[key], geom, pl, x)
    return m


def cmd_filters_pretrain(args, cfg, seed):
    from .anc import build_filter_library, grid_directions

    cfg.require("filters")
    geom = geometry(cfg)
    out = _out(args)
    rm = RunManifest("filters pretrain", cfg, seed, args.threads)
    lib = build_filter_library(geom, pretrain_config(cfg, seed), threads=args.threads)
    lib.meta["run_manifest_hash"] = rm.hash
    manifest = lib.save(out / "library.bin")
    cross = cross_application(lib, geom, seed=seed)
    names = [f"{az:g}/{el:g}" for _, az, el in grid_directions()]
    write_csv(out / "cross_nr.csv", rm.hash, ["direction"] + names,
              [[names[i]] + cross[i].tolist() for i in range(len(names))])
    rm.write(out, {"library.json": manifest["manifest_hash"]})
    return lib, cross


def _load_models(args, methods):
    from .anc import ControlFilterLibrary
    from .doa_net import load_checkpoint

    library = checkpoint = None
    if any(m in ("sfanc", "dsfanc") for m in methods):
        if not args.library:
            raise ConfigError("--library PATH is required for sfanc/dsfanc", "<args>")
        library = ControlFilterLibrary.load(args.library)
    if "dsfanc" in methods:
        if not args.checkpoint:
            raise ConfigError("--checkpoint PATH is required for dsfanc", "<args>")
        checkpoint = load_checkpoint(args.checkpoint)
    return library, checkpoint


def write_sim_outputs(out: Path, mh: str, results: dict, save_traces: bool = False):
    import numpy as np

    methods = list(results)
    f = None
    cols = []
    for m in methods:
        f, p = results[m].psd()
        cols.append(p)
    write_csv(out / "psd.csv", mh, ["frequency_hz"] + methods, zip(f.tolist(), *[c.tolist() for c in cols]))
    nrs = [results[m].nr_series for m in methods]
    write_csv(out / "nr.csv", mh, ["window_index", "time_s"] + methods,
              [[k, 0.5 * k] + [float(n[k]) for n in nrs] for k in range(len(nrs[0]))])
    sel = []
    for m in methods:
        for s in results[m].selections:
            sel.append([m, s.frame, s.active_from, s.azim_class, s.elev_class,
                        float(np.max(s.p_azim)), float(np.max(s.p_elev))])
    write_csv(out / "selections.csv", mh, ["method", "frame", "active_from_sample", "azim_class", "elev_class",
                                           "p_azim_max", "p_elev_max"], sel)
    keys = ["mean_nr_db", "first_window_nr_db", "second_window_nr_db", "final_window_nr_db", "overall_nr_db"]
    summ = [results[m].summary() for m in methods]
    write_csv(out / "summary.csv", mh, ["method"] + keys, [[s["method"]] + [s[k] for k in keys] for s in summ])
    if save_traces:
        d = results[methods[0]].d
        write_csv(out / "traces.csv", mh, ["sample", "d"] + [f"e_{m}" for m in methods],
                  zip(range(d.size), d.tolist(), *[results[m].e.tolist() for m in methods]))
    return summ


def cmd_sim_run(args, cfg, seed):
    from .sim import METHODS, compare_methods

    cfg.require("sim")
    methods = cfg["sim.methods"]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad} in sim.methods; choose from {list(METHODS)}", cfg.source)
    sc = scenario(cfg, seed)
    out = _out(args)
    rm = RunManifest("sim run", cfg, seed, args.threads)
    _record_inputs(rm, args, methods, sc.noise_wav)
    library, checkpoint = _load_models(args, methods)
    results = compare_methods(sc, methods, library, checkpoint)
    summ = write_sim_outputs(out, rm.hash, results, cfg["sim.save_traces"])
    rm.write(out, {"summary": summ})
    return results


def _record_inputs(rm, args, methods, wav=None):
    if args.library and any(m in ("sfanc", "dsfanc") for m in methods):
        rm.add_input("library", args.library)
    if args.checkpoint and "dsfanc" in methods:
        rm.add_input("checkpoint", args.checkpoint)
    if wav:
        rm.add_input("noise_wav", wav)


REPORT_SCENARIOS = (
    ("broadband_120_30", 120.0, 30.0, False),
    ("broadband_0_m30", 0.0, -30.0, False),
    ("wav_110_m15", 110.0, -15.0, True),
)


def ordering_checks(results: dict) -> dict:
    """Qualitative orderings of the directional method against the
    baselines: mean NR over the mismatched fixed filter, the first window
    after the frame-0 decision over the first FxLMS window, and FxLMS
    improving from its first to its final window."""
    s = {m: r.summary() for m, r in results.items()}
    return {
        "dsfanc_mean_gt_sfanc_mean": s["dsfanc"]["mean_nr_db"] > s["sfanc"]["mean_nr_db"],
        "dsfanc_post_frame0_gt_fxlms_first": s["dsfanc"]["second_window_nr_db"] > s["fxlms"]["first_window_nr_db"],
        "fxlms_final_gt_fxlms_first": s["fxlms"]["final_window_nr_db"] > s["fxlms"]["first_window_nr_db"],
    }


def cmd_report(args, cfg, seed):
    """The three reference scenarios, each with every method, plus a
    combined summary and the qualitative ordering checks."""
    from .sim import METHODS, compare_methods

    cfg.require("sim")
    out = _out(args)
    wav = cfg["report.wav"] or None
    rm = RunManifest("report", cfg, seed, args.threads)
    _record_inputs(rm, args, METHODS, wav)
    library, checkpoint = _load_models(args, METHODS)
    combined, checks = [], []
    keys = ["mean_nr_db", "first_window_nr_db", "second_window_nr_db", "final_window_nr_db", "overall_nr_db"]
    for name, az, el, needs_wav in REPORT_SCENARIOS:
        if needs_wav and wav is None:
            log.warning("skipping %s: report.wav is not set", name)
            continue
        from .room import SourcePlacement

        sc = scenario(cfg, seed, placement=SourcePlacement(az % 360.0, el, cfg["sim.distance"]),
                      noise_wav=wav if needs_wav else None)
        results = compare_methods(sc, METHODS, library, checkpoint)
        sub = out / name
        sub.mkdir(exist_ok=True)
        for s in write_sim_outputs(sub, rm.hash, results):
            combined.append([name] + [s["method"]] + [s[k] for k in keys])
        for check, ok in ordering_checks(results).items():
            checks.append([name, check, int(ok)])
    write_csv(out / "summary.csv", rm.hash, ["scenario", "method"] + keys, combined)
    write_csv(out / "checks.csv", rm.hash, ["scenario", "check", "passed"], checks)
    rm.write(out, {"scenarios": sorted({c[0] for c in checks})})
    return checks


# --- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--threads", type=int, default=1, help="worker count; 1 is the deterministic reference path")
    common.add_argument("--out-dir", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="dsfanc", description="Directional selective fixed-filter ANC toolkit.")
    p.add_argument("--version", action="version", version=f"dsfanc {__version__}")
    p.add_argument("--print-schema", action="store_true", help="print every config key with its default")
    sub = p.add_subparsers(dest="group", parser_class=_Parser)

    ds = sub.add_parser("dataset").add_subparsers(dest="action", required=True, parser_class=_Parser)
    ds.add_parser("build", parents=[common], help="generate train/val/test splits").set_defaults(
        func=cmd_dataset_build)

    cnn = sub.add_parser("cnn").add_subparsers(dest="action", required=True, parser_class=_Parser)
    t = cnn.add_parser("train", parents=[common], help="train the DoA network")
    t.add_argument("--dataset", help="dataset directory")
    t.set_defaults(func=cmd_cnn_train)
    e = cnn.add_parser("eval", parents=[common], help="per-SNR accuracy and confusion matrices")
    e.add_argument("--dataset", help="dataset directory")
    e.add_argument("--checkpoint", help="cnn.bin written by cnn train")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.set_defaults(func=cmd_cnn_eval)

    fl = sub.add_parser("filters").add_subparsers(dest="action", required=True, parser_class=_Parser)
    fl.add_parser("pretrain", parents=[common], help="pre-train the 13-direction filter library").set_defaults(
        func=cmd_filters_pretrain)

    sim = sub.add_parser("sim").add_subparsers(dest="action", required=True, parser_class=_Parser)
    r = sim.add_parser("run", parents=[common], help="compare methods on one scenario")
    rep = sub.add_parser("report", parents=[common], help="the reference scenarios with ordering checks")
    for q in (r, rep):
        q.add_argument("--library", help="library.bin written by filters pretrain")
        q.add_argument("--checkpoint", help="cnn.bin written by cnn train")
    r.set_defaults(func=cmd_sim_run)
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.print_schema:
        print(describe_schema())
        return EXIT_OK
    if not hasattr(args, "func"):
        build_parser().print_usage(sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1", "<args>")
        cfg = load_config(args.config)
        seed = cfg["seed"] if args.seed is None else args.seed
        args.func(args, cfg, seed)
    except (ValueError, KeyError) as exc:
        print(f"dsfanc: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, RuntimeError, ArithmeticError) as exc:
        print(f"dsfanc: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def console():
    # BLAS thread pools are sized at import time, so pin them before numpy loads
    for i, a in enumerate(sys.argv):
        if a == "--threads" and i + 1 < len(sys.argv):
            n = sys.argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
        else:
            continue
        if n.isdigit():
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
                os.environ.setdefault(var, n)
    sys.exit(main())


if __name__ == "__main__":
    console()
