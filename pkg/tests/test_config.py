import pytest

from dsfanc.config import SCHEMA, ConfigError, describe_schema, load_config, parse_config


def test_defaults_cover_schema():
    cfg = parse_config("")
    assert set(cfg) == set(SCHEMA)
    assert cfg["dataset.n_train"] == 2000 and cfg["room.dims"] == (11.0, 9.0, 3.2)
    assert cfg["sim.snr"] == 40.0 and cfg["cnn.max_minutes"] is None
    assert cfg.explicit == set()


def test_parse_values_and_sections():
    text = """
    # experiment
    seed = 3
    [dataset]
    n_train = 10   # small
    train_rooms = 6x4x3; 12 x 8 x 3.5
    train_rt60 = 0.2, 0.3; 0.5
    [sim]
    methods = off, dsfanc
    snr = none
    crossfade = yes
    [ ]
    room.rt60 = 0.3
    """
    cfg = parse_config(text, "exp.cfg")
    assert cfg["seed"] == 3 and cfg["dataset.n_train"] == 10
    assert cfg["dataset.train_rooms"] == ((6.0, 4.0, 3.0), (12.0, 8.0, 3.5))
    assert cfg["dataset.train_rt60"] == ((0.2, 0.3), (0.5,))
    assert cfg["sim.methods"] == ("off", "dsfanc") and cfg["sim.snr"] is None and cfg["sim.crossfade"] is True
    assert cfg["room.rt60"] == 0.3
    assert cfg.explicit == {"seed", "dataset.n_train", "dataset.train_rooms", "dataset.train_rt60",
                            "sim.methods", "sim.snr", "sim.crossfade", "room.rt60"}


@pytest.mark.parametrize("text,line,fragment", [
    ("seed = 1\ndataset.n_trian = 5\n", 2, "unknown key"),
    ("\n\nseed 1\n", 3, "expected 'key = value'"),
    ("cnn.epochs = many\n", 1, "bad value"),
    ("cnn.log_magnitude = maybe\n", 1, "bad value"),
    ("seed = 1\nseed = 2\n", 2, "duplicate"),
    ("dataset.train_rooms = 6x4\n", 1, "LxWxH"),
])
def test_line_anchored_errors(text, line, fragment):
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "bad.cfg")
    assert exc.value.line == line
    assert str(exc.value).startswith(f"bad.cfg:{line}: ")
    assert fragment in str(exc.value)


def test_require():
    cfg = parse_config("room.dims = 5, 4, 3\n")
    with pytest.raises(ConfigError, match="room.rt60"):
        cfg.require("filters")
    parse_config("room.dims = 5, 4, 3\nroom.rt60 = 0.3\n").require("sim")
    cfg.require("dataset")


def test_load_and_schema(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("cnn.epochs = 2\n")
    assert load_config(p)["cnn.epochs"] == 2
    assert load_config(None)["cnn.epochs"] == 20
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.cfg")
    text = describe_schema()
    assert len(text.splitlines()) == len(SCHEMA)
    # the printed schema is itself a valid config reproducing the defaults
    assert parse_config(text) == parse_config("")
