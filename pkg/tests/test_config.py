"""Tests for run configuration"""

import dataclasses

import pytest

from config import ConfigError, RunConfig, parse_config, serialize_config
from layout import METAL_LIKE, VIA_LIKE

SAMPLE = """
# small desk run
seed = 7
nm_per_px = 10   # float field given as an integer
doses = 0.95, 1.05
debug = yes
token_sizes = 4, 8, 16
output_dir = runs/a
"""


def test_parse_config():
    c = parse_config(SAMPLE)
    assert c.seed == 7
    assert c.nm_per_px == 10.0
    assert c.doses == (0.95, 1.05)
    assert c.debug is True
    assert c.token_sizes == (4, 8, 16)
    assert c.output_dir == "runs/a"
    assert c.epochs == RunConfig().epochs


def test_parse_empty_is_default():
    assert parse_config("") == RunConfig()
    assert parse_config("# nothing\n\n") == RunConfig()


def test_serialize_round_trip():
    c = dataclasses.replace(RunConfig(), seed=3, lr=0.0015, doses=(1.0,), cold_restart=True)
    assert parse_config(serialize_config(c)) == c


def changed_everywhere() -> RunConfig:
    """A config where every field differs from its default"""
    base = RunConfig()
    changes = {}
    for field in dataclasses.fields(RunConfig):
        value = getattr(base, field.name)
        if isinstance(value, bool):
            changes[field.name] = not value
        elif isinstance(value, int):
            changes[field.name] = value + 1
        elif isinstance(value, float):
            changes[field.name] = value + 0.125
        elif isinstance(value, str):
            changes[field.name] = value + "x"
        else:
            changes[field.name] = value + (value[-1] * 2,)
    return dataclasses.replace(base, **changes)


def test_every_field_round_trips(tmp_path):
    c = changed_everywhere()
    default = RunConfig()
    assert all(getattr(c, key) != getattr(default, key) for key in RunConfig.keys())
    assert parse_config(serialize_config(c)) == c
    for suffix in (".cfg", ".plist"):
        path = tmp_path / f"changed{suffix}"
        c.save(path)
        assert RunConfig.load(path) == c


def test_hash_inside_value():
    c = parse_config("output_dir = runs/#3  # trailing note\n# whole line\nkernel_file=k#1.txt\n")
    assert c.output_dir == "runs/#3"
    assert c.kernel_file == "k#1.txt"
    c = RunConfig(output_dir="runs/#7")
    assert parse_config(serialize_config(c)) == c


@pytest.mark.parametrize("value", ["a #b", "#first", " padded", "two\nlines"])
def test_serialize_rejects_unsafe_strings(value):
    with pytest.raises(ConfigError):
        serialize_config(RunConfig(output_dir=value))


@pytest.mark.parametrize("suffix", [".cfg", ".plist"])
def test_save_load(tmp_path, suffix):
    c = parse_config(SAMPLE)
    path = tmp_path / f"run{suffix}"
    c.save(path)
    assert RunConfig.load(path) == c


def test_unknown_key():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config("seed = 1\nwarp_factor = 9\n")


def test_duplicate_key_reports_line():
    with pytest.raises(ConfigError, match="line 3"):
        parse_config("seed = 1\nepochs = 2\nseed = 4\n")


@pytest.mark.parametrize(
    "text",
    ["debug = maybe", "epochs = 2.5", "lr = fast", "just words", "= 3"],
)
def test_bad_lines(text):
    with pytest.raises(ConfigError, match="line 1"):
        parse_config(text)


def test_validation():
    with pytest.raises(ConfigError):
        parse_config("nm_per_px = 0")
    with pytest.raises(ConfigError):
        parse_config("via_fraction = 1.5")
    with pytest.raises(ConfigError):
        RunConfig(doses=())


def test_with_overrides():
    c = RunConfig().with_overrides(["epochs=3", " doses = 1.0 ", "loss=l2"])
    assert c.epochs == 3
    assert c.doses == (1.0,)
    assert c.loss == "l2"
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["epochs"])
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["nope=1"])


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.cfg")
    bad = tmp_path / "bad.plist"
    bad.write_bytes(b"not a plist")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)
    wrong = tmp_path / "wrong.plist"
    RunConfig().save(wrong)
    wrong.write_text(wrong.read_text().replace("<integer>20</integer>", "<string>20</string>", 1))
    with pytest.raises(ConfigError):
        RunConfig.load(wrong)


def test_evaluator_builder():
    c = RunConfig(kernel_size=7, kernel_count=2, kernel_sigma_nm=40.0, nm_per_px=20.0)
    evaluator = c.evaluator()
    assert evaluator.nominal.count == 2
    assert evaluator.defocus is not None
    assert evaluator.doses == c.doses
    assert evaluator.epe_spec.tolerance_nm == 15.0


def test_resist_threshold_override():
    c = RunConfig(kernel_size=7, kernel_count=2)
    nominal, _ = c.kernels()
    calibrated = c.resist_model(nominal)
    fixed = dataclasses.replace(c, d_th=0.3).resist_model(nominal)
    assert fixed.d_th == 0.3
    assert fixed.sigmoid_steepness == calibrated.sigmoid_steepness


def test_module_config_builders():
    c = RunConfig(ilt_max_iters=5, epochs=2, lgst_rounds=3, token_sizes=(4, 8, 16), channels=2)
    assert c.ilt_config().max_iters == 5
    assert c.train_config().epochs == 2
    assert c.lgst_config().rounds == 3
    assert c.cfno_architecture().token_sizes == (4, 8, 16)
    assert c.cfno_architecture().d == 2
    assert c.tile_spec().grid_size == 5


def test_generator_specs():
    specs = RunConfig(dataset_size=5, via_fraction=0.4, seed=1).generator_specs()
    assert [s.kind for s in specs] == [VIA_LIKE, VIA_LIKE, METAL_LIKE, METAL_LIKE, METAL_LIKE]
    assert len({s.seed for s in specs}) == 5
    assert all(s.canvas_nm == 2560 for s in specs)
