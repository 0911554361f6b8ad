"""Tests for the maskinator command line"""

import pathlib

import numpy as np
import pandas as pd
import pytest

import tensor_ad as ad
from maskinator import main
from metrics import REPORT_COLUMNS
from utils import __version__, load_pgm

# 32 x 32 px designs, a 2 channel float64 net and a few ILT steps
TINY_RUN = [
    "nm_per_px=20",
    "canvas_nm=640",
    "dataset_size=2",
    "via_density=0.05",
    "metal_density=0.1",
    "kernel_size=7",
    "kernel_count=2",
    "ilt_max_iters=3",
    "epochs=1",
    "batch_size=2",
    "token_sizes=4,8,16",
    "channels=2",
    "head_channels=2",
    "model_dtype=float64",
    "lgst_rounds=1",
]


def run(tmp_path: pathlib.Path, *args: str, extra=()) -> int:
    settings = [f"output_dir={tmp_path / 'out'}", *TINY_RUN, *extra]
    argv = []
    for pair in settings:
        argv.extend(["--set", pair])
    return main([*argv, *args])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """A generated two design dataset shared by the slower tests"""
    tmp_path = tmp_path_factory.mktemp("cli")
    assert run(tmp_path, "gen-data", "--out", str(tmp_path / "dataset")) == 0
    return tmp_path / "dataset"


@pytest.fixture
def rect_file(tmp_path):
    path = tmp_path / "block.txt"
    path.write_text("CANVAS 640 640\nRECT 200 200 240 160\n")
    return path


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_bad_threads(tmp_path, capsys):
    assert run(tmp_path, "--threads", "0", "eval", "--dataset", str(tmp_path)) == 2
    assert "--threads" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    assert run(tmp_path, "eval", "--dataset", str(tmp_path), extra=["warp_factor=9"]) == 2
    assert "ConfigError" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["--config", str(tmp_path / "nope.cfg"), "eval", "--dataset", str(tmp_path)]) == 2


def test_missing_dataset(tmp_path, capsys):
    assert run(tmp_path, "eval", "--dataset", str(tmp_path / "empty")) == 1
    assert "DatasetFormatError" in capsys.readouterr().err


def test_missing_design(tmp_path):
    assert run(tmp_path, "ilt", str(tmp_path / "missing.txt")) == 1


def test_gen_data(dataset):
    assert (dataset / "manifest.plist").exists()
    assert sorted(p.name for p in (dataset / "rects").iterdir()) == ["metal-001.txt", "via-000.txt"]
    mask = load_pgm(dataset / "masks" / "via-000.pgm")
    assert mask.shape == (32, 32)
    assert set(np.unique(mask)) <= {0.0, 1.0}


def test_eval(tmp_path, dataset, capsys):
    """Deterministic eval of the stored masks writes the table and a zero throughput"""
    out = tmp_path / "eval.csv"
    assert run(tmp_path, "--deterministic", "eval", "--dataset", str(dataset), "--out", str(out)) == 0
    assert "throughput_um2_per_s,0.0" in capsys.readouterr().out
    table = pd.read_csv(out)
    assert list(table.columns) == REPORT_COLUMNS
    assert table["design"].tolist() == ["via-000", "metal-001", "average"]
    assert (table["runtime_s"] == 0).all()
    assert table["mse"].iloc[2] == pytest.approx(table["mse"].iloc[:2].mean())

    ratio_out = tmp_path / "ratio.csv"
    assert (
        run(
            tmp_path,
            "--deterministic",
            "eval",
            "--dataset",
            str(dataset),
            "--baseline",
            str(out),
            "--out",
            str(ratio_out),
        )
        == 0
    )
    ratio = pd.read_csv(ratio_out)
    assert ratio["design"].iloc[-1] == "ratio"
    for column in ("mse", "pvb", "score"):
        base = table[column].iloc[2]
        assert ratio[column].iloc[-1] == pytest.approx(1.0 if base else 0.0)


def test_ilt_and_render(tmp_path, rect_file):
    out = tmp_path / "ilt"
    assert run(tmp_path, "ilt", str(rect_file), "--out", str(out)) == 0
    mask = load_pgm(out / "block-mask.pgm")
    assert mask.shape == (32, 32)
    assert ad.read_checkpoint(out / "block-mask.ckpt")["mask"].shape == (32, 32)
    trace = pd.read_csv(out / "block-loss.csv")
    assert len(trace) == 4

    for kind in ("mask", "aerial", "resist", "pvb"):
        image = tmp_path / f"{kind}.pgm"
        assert run(tmp_path, "render", kind, str(out / "block-mask.ckpt"), str(image)) == 0
        values = load_pgm(image)
        assert values.shape == (32, 32)
        assert values.min() >= 0.0 and values.max() <= 1.0

    design = tmp_path / "design.pgm"
    assert run(tmp_path, "render", "design", str(rect_file), str(design)) == 0
    pixels = load_pgm(design)
    assert pixels.sum() == 12 * 8
    assert pixels[10:18, 10:22].all()


def test_train(tmp_path, dataset):
    out = tmp_path / "train"
    assert run(tmp_path, "train", "--dataset", str(dataset), "--out", str(out)) == 0
    assert (out / "cfno.ckpt").exists()
    assert len(pd.read_csv(out / "loss.csv")) == 1

    table = tmp_path / "model-eval.csv"
    args = ["eval", "--dataset", str(dataset), "--model", str(out / "cfno.ckpt"), "--out", str(table)]
    assert run(tmp_path, *args) == 0
    assert len(pd.read_csv(table)) == 3


def test_deterministic_outputs_repeat(tmp_path, dataset, capsys):
    """Two --deterministic runs write byte-identical CSV files"""
    model = tmp_path / "train"
    assert run(tmp_path, "train", "--dataset", str(dataset), "--out", str(model)) == 0
    tables = []
    for attempt in range(2):
        table = tmp_path / f"model-eval-{attempt}.csv"
        args = ["eval", "--dataset", str(dataset), "--model", str(model / "cfno.ckpt"), "--out", str(table)]
        assert run(tmp_path, "--deterministic", *args) == 0
        tables.append(table.read_bytes())
    assert tables[0] == tables[1]
    assert capsys.readouterr().out.count("throughput_um2_per_s,0.0") == 2

    clip = tmp_path / "clip.txt"
    clip.write_text("CANVAS 1200 1200\nRECT 100 100 400 200\n")
    extra = ["clip_nm=1200", "tile_nm=400", "stride_nm=200", "ilt_max_iters=2"]
    outputs = []
    for attempt in range(2):
        out = tmp_path / f"tiles-{attempt}"
        assert run(tmp_path, "--deterministic", "tile-opt", str(clip), "--out", str(out), extra=extra) == 0
        outputs.append(((out / "clip-eval.csv").read_bytes(), (out / "clip-mask.pgm").read_bytes()))
    assert outputs[0] == outputs[1]


def test_tile_opt(tmp_path):
    """A 60 px clip in 20 px tiles with the default 5 x 5 grid"""
    clip = tmp_path / "clip.txt"
    clip.write_text("CANVAS 1200 1200\nRECT 100 100 400 200\nRECT 700 600 200 400\n")
    out = tmp_path / "tiles"
    extra = ["clip_nm=1200", "tile_nm=400", "stride_nm=200", "ilt_max_iters=2"]
    assert run(tmp_path, "--threads", "2", "tile-opt", str(clip), "--out", str(out), extra=extra) == 0
    assert load_pgm(out / "clip-mask.pgm").shape == (60, 60)
    assert pd.read_csv(out / "clip-eval.csv")["design"].tolist() == ["clip", "average"]


def test_tile_opt_wrong_clip(tmp_path, rect_file):
    assert run(tmp_path, "tile-opt", str(rect_file)) == 1


@pytest.mark.slow
def test_lgst(tmp_path, dataset):
    out = tmp_path / "lgst"
    assert run(tmp_path, "lgst", "--dataset", str(dataset), "--rounds", "1", "--out", str(out)) == 0
    assert (out / "cfno-round-0.ckpt").exists()
    assert (out / "cfno-round-1.ckpt").exists()
    report = pd.read_csv(out / "lgst_report.csv")
    assert report["round"].tolist() == [1]
    assert (out / "dataset" / "manifest.plist").exists()
