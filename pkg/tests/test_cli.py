"""Command-line interface: subcommands, exit codes, artifacts, run manifests."""

import json
import os

import numpy as np
import pytest

from admask import cli, dataio
from admask.trainer import TrainConfig, config_text

from test_trainer import tiny_config


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("data"))
    rc = run_cli("gen-data", "--out", out, "--per-class", "10",
                 "--points", "64", "--seed", "3")
    assert rc == cli.EXIT_OK
    return out


@pytest.fixture(scope="module")
def tiny_cfg_path(tmp_path_factory):
    cfg = tiny_config(steps=4, checkpoint_every=2)
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text(config_text(cfg))
    return str(path)


@pytest.fixture(scope="module")
def pretrained(dataset, tiny_cfg_path, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    rc = run_cli("pretrain", "--config", tiny_cfg_path, "--data", dataset,
                 "--out", out, "--seed", "1")
    assert rc == cli.EXIT_OK
    return out


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_counts_and_split(dataset):
    m = dataio.read_manifest(os.path.join(dataset, "manifest.txt"))
    assert len(m.entries) == 40
    assert len(m.subset("train")) == 28  # floor(0.7*10) per class
    assert len(m.subset("val")) == 4
    assert len(m.subset("test")) == 8
    assert m.class_names == list(dataio.SHAPE_CLASSES)


def test_gen_data_rerun_is_byte_identical(dataset, tmp_path):
    out2 = str(tmp_path / "again")
    rc = run_cli("gen-data", "--out", out2, "--per-class", "10",
                 "--points", "64", "--seed", "3")
    assert rc == cli.EXIT_OK
    for name in sorted(os.listdir(dataset)):
        if name.endswith(".pcam"):
            a = open(os.path.join(dataset, name), "rb").read()
            b = open(os.path.join(out2, name), "rb").read()
            assert a == b, name


def test_gen_data_unknown_class(tmp_path):
    rc = run_cli("gen-data", "--out", str(tmp_path / "x"),
                 "--classes", "sphere,cone", "--per-class", "2")
    assert rc == cli.EXIT_CONFIG


def test_run_manifest_written(dataset):
    manifest = json.load(open(os.path.join(dataset, "run_manifest.json")))
    assert manifest["command"] == "gen-data"
    assert all(os.path.exists(p) for p in manifest["artifacts"])
    assert len(manifest["config_hash"]) == 64


# ---------------------------------------------------------------------------
# pretrain


def test_pretrain_outputs(pretrained):
    assert os.path.exists(os.path.join(pretrained, "final.ckpt"))
    assert os.path.exists(os.path.join(pretrained, "metrics.csv"))
    assert os.path.exists(os.path.join(pretrained, "step_2.ckpt"))
    lines = open(os.path.join(pretrained, "metrics.csv")).read().splitlines()
    assert lines[0].startswith("step,l_mpm,l_cls")
    assert len(lines) == 5  # header + 4 steps at log_every=1


def test_pretrain_missing_config(dataset, tmp_path):
    rc = run_cli("pretrain", "--config", "/nope.cfg", "--data", dataset,
                 "--out", str(tmp_path / "o"))
    assert rc == cli.EXIT_MISSING


def test_pretrain_bad_config(dataset, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("stepz = 5\n")
    rc = run_cli("pretrain", "--config", str(bad), "--data", dataset,
                 "--out", str(tmp_path / "o"))
    assert rc == cli.EXIT_CONFIG


def test_pretrain_missing_data(tiny_cfg_path, tmp_path):
    rc = run_cli("pretrain", "--config", tiny_cfg_path,
                 "--data", str(tmp_path / "nodata"),
                 "--out", str(tmp_path / "o"))
    assert rc == cli.EXIT_MISSING


def test_pretrain_random_masking_freezes_mask_generator(
        dataset, tiny_cfg_path, tmp_path):
    out = str(tmp_path / "rand")
    rc = run_cli("pretrain", "--config", tiny_cfg_path, "--data", dataset,
                 "--out", out, "--seed", "1", "--masking", "random",
                 "--steps", "3")
    assert rc == cli.EXIT_OK
    _, arrays = dataio.load_checkpoint(os.path.join(out, "final.ckpt"))
    # mask generator parameters must still equal their init values
    from admask.model import init_params
    from admask.trainer import parse_config, stream
    cfg = parse_config(tiny_cfg_path)
    cfg.steps, cfg.masking = 3, "random"
    init = init_params(cfg.model_config(), stream(1, "init"))
    for n, t in init.items():
        if n.startswith("mg."):
            assert np.array_equal(arrays["student." + n], t.data), n


def test_pretrain_resume(dataset, tiny_cfg_path, tmp_path):
    out = str(tmp_path / "resume")
    rc = run_cli("pretrain", "--config", tiny_cfg_path, "--data", dataset,
                 "--out", out, "--seed", "2")
    assert rc == cli.EXIT_OK
    full = open(os.path.join(out, "metrics.csv")).read().splitlines()

    # resume from the periodic step_2 checkpoint; the tail must match the
    # uninterrupted run's tail per logged loss
    out2 = str(tmp_path / "resume2")
    rc = run_cli("pretrain", "--config", tiny_cfg_path, "--data", dataset,
                 "--out", out2, "--seed", "2",
                 "--resume", os.path.join(out, "step_2.ckpt"))
    assert rc == cli.EXIT_OK
    resumed = open(os.path.join(out2, "metrics.csv")).read().splitlines()
    assert len(resumed) == 2  # steps 2 and 3
    for a, b in zip(full[3:], resumed):
        fa = [float(x) for x in a.split(",")[:5]]
        fb = [float(x) for x in b.split(",")[:5]]
        np.testing.assert_allclose(fa, fb, atol=1e-6)


# ---------------------------------------------------------------------------
# probe / fewshot / export-masks / bench


def test_probe_with_random_comparison(pretrained, dataset, tmp_path):
    out = str(tmp_path / "probe")
    rc = run_cli("probe", "--checkpoint", os.path.join(pretrained, "final.ckpt"),
                 "--data", dataset, "--out", out, "--seeds", "2",
                 "--compare-random")
    assert rc == cli.EXIT_OK
    rows = open(os.path.join(out, "probe_results.csv")).read().splitlines()
    assert rows[0] == "encoder,accuracy_mean,accuracy_std"
    assert len(rows) == 3  # pretrained + random_init
    names = [r.split(",")[0] for r in rows[1:]]
    assert names == ["pretrained", "random_init"]
    assert os.path.exists(os.path.join(out, "probe_report.txt"))


def test_probe_missing_checkpoint(dataset, tmp_path):
    rc = run_cli("probe", "--checkpoint", "/nope.ckpt", "--data", dataset,
                 "--out", str(tmp_path / "p"))
    assert rc == cli.EXIT_MISSING


def test_fewshot_outputs(pretrained, dataset, tmp_path):
    out = str(tmp_path / "fs")
    rc = run_cli("fewshot", "--checkpoint", os.path.join(pretrained, "final.ckpt"),
                 "--data", dataset, "--out", out, "--way", "2", "--shot", "2",
                 "--folds", "10", "--query", "3")
    assert rc == cli.EXIT_OK
    rows = open(os.path.join(out, "fewshot_folds.csv")).read().splitlines()
    assert rows[0] == "fold,accuracy"
    assert len(rows) == 11  # header + 10 folds


def test_export_masks_files(pretrained, dataset, tmp_path):
    cloud_path = None
    for name in os.listdir(dataset):
        if name.endswith(".pcam"):
            cloud_path = os.path.join(dataset, name)
            break
    out_prefix = str(tmp_path / "masks" / "viz")
    rc = run_cli("export-masks", "--checkpoint",
                 os.path.join(pretrained, "final.ckpt"),
                 "--cloud", cloud_path, "--out", out_prefix)
    assert rc == cli.EXIT_OK
    files = os.listdir(tmp_path / "masks")
    assert sum(f.endswith(".pcam") for f in files) == 4  # 3 masks + combined


def test_bench_rows(tmp_path):
    out = str(tmp_path / "bench")
    rc = run_cli("bench", "--out", out)
    assert rc == cli.EXIT_OK
    rows = open(os.path.join(out, "bench.csv")).read().splitlines()
    assert rows[0] == "n_points,clouds_per_sec"
    assert len(rows) == 4
    assert [r.split(",")[0] for r in rows[1:]] == ["256", "1024", "2048"]


def test_unknown_subcommand_is_config_error():
    assert run_cli("frobnicate") == cli.EXIT_CONFIG
