"""Command-line surface: every subcommand end to end at tiny scale."""

import os

import numpy as np
import pytest

from unic.cli import main
from unic.ppm import read_ppm
from unic.rng import worker_count
from unic.synthdata import load_manifest

TINY_CFG = """
depth=1
dim=8
heads=2
patch=2
image_size=8
max_text_len=8
steps=3
batch=2
log_every=1
ckpt_every=0
seed=11
sample_steps=2
mix_pixel=1.0
mix_subject=0.0
mix_style=0.0
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    data = root / "data"
    rc = main(["gen-data", "--n", "8", "--seed", "3", "--out", str(data),
               "--tasks", "edge", "--mix-pixel", "1.0", "--mix-subject", "0.0",
               "--mix-style", "0.0"])
    assert rc == 0
    # tiny 8x8 images for the tiny model: regenerate pair images at size 8
    _shrink_dataset(data)
    run = root / "run"
    rc = main(["train", "--config", str(cfg), "--data", str(data / "manifest.tsv"),
               "--out", str(run)])
    assert rc == 0
    return {"root": root, "cfg": cfg, "data": data, "run": run}


def _shrink_dataset(data):
    """Downscale the generated 32x32 pairs to 8x8 so the tiny model fits."""
    from unic.ppm import read_ppm, write_ppm

    for rec in load_manifest(data / "manifest.tsv"):
        for rel in (rec.target_path, rec.condition_path):
            img = read_ppm(data / rel)
            write_ppm(data / rel, img[::4, ::4])


def test_gen_data_outputs(workdir):
    records = load_manifest(workdir["data"] / "manifest.tsv")
    assert len(records) == 8
    assert all(r.task == "edge" for r in records)
    img = read_ppm(workdir["data"] / records[0].target_path)
    assert img.shape == (8, 8, 3)
    assert (workdir["data"] / "vocab.txt").exists()


def test_train_outputs(workdir):
    run = workdir["run"]
    assert (run / "checkpoint.unic").exists()
    lines = (run / "metrics.log").read_text().splitlines()
    assert len(lines) == 3
    step, family, loss = lines[0].split("\t")
    assert step == "1" and family == "pixel"
    float(loss)


def test_sample_writes_deterministic_ppm(workdir):
    records = load_manifest(workdir["data"] / "manifest.tsv")
    cond = workdir["data"] / records[0].condition_path
    outs = []
    for name in ("a.ppm", "b.ppm"):
        out = workdir["root"] / name
        rc = main([
            "sample", "--ckpt", str(workdir["run"] / "checkpoint.unic"),
            "--config", str(workdir["cfg"]), "--prompt", records[0].prompt,
            "--instruction", records[0].instruction, "--condition", str(cond),
            "--task", "edge", "--seed", "5", "--out", str(out),
        ])
        assert rc == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    img = read_ppm(workdir["root"] / "a.ppm")
    assert img.shape == (8, 8, 3)


def test_sample_explicit_scales_and_multiple(workdir):
    records = load_manifest(workdir["data"] / "manifest.tsv")
    cond = workdir["data"] / records[0].condition_path
    out = workdir["root"] / "multi.ppm"
    rc = main([
        "sample", "--ckpt", str(workdir["run"] / "checkpoint.unic"),
        "--config", str(workdir["cfg"]), "--condition", str(cond),
        "--task", "edge", "--sc", "1.3", "--st", "3.0", "--steps", "1",
        "--seed", "0", "--out", str(out), "--n", "2",
    ])
    assert rc == 0
    assert (workdir["root"] / "multi-000.ppm").exists()
    assert (workdir["root"] / "multi-001.ppm").exists()


def test_eval_writes_report(workdir):
    out = workdir["root"] / "eval"
    rc = main([
        "eval", "--ckpt", str(workdir["run"] / "checkpoint.unic"),
        "--config", str(workdir["cfg"]), "--data", str(workdir["data"] / "manifest.tsv"),
        "--out", str(out), "--limit", "3",
    ])
    assert rc == 0
    tsv = (out / "report.tsv").read_text().splitlines()
    assert tsv[0] == "task\tn\tmetric\tmean\tstd"
    assert any(line.startswith("edge\t3\tedge_f1") for line in tsv[1:])
    assert (out / "report.txt").exists()


def test_ablate_compares_variants(workdir):
    out = workdir["root"] / "ablate"
    rc = main([
        "ablate", "--axis", "crossq", "--config", str(workdir["cfg"]),
        "--data", str(workdir["data"] / "manifest.tsv"),
        "--eval-data", str(workdir["data"] / "manifest.tsv"),
        "--out", str(out), "--steps", "2", "--limit", "2",
    ])
    assert rc == 0
    table = (out / "ablate_crossq.tsv").read_text().splitlines()
    assert table[0] == "variant\ttask\tn\tmetric\tmean\tstd"
    variants = {line.split("\t")[0] for line in table[1:]}
    assert variants == {"new", "shared"}


def test_error_paths_exit_nonzero(workdir, capsys, tmp_path):
    assert main(["train", "--config", str(tmp_path / "missing.cfg"),
                 "--data", "x", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and err.count("\n") == 1

    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("unknown_key=1\n")
    assert main(["train", "--config", str(bad_cfg), "--data", "x",
                 "--out", str(tmp_path)]) == 1
    assert "unknown key" in capsys.readouterr().err

    records = load_manifest(workdir["data"] / "manifest.tsv")
    cond = workdir["data"] / records[0].condition_path
    assert main(["sample", "--ckpt", str(workdir["run"] / "checkpoint.unic"),
                 "--config", str(workdir["cfg"]), "--condition", str(cond),
                 "--task", "mosaic", "--out", str(tmp_path / "x.ppm")]) == 1
    assert "unknown task" in capsys.readouterr().err


def test_bad_flags_rejected():
    with pytest.raises(SystemExit):
        main(["ablate", "--axis", "nonsense", "--config", "c", "--data", "d",
              "--eval-data", "e"])
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("UNIC_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("UNIC_THREADS", "0")
    with pytest.raises(ValueError):
        worker_count()
    monkeypatch.delenv("UNIC_THREADS")
    assert worker_count() >= 1


def test_train_seed_determinism_via_cli(workdir, tmp_path):
    outs = []
    for sub in ("r1", "r2"):
        out = tmp_path / sub
        rc = main(["train", "--config", str(workdir["cfg"]),
                   "--data", str(workdir["data"] / "manifest.tsv"), "--out", str(out)])
        assert rc == 0
        outs.append((out / "checkpoint.unic").read_bytes())
    assert outs[0] == outs[1]
