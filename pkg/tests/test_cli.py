import hashlib
import json
import re
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from angiovid import cli
from angiovid.config import resolve_config
from angiovid.data import load_manifest, read_video, write_rgb
from angiovid.errors import ConfigError
from angiovid.model import write_archive
from angiovid.training import temporal_smooth

TINY = ["model.base_channels=8", "model.downsample_stages=2", "model.residual_blocks=1", "model.nce_dim=16",
        "discriminator.base_channels=8", "discriminator.n_layers=3", "data.resolution=32",
        "train.batch_size=2", "train.validate=false"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def sets(*items):
    return [x for it in items for x in ("--set", it)]


def tree_digest(root, skip=("resolved_config.yaml",)):
    # the resolved config records the output directory itself, so it is left out when comparing trees
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file() and p.name not in skip:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ph") / "ds"
    assert cli.main(["phantom", "--out", str(out), "--seed", "7", *sets("phantom.n=4", "phantom.resolution=32")]) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("tr") / "run"
    argv = ["train", "--out", str(out), *sets(*TINY, f"data.manifest={dataset / 'manifest.jsonl'}",
                                               "train.max_steps=2", "train.epochs=10")]
    assert cli.main(argv) == 0
    return out


def assert_error_line(err, code):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    assert re.fullmatch(rf"error\[{code}\]: \S.*", lines[0])


# -- phantom


def test_phantom_writes_loadable_manifest(dataset):
    m = load_manifest(dataset / "manifest.jsonl")
    assert len(m.records) == 4
    assert {r.split for r in m.records} <= {"train", "val", "test"}
    assert (dataset / "resolved_config.yaml").exists()


def test_phantom_deterministic(tmp_path, capsys, dataset):
    out = tmp_path / "again"
    code, _, _ = run(capsys, "phantom", "--out", out, "--seed", 7, *sets("phantom.n=4", "phantom.resolution=32"))
    assert code == 0
    first = tree_digest(out)
    code, _, _ = run(capsys, "phantom", "--out", out, "--seed", 7, "--force",
                     *sets("phantom.n=4", "phantom.resolution=32"))
    assert code == 0 and tree_digest(out) == first
    # the manifest stores relative paths, so the fixture copy matches byte for byte too
    assert tree_digest(dataset) == first


def test_phantom_errors(tmp_path, capsys):
    code, _, err = run(capsys, "phantom", "--out", tmp_path / "z", *sets("phantom.n=0"))
    assert code == 1 and "empty dataset" in err
    assert_error_line(err, "E_DATA")
    (tmp_path / "busy").mkdir()
    (tmp_path / "busy" / "keep.txt").write_text("x")
    code, _, err = run(capsys, "phantom", "--out", tmp_path / "busy", *sets("phantom.n=1"))
    assert code == 1 and "--force" in err
    assert (tmp_path / "busy" / "keep.txt").exists()


# -- train


def test_train_outputs(trained):
    log = [json.loads(l) for l in (trained / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [1, 2]
    assert (trained / "final.zip").exists() and (trained / "resolved_config.yaml").exists()


def test_train_missing_key(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--out", tmp_path / "t", *sets(*TINY))
    assert code == 1 and "data.manifest" in err
    assert_error_line(err, "E_CONFIG")


def test_train_resume_log_has_no_gaps(tmp_path, capsys, dataset):
    out = tmp_path / "r"
    base = sets(*TINY, f"data.manifest={dataset / 'manifest.jsonl'}", "train.checkpoint_every=1", "train.epochs=10")
    assert run(capsys, "train", "--out", out, *base, *sets("train.max_steps=2"))[0] == 0
    # pretend the run died right after step 1
    ck = out / "ckpt_step000001.zip"
    code, _, _ = run(capsys, "train", "--out", out, "--resume", ck, *base, *sets("train.max_steps=3"))
    assert code == 0
    steps = [json.loads(l)["step"] for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert steps == [1, 2, 3]


# -- generate


@pytest.fixture
def source_png(tmp_path):
    p = tmp_path / "src.png"
    write_rgb(p, np.random.default_rng(0).random((32, 32, 3)).astype(np.float32))
    return p


def test_generate_twelve_frames(tmp_path, capsys, trained, source_png):
    out = tmp_path / "g"
    code, stdout, _ = run(capsys, "generate", "--checkpoint", trained / "final.zip", "--source", source_png,
                          "--out", out, *sets("data.resolution=32"))
    assert code == 0 and json.loads(stdout)["frames"] == 12
    v = read_video(out)
    assert v.frames.shape == (12, 32, 32)
    assert sorted(Counter(v.phase_tags).values()) == [4, 4, 4]
    assert v.frames.min() >= 0 and v.frames.max() <= 1


@pytest.mark.parametrize("kind", ["constant", "ramp"])
def test_generate_smooth_flag(tmp_path, capsys, trained, source_png, monkeypatch, kind):
    t = np.arange(12, dtype=np.float32)
    if kind == "constant":
        stub = np.full((12, 32, 32), 0.4, np.float32)
    else:  # alternating values make the three-frame average visible
        stub = np.broadcast_to((0.2 + 0.6 * (t % 2))[:, None, None], (12, 32, 32)).copy()
    monkeypatch.setattr(cli, "rollout_tensor", lambda gen, src, T: (torch.from_numpy(stub[None]), None))
    got = {}
    for flag in ("--smooth", "--no-smooth"):
        out = tmp_path / flag.strip("-")
        code, _, err = run(capsys, "generate", "--checkpoint", trained / "final.zip", "--source", source_png,
                           "--out", out, flag, *sets("data.resolution=32"))
        assert code == 0, err
        got[flag] = read_video(out).frames
    q = 1 / 65535
    assert np.abs(got["--no-smooth"] - stub).max() <= q
    assert np.abs(got["--smooth"] - temporal_smooth(stub)).max() <= q
    if kind == "constant":
        assert np.abs(got["--smooth"] - 0.4).max() <= q
    else:
        assert np.abs(got["--smooth"] - stub).max() > 0.1


def test_generate_bad_checkpoint(tmp_path, capsys, source_png):
    bad = tmp_path / "bad.zip"
    write_archive(bad, {"format_version": 99, "kind": "model"}, {})
    code, _, err = run(capsys, "generate", "--checkpoint", bad, "--source", source_png, "--out", tmp_path / "g")
    assert code == 1 and "version mismatch" in err
    assert_error_line(err, "E_CHECKPOINT")


# -- evaluate


def test_evaluate_self_check(tmp_path, capsys, dataset):
    out = tmp_path / "e"
    code, stdout, _ = run(capsys, "evaluate", "--self-check", "--out", out,
                          *sets(f"data.manifest={dataset / 'manifest.jsonl'}", "data.resolution=32", "data.split=train"))
    assert code == 0
    rec = json.loads(stdout)
    assert rec["ssim"] == pytest.approx(1.0) and abs(rec["fvd"]) <= 1e-6
    report = json.loads((out / "report.json").read_text())
    assert {"fvd", "ssim", "psnr", "perceptual"} <= set(report)
    rows = (out / "report.csv").read_text().splitlines()
    assert rows[0].split(",")[:2] == ["metric", "split"]
    assert any(r.startswith("ssim,") for r in rows) and any(r.startswith("fvd,") for r in rows)


def test_evaluate_checkpoint(tmp_path, capsys, dataset, trained):
    code, stdout, _ = run(capsys, "evaluate", "--checkpoint", trained / "final.zip", "--out", tmp_path / "e",
                          *sets(f"data.manifest={dataset / 'manifest.jsonl'}", "data.resolution=32", "data.split=train"))
    assert code == 0
    rec = json.loads(stdout)
    assert 0 < rec["ssim"] < 1 and rec["fvd"] > 0


def test_evaluate_empty_split(tmp_path, capsys, dataset):
    code, _, err = run(capsys, "evaluate", "--self-check", "--out", tmp_path / "e",
                       *sets(f"data.manifest={dataset / 'manifest.jsonl'}", "data.split=holdout"))
    assert code == 1 and "empty" in err


# -- downstream


def test_downstream_grid(tmp_path, capsys):
    ds = tmp_path / "ds"
    assert cli.main(["phantom", "--out", str(ds), *sets("phantom.n=12", "phantom.views=2", "phantom.resolution=32")]) == 0
    grid = tmp_path / "grid.jsonl"
    seeds = [0, 1, 2, 3, 4]
    cells = [{"task": "lesion_classification", "shots": s, "seeds": seeds} for s in (1, 2)]
    cells += [{"task": "retrieval", "shots": s, "seeds": seeds} for s in (0, 1)]
    grid.write_text("".join(json.dumps(c) + "\n" for c in cells))
    out = tmp_path / "d"
    m = ds / "manifest.jsonl"
    code, _, err = run(capsys, "downstream", "--grid", grid, "--out", out, "--jobs", 2,
                       *sets(*TINY[:4], f"data.manifest={m}", "probe.epochs=12", "probe.warmup_epochs=2"))
    assert code == 0, err
    rows = (out / "results.csv").read_text().splitlines()
    assert len(rows) == 1 + 20
    summ = [json.loads(l) for l in (out / "summary.jsonl").read_text().splitlines()]
    assert len(summ) == 4
    for s in summ:
        assert s["n"] == 5
        assert s["ci95_low"] == pytest.approx(s["mean"] - 1.96 * s["se"])
        assert s["ci95_high"] == pytest.approx(s["mean"] + 1.96 * s["se"])


def test_downstream_malformed_grid(tmp_path, capsys, dataset):
    grid = tmp_path / "m.jsonl"
    grid.write_text('{"task": "retrieval", "shots": 0, "seeds": [0]}\n{"task": "retrieval", "shots": 0,\n')
    code, _, err = run(capsys, "downstream", "--grid", grid, "--out", tmp_path / "d",
                       *sets(f"data.manifest={dataset / 'manifest.jsonl'}"))
    assert code == 1 and re.search(r"m\.jsonl:2:", err)
    assert_error_line(err, "E_CONFIG")


# -- config layering and error format


def test_config_layers(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump({"train": {"batch_size": 3, "epochs": 7}, "run": {"seed": 1}}))
    env = {"ANGIOVID_TRAIN__EPOCHS": "9", "ANGIOVID_RUN__SEED": "2", "UNRELATED": "x"}
    cfg = resolve_config(str(f), env=env, overrides=["run.seed=5"])
    assert cfg["train"]["batch_size"] == 3
    assert cfg["train"]["epochs"] == 9
    assert cfg["run"]["seed"] == 5
    assert cfg["model"]["base_channels"] == 32


def test_config_rejects_unknown(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("train:\n  batchsize: 3\n")
    with pytest.raises(ConfigError, match="train.batchsize"):
        resolve_config(str(f), env={})
    with pytest.raises(ConfigError, match="bogus"):
        resolve_config(None, env={"ANGIOVID_BOGUS__X": "1"})


def test_env_reaches_cli(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("ANGIOVID_PHANTOM__N", "0")
    code, _, err = run(capsys, "phantom", "--out", tmp_path / "p")
    assert code == 1 and "empty dataset" in err


def test_resolved_config_reproduces(tmp_path, capsys, dataset):
    resolved = dataset / "resolved_config.yaml"
    out = tmp_path / "again"
    assert run(capsys, "phantom", "--config", resolved, "--out", out)[0] == 0
    assert tree_digest(out) == tree_digest(dataset)


def test_usage_errors(capsys):
    code, _, err = run(capsys, "nonsense")
    assert code == 2
    assert_error_line(err, "E_USAGE")
    code, _, err = run(capsys, "phantom", "--set", "no_dot=1", "--out", "x")
    assert code == 1
    assert_error_line(err, "E_CONFIG")
