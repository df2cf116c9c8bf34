import json
import os
import subprocess
import sys

import numpy as np
import pytest

from tractpipe import cli
from tractpipe.config import PipelineConfig, load_config
from tractpipe.segmentation import PatchMLP, TrainConfig, load_model, train
from tractpipe.volume import load_volume, read_header

SMALL = {
    "seed": 3,
    "phantom": {"dims": [12, 12, 12], "cohort_size": 5, "n_test": 1, "tube_radius": 2.0},
    "registration": {"gamma": 1e5, "step_size": 0.01, "max_iters": 8},
    "model": {"patch_radius": 1, "hidden_size": 4},
    "train_a": {"epochs": 2, "batch_voxels": 128},
    "train_b": {"epochs": 1, "batch_voxels": 256},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(dict(SMALL, workspace=str(tmp_path / "ws"))))
    return path


def run(config_file, *args):
    return cli.main([args[0], "--config", str(config_file), *args[1:]])


def _ws(config_file):
    return load_config(config_file).workspace_path


def _tree(ws):
    out = {}
    for p in sorted(ws.rglob("*")):
        if p.is_file() and "logs" not in p.parts:
            out[p.relative_to(ws).as_posix()] = p.read_bytes()
    return out


def test_phantom_manifest(config_file):
    assert run(config_file, "phantom") == 0
    ws = _ws(config_file)
    manifest = json.loads((ws / cli.COHORT_MANIFEST).read_text())
    assert manifest["labeled"]["id"] == "labeled"
    assert len(manifest["unlabeled"]) == 3
    assert len(manifest["test"]) == 1
    assert all(set(e) == {"id", "peaks"} for e in manifest["unlabeled"])
    text = json.dumps(manifest)
    for e in manifest["unlabeled"]:
        assert f"{e['id']}_truth" not in text
    assert not list((ws / "cohort").glob("unlabeled_*_truth*"))
    peaks = load_volume(ws / manifest["test"][0]["peaks"])
    assert peaks.shape == (12, 12, 12, 3)


def test_default_phantom_counts(tmp_path):
    cfg = load_config(workspace=tmp_path / "ws")
    cli.cmd_phantom(cfg)
    manifest = json.loads((tmp_path / "ws" / cli.COHORT_MANIFEST).read_text())
    assert (len(manifest["unlabeled"]), len(manifest["test"])) == (10, 5)


def test_phantom_rerun_identical(config_file):
    run(config_file, "phantom")
    first = _tree(_ws(config_file))
    run(config_file, "phantom")
    assert _tree(_ws(config_file)) == first


def test_stage_order_errors(config_file, capsys):
    assert run(config_file, "stage1") == 1
    assert "run `tractpipe phantom` first" in capsys.readouterr().err
    run(config_file, "phantom")
    assert run(config_file, "stage3") == 1
    assert run(config_file, "evaluate", "--model", "nope.model.json") == 1


def test_unwritable_workspace(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(dict(SMALL, workspace=str(blocker / "ws"))))
    assert cli.main(["phantom", "--config", str(path)]) == 1
    assert "error" in capsys.readouterr().err


def test_bad_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"phantom": {"bogus": 1}}')
    assert cli.main(["phantom", "--config", str(path), "--workspace", str(tmp_path / "w")]) == 1
    path.write_text("[1, 2]")
    assert cli.main(["phantom", "--config", str(path), "--workspace", str(tmp_path / "w")]) == 1
    assert cli.main(["phantom", "--jobs", "0", "--workspace", str(tmp_path / "w")]) == 1


def test_stages_end_to_end(config_file):
    ws = _ws(config_file)
    assert run(config_file, "phantom") == 0
    assert run(config_file, "stage1", "--jobs", "2") == 0
    pseudo = json.loads((ws / cli.PSEUDO_MANIFEST).read_text())
    assert len(pseudo["entries"]) == 3
    for e in pseudo["entries"]:
        assert e["loss_trace"][-1] <= e["loss_trace"][0]
        assert read_header(ws / e["field"])["kind"] == "displacement"
        assert load_volume(ws / e["labels"]).dtype == np.uint8

    assert run(config_file, "stage2") == 0
    log_text = (ws / "logs" / "tractpipe.log").read_text()
    assert "model A training set: 1 subject" in log_text
    a_sum = load_model(ws / f"{cli.MODEL_A}.model.json").checksum()

    assert run(config_file, "stage3") == 0
    assert load_model(ws / f"{cli.MODEL_A}.model.json").checksum() == a_sum
    maps = sorted((ws / cli.UNCERTAINTY_DIR).glob("um_*.vol.json"))
    assert len(maps) == 3
    assert read_header(maps[0])["kind"] == "uncertainty"
    ure_model = (ws / f"{cli.MODEL_B[True]}.model.bin").read_bytes()

    # rerun reuses the cached maps and reproduces the checkpoint
    assert run(config_file, "stage3") == 0
    assert "uncertainty maps computed 0, reused 3" in (ws / "logs" / "tractpipe.log").read_text()
    assert (ws / f"{cli.MODEL_B[True]}.model.bin").read_bytes() == ure_model

    assert run(config_file, "stage3", "--no-ure") == 0
    rpa = load_model(ws / f"{cli.MODEL_B[False]}.model.json")
    cfg = load_config(config_file)
    ds = [(load_volume(ws / e["peaks"]), load_volume(ws / e["labels"])) for e in pseudo["entries"]]
    m0 = PatchMLP(3, 3, 1, 4, seed=cfg.model_seed)
    unit = train(m0, ds, cfg.train_b, [np.ones(l.shape) for _, l in ds]).model
    assert unit.checksum() == rpa.checksum()
    assert rpa.checksum() != load_model(ws / f"{cli.MODEL_B[True]}.model.json").checksum()

    subject = ws / json.loads((ws / cli.COHORT_MANIFEST).read_text())["test"][0]["peaks"]
    model = ws / f"{cli.MODEL_B[True]}.model.json"
    out = ws / "pred" / "p"
    assert run(config_file, "predict", "--model", str(model), "--subject", str(subject), "--output", str(out)) == 0
    pred = load_volume(out)
    assert pred.shape == (12, 12, 12, 3)
    assert read_header(out)["kind"] == "prediction"
    first = (ws / "pred" / "p.vol.bin").read_bytes()
    run(config_file, "predict", "--model", str(model), "--subject", str(subject), "--output", str(out))
    assert (ws / "pred" / "p.vol.bin").read_bytes() == first
    assert run(config_file, "predict", "--model", str(ws / "missing"), "--subject", str(subject)) == 1

    assert run(config_file, "evaluate", "--model", str(model), "--method", "rpa+ure") == 0
    rows = (ws / "eval" / "dice_rpa+ure.csv").read_text().splitlines()
    assert rows[0] == "method,subject_id,class,dice"
    assert len(rows) == 1 + 3 + 2


def test_pipeline_outputs_and_determinism(config_file, tmp_path):
    assert run(config_file, "pipeline") == 0
    ws = _ws(config_file)
    ablation = (ws / cli.ABLATION_CSV).read_text().splitlines()
    assert ablation[0] == "method,mean_dice,std_dice"
    assert [r.split(",")[0] for r in ablation[1:]] == list(cli.METHODS)
    first = _tree(ws)
    other = tmp_path / "ws2"
    assert run(config_file, "pipeline", "--jobs", "2", "--workspace", str(other)) == 0
    second = _tree(other)
    assert first.keys() == second.keys()
    for key in first:
        if key.endswith((".csv", ".bin")):
            assert first[key] == second[key], key


def test_seed_changes_outputs(config_file, tmp_path):
    assert run(config_file, "phantom") == 0
    assert run(config_file, "phantom", "--seed", "99", "--workspace", str(tmp_path / "other")) == 0
    a = (_ws(config_file) / "cohort" / "labeled_peaks.vol.bin").read_bytes()
    b = (tmp_path / "other" / "cohort" / "labeled_peaks.vol.bin").read_bytes()
    assert a != b


def test_workspace_env_override(config_file, tmp_path, monkeypatch):
    monkeypatch.setenv("TRACTPIPE_WORKSPACE", str(tmp_path / "envws"))
    assert load_config(config_file).workspace_path == tmp_path / "envws"
    assert load_config(config_file, workspace=tmp_path / "flag").workspace_path == tmp_path / "flag"
    assert run(config_file, "phantom") == 0
    assert (tmp_path / "envws" / cli.COHORT_MANIFEST).exists()


def test_seed_propagation():
    cfg = PipelineConfig.from_dict({"seed": 10})
    assert cfg.phantom.seed == 10 and cfg.registration.seed == 10
    assert (cfg.train_a.seed, cfg.train_b.seed, cfg.model_seed) == (11, 12, 13)
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"nonsense": 1})


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "tractpipe.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("phantom", "stage1", "stage2", "stage3", "predict", "evaluate", "pipeline"):
        assert cmd in out.stdout
