import json

import yaml

from atl.checkpoint import save_checkpoint
from atl.cli import main
from atl.vit import ArchSpec, build_model

ARCH = {"depth": 2, "embed_dim": 16, "num_heads": 2, "patch_size": 8}


def config(tmp_path, **fields):
    doc = {"name": "cli", "student_arch": ARCH, "seeds": [0], "max_steps": 2,
           "dataset": {"source": "synthetic-shapes", "train_size": 32, "eval_size": 16},
           "recipe": {"preset": "baseline-desk", "batch_size": 16}}
    doc.update(fields)
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def test_validate_config(tmp_path, capsys):
    assert main(["validate-config", config(tmp_path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["fingerprint"]) == 16 and out["name"] == "cli"


def test_exit_codes(tmp_path, capsys):
    assert main(["validate-config", config(tmp_path, plan={"method": "distill"})]) == 2
    assert "teacher_ref" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: [unclosed")
    assert main(["validate-config", str(bad)]) == 2

    save_checkpoint(build_model(ArchSpec(depth=3, embed_dim=16, num_heads=2, patch_size=8)), tmp_path / "t.ckpt")
    cfg = config(tmp_path, teacher_ref="t.ckpt", plan={"method": "copy"})
    assert main(["transfer", cfg, "--store", str(tmp_path / "runs")]) == 3

    cfg = config(tmp_path, recipe={"preset": "baseline-desk", "batch_size": 16, "base_lr": 1e30,
                                   "warmup_epochs": 0, "mixup_alpha": 0.0, "cutmix_alpha": 0.0},
                 max_steps=50)
    assert main(["baseline", cfg, "--store", str(tmp_path / "runs")]) == 4


def test_baseline_report_and_no_ema_flag(tmp_path, capsys):
    cfg = config(tmp_path)
    store = str(tmp_path / "runs")
    assert main(["baseline", cfg, "--store", store]) == 0
    assert main(["baseline", cfg, "--store", store, "--no-ema-eval"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("cli")]
    fingerprints = {l.rsplit("=", 1)[1] for l in lines}
    assert len(lines) == 2 and len(fingerprints) == 2
    assert main(["report", "--store", store, "--format", "csv"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 3
    assert main(["report", "--store", store, "--query", "name=nothing"]) == 1


def test_sweep_and_diagnose(tmp_path, capsys):
    save_checkpoint(build_model(ArchSpec(**ARCH), 5), tmp_path / "t.ckpt")
    cfg = config(tmp_path, teacher_ref="t.ckpt", plan={"method": "distill"}, max_steps=1,
                 recipe={"preset": "distill-desk", "batch_size": 16})
    store = str(tmp_path / "runs")
    assert main(["sweep", cfg, "--axis", "lambda=0,3", "--store", store]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 2
    assert main(["sweep", cfg, "--axis", "lambda=0", "--axis", "qkv=Q", "--store", store]) == 2
    save_checkpoint(build_model(ArchSpec(**ARCH), 6), tmp_path / "s.ckpt")
    assert main(["diagnose", "--teacher", str(tmp_path / "t.ckpt"), "--student", str(tmp_path / "s.ckpt"),
                 "--samples", "8", "--kind", "js"]) == 0
    assert capsys.readouterr().out.startswith("layer,value\n0,")
