import json

import numpy as np
import pytest

from minidiff.cli import VERB_TO_STAGE, Workdir, main, run_stage
from minidiff.config import (
    DEFAULTS,
    config_hash,
    default_config,
    parse_config,
    parse_grid,
    parse_ratio,
)
from minidiff.errors import ConfigError

TINY_CFG = """
# desk-scale smoke settings
schedule.T = 30
model.image_size = 16
model.latent_mode = identity
model.denoiser_width = 8
model.denoiser_blocks = 2
model.embed_dim = 8
data.synth_n = 8
data.ratio = 6,1,1
pretrain.ae_iterations = 0
pretrain.iterations = 8
adapt.iterations = 4
gen.n = 2
gen.batch = 4
classify.epochs = 2
tune.grid = omega=1,2 strength=0.3,0.6
tune.n_per_cell = 4
fid.extractor = downsampled-pixels
"""


def test_defaults_match_stated_protocol_values():
    # values the source protocol states outright
    assert DEFAULTS["adapt.iterations"][0] == 1000
    assert DEFAULTS["adapt.batch"][0] == 4
    assert DEFAULTS["adapt.lr.token"][0] == 5e-4
    assert DEFAULTS["adapt.lr.lora"][0] == 1e-4
    assert DEFAULTS["adapt.rank"][0] == 1
    assert DEFAULTS["adapt.prompt"][0] == "a photo of <unknown>"
    assert DEFAULTS["classify.batch"][0] == 32
    assert DEFAULTS["classify.lr"][0] == 1e-4
    assert DEFAULTS["gen.n"][0] == 1000
    assert DEFAULTS["data.ratio"][0] == "8,1,1"
    assert DEFAULTS["tune.grid"][0] == "omega=3,4,5,6,7 strength=0.3,0.4,0.5,0.6,0.7"
    assert DEFAULTS["schedule.T"][0] == 1000


def test_parse_config_defaults_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 7\nadapt.iterations = 50  # quick\n\n"
                    "pipeline.lora = false\n")
    cfg = parse_config(path)
    assert cfg["seed"] == 7
    assert cfg["adapt.iterations"] == 50
    assert cfg["pipeline.lora"] is False
    assert cfg["adapt.batch"] == 4  # untouched default
    cfg2 = parse_config(path, overrides={"seed": 9})
    assert cfg2["seed"] == 9
    assert parse_config(None) == default_config()


def test_parse_config_reports_offending_keys(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("adapt.iterations = 10\nnot.a.key = 5\nseed = many\nnonsense\n")
    with pytest.raises(ConfigError) as err:
        parse_config(path)
    message = str(err.value)
    assert "not.a.key" in message
    assert "seed" in message
    assert "nonsense" in message
    with pytest.raises(ConfigError):
        parse_config(None, overrides={"mystery": 1})


def test_parse_grid():
    grid = parse_grid("omega=3,4 strength=0.3,0.4")
    assert grid == [(3.0, 0.3), (4.0, 0.3), (3.0, 0.4), (4.0, 0.4)]
    assert parse_grid(DEFAULTS["tune.grid"][0]) == [
        (w, s) for s in (0.3, 0.4, 0.5, 0.6, 0.7) for w in (3, 4, 5, 6, 7)]
    for bad in ("omega=3", "strength=0.3", "omega=x strength=0.3",
                "foo=1 strength=0.2", "omega:3 strength=0.1"):
        with pytest.raises(ConfigError):
            parse_grid(bad)


def test_parse_ratio():
    assert parse_ratio("8,1,1") == (8.0, 1.0, 1.0)
    assert parse_ratio("140,30,30") == (140.0, 30.0, 30.0)
    with pytest.raises(ConfigError):
        parse_ratio("8,1")


def test_config_hash_sensitivity():
    a = default_config()
    b = dict(a, seed=1)
    assert config_hash(a) == config_hash(default_config())
    assert config_hash(a) != config_hash(b)


def test_verbs_cover_all_stages():
    assert set(VERB_TO_STAGE.values()) == {
        "pretrain-base", "adapt-token", "adapt-lora", "generate", "tune",
        "fid-report", "classify", "full-pipeline"}


def test_cli_config_error_exit_code(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("unknown.key = 1\n")
    assert main(["pretrain", "--config", str(cfg),
                 "--workdir", str(tmp_path / "w")]) == 2


def test_cli_dependency_missing_exit_code(tmp_path):
    assert main(["adapt-token", "--workdir", str(tmp_path / "w")]) == 3
    assert main(["fid", "--workdir", str(tmp_path / "w2")]) == 3
    assert main(["classify", "--workdir", str(tmp_path / "w3")]) == 3


def test_unknown_stage_rejected(tmp_path):
    with pytest.raises(ConfigError):
        run_stage("finetune", None, tmp_path)


def test_workdir_lock(tmp_path):
    wd = Workdir(tmp_path)
    (tmp_path / ".lock").write_text("123")
    with pytest.raises(RuntimeError):
        run_stage("classify", None, tmp_path)
    (tmp_path / ".lock").unlink()


@pytest.mark.slow
def test_pretrain_stage_and_idempotency(tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(TINY_CFG)
    wd_root = tmp_path / "w"
    record = run_stage("pretrain-base", cfg_path, wd_root, seed=0)
    assert not record["skipped"]
    assert (wd_root / "checkpoints" / "base.ckpt").exists()
    assert (wd_root / "manifests" / "data.jsonl").exists()
    assert (wd_root / "reports" / "pretrain_loss.png").exists()
    again = run_stage("pretrain-base", cfg_path, wd_root, seed=0)
    assert again["skipped"]
    log_lines = (wd_root / "logs" / "runs.jsonl").read_text().splitlines()
    records = [json.loads(line) for line in log_lines]
    assert [r["skipped"] for r in records] == [False, True]
    assert all(r["stage"] == "pretrain-base" for r in records)
    assert all(r["config_hash"] == records[0]["config_hash"] for r in records)
    forced = run_stage("pretrain-base", cfg_path, wd_root, seed=0, force=True)
    assert not forced["skipped"]


@pytest.mark.slow
def test_full_pipeline_tiny_smoke(tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(TINY_CFG + "pipeline.classify = true\n")
    wd_root = tmp_path / "w"
    record = run_stage("full-pipeline", cfg_path, wd_root, seed=1)
    assert record["stage"] == "full-pipeline"
    assert set(record["stages"]) == {"pretrain-base", "adapt-token", "adapt-lora",
                                     "generate", "fid-report", "classify"}
    wd = Workdir(wd_root)
    assert wd.generated_manifest_path().exists()
    assert wd.path("reports", "fid.csv").exists()
    assert wd.path("reports", "fid.png").exists()
    assert wd.path("reports", "classifier_runs.csv").exists()
    fid_rows = wd.path("reports", "fid.csv").read_text().splitlines()
    assert fid_rows[0] == "class,extractor,n_real,n_gen,fid"
    assert len(fid_rows) == 5  # header + 4 classes
    # generated images landed in per-class directories with seed names
    classes = ("scratch", "pit", "patch", "scale")
    for c in classes:
        pngs = list(wd.path("generated", c).glob("gen_*.png"))
        assert len(pngs) == 2
    # sample grids rendered next to the delimited reports
    for c in classes:
        assert wd.path("reports", f"samples_{c}.png").exists()
