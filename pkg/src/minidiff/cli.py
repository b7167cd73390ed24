"""Pipeline orchestration: adapt -> generate -> evaluate -> tune -> expand ->
train-classifier -> report, over a fixed workdir layout.

Workdir layout (fixed so stages can locate upstream artifacts):
    checkpoints/   base.ckpt, <class>/token.ckpt, <class>/lora.ckpt,
                   <class>/model.ckpt, probe.ckpt
    generated/     <class>/gen_<seed>.png
    manifests/     data.jsonl, generated.jsonl, tuned.json, rejects.txt
    reports/       *.csv with a rendered figure next to each table
    logs/          runs.jsonl (append-only run records)

Stages are idempotent: when every output of a stage already exists the stage
is skipped unless --force is passed. Exit codes: 0 ok, 2 config error,
3 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import adaptation, classifier, data, metrics, nets, report, sampling, tuning
from .checkpoint import (
    load_adapter_checkpoint,
    load_archive,
    load_model_checkpoint,
    save_adapter_checkpoint,
    save_archive,
    save_model_checkpoint,
)
from .config import (
    config_hash,
    parse_config,
    parse_grid,
    parse_ratio,
)
from .errors import ConfigError, DependencyMissingError
from .nets import GeneratorModel, ModelConfig
from .sampling import GenerationConfig
from .schedule import make_schedule

STAGES = ("pretrain-base", "adapt-token", "adapt-lora", "generate", "tune",
          "fid-report", "classify", "full-pipeline")

VERB_TO_STAGE = {
    "pretrain": "pretrain-base",
    "adapt-token": "adapt-token",
    "adapt-lora": "adapt-lora",
    "generate": "generate",
    "tune": "tune",
    "fid": "fid-report",
    "classify": "classify",
    "pipeline": "full-pipeline",
}

_DIRS = ("checkpoints", "generated", "manifests", "reports", "logs")


class Workdir:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        for d in _DIRS:
            (self.root / d).mkdir(parents=True, exist_ok=True)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def manifest_path(self) -> Path:
        return self.path("manifests", "data.jsonl")

    def generated_manifest_path(self) -> Path:
        return self.path("manifests", "generated.jsonl")


class _Lock:
    """One stage at a time per workdir."""

    def __init__(self, workdir: Workdir):
        self.lockfile = workdir.path(".lock")

    def __enter__(self):
        try:
            fd = os.open(self.lockfile, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"workdir is locked by another run ({self.lockfile}); "
                "remove the lockfile if that run is dead") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.lockfile.unlink(missing_ok=True)
        return False


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def _log_run(wd: Workdir, record: dict) -> None:
    with open(wd.path("logs", "runs.jsonl"), "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise DependencyMissingError(produced_by, str(path))
    return path


def _model_config(cfg: dict) -> ModelConfig:
    mode = cfg["model.latent_mode"]
    return ModelConfig(
        image_size=cfg["model.image_size"],
        latent_mode=mode,
        spatial_factor=1 if mode == "identity" else cfg["model.spatial_factor"],
        latent_channels=1 if mode == "identity" else cfg["model.latent_channels"],
        ae_width=cfg["model.ae_width"],
        denoiser_width=cfg["model.denoiser_width"],
        denoiser_blocks=cfg["model.denoiser_blocks"],
        embed_dim=cfg["model.embed_dim"],
        text_blocks=cfg["model.text_blocks"],
        placeholder_width=cfg["model.placeholder_width"],
        timesteps=cfg["schedule.T"],
    )


def _class_seed(root_seed: int, class_index: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence(root_seed, spawn_key=(salt, class_index)
                                      ).generate_state(1)[0])


def _class_images(manifest: data.DatasetManifest, label: str) -> np.ndarray:
    entries = manifest.of_class(label, split="train", provenance="real")
    return np.stack([data.load_image(e.path, manifest.image_size) for e in entries])


def _trainable_word(cfg: dict) -> str | None:
    return cfg["adapt.trainable_word"] or None


def _adapted_checkpoint(wd: Workdir, cfg: dict, label: str) -> Path:
    """The most-adapted checkpoint consistent with the ablation flags."""
    if cfg["pipeline.lora"] or cfg["pipeline.full_param"]:
        return _require(wd.path("checkpoints", label, "model.ckpt"), "adapt-lora")
    if cfg["pipeline.token"]:
        return _require(wd.path("checkpoints", label, "token.ckpt"), "adapt-token")
    return _require(wd.path("checkpoints", "base.ckpt"), "pretrain")


def _load_probe(wd: Workdir, cfg: dict, manifest: data.DatasetManifest):
    if cfg["fid.extractor"] == "downsampled-pixels":
        return "downsampled-pixels", None
    probe_path = wd.path("checkpoints", "probe.ckpt")
    run = classifier.TrainRun(epochs=cfg["classify.epochs"],
                              batch_size=cfg["classify.batch"],
                              lr=cfg["classify.lr"], seed=cfg["seed"],
                              patience=cfg["classify.patience"],
                              channels=cfg["classify.channels"])
    if probe_path.exists():
        arrays, meta = load_archive(probe_path)
        probe = classifier.DefectClassifier(len(manifest.classes),
                                            channels=meta["channels"],
                                            widths=tuple(meta["widths"]),
                                            seed=meta["seed"])
        import torch

        probe.load_state_dict({k[len("param."):]: torch.from_numpy(v.copy())
                               for k, v in arrays.items()})
        return "trained-probe-net", probe
    probe, _ = classifier.train_classifier(manifest, run)
    arrays = {f"param.{k}": v.detach().cpu().numpy()
              for k, v in probe.state_dict().items()}
    save_archive(probe_path, arrays,
                 {"kind": "probe", "channels": run.channels,
                  "widths": list(run.widths), "seed": run.seed})
    return "trained-probe-net", probe


# ---------------------------------------------------------------------------
# Stage implementations (each returns a list of output paths)

def _stage_pretrain(wd: Workdir, cfg: dict) -> list[Path]:
    seed = cfg["seed"]
    root = cfg["data.root"]
    if not root:
        root = wd.path("corpus")
        if not root.exists():
            data.synth_corpus([c for c in cfg["data.synth_classes"].split(",") if c],
                              cfg["data.synth_n"], cfg["model.image_size"],
                              seed=seed, root=root)
    manifest = data.ingest(root, parse_ratio(cfg["data.ratio"]), seed=seed,
                           image_size=cfg["model.image_size"])
    data.save_manifest(manifest, wd.manifest_path())
    if manifest.rejects:
        wd.path("manifests", "rejects.txt").write_text(
            "\n".join(manifest.rejects) + "\n")
    images, labels = data.load_split_images(manifest, "train")
    sched = make_schedule(cfg["schedule.T"], cfg["schedule.kind"])
    model = GeneratorModel(_model_config(cfg), seed=seed)
    ae_hist = nets.pretrain_autoencoder(model, images,
                                        iterations=cfg["pretrain.ae_iterations"],
                                        lr=cfg["pretrain.ae_lr"], seed=seed)
    prompts = [f"a photo of {c}" for c in manifest.classes]
    hist = nets.pretrain_generator(model, images, labels, prompts, sched,
                                   iterations=cfg["pretrain.iterations"],
                                   batch_size=cfg["pretrain.batch"],
                                   lr=cfg["pretrain.lr"],
                                   null_cond_prob=cfg["pretrain.null_prob"],
                                   seed=seed)
    ckpt = wd.path("checkpoints", "base.ckpt")
    save_model_checkpoint(ckpt, model, sched, stage="base",
                          config_hash=config_hash(cfg), seed=seed)
    if ae_hist:
        report.save_loss_curve(wd.path("reports", "pretrain_ae_loss.png"), ae_hist,
                               title="auto-encoder reconstruction loss")
    report.save_loss_curve(wd.path("reports", "pretrain_loss.png"), hist,
                           title="base generator training loss")
    return [ckpt, wd.manifest_path()]


def _stage_adapt_token(wd: Workdir, cfg: dict) -> list[Path]:
    base = _require(wd.path("checkpoints", "base.ckpt"), "pretrain")
    manifest = data.load_manifest(_require(wd.manifest_path(), "pretrain"))
    outputs = []
    for ci, label in enumerate(manifest.classes):
        model, sched, _ = load_model_checkpoint(base)
        images = _class_images(manifest, label)
        acfg = adaptation.AdaptationConfig(
            stage="token", iterations=cfg["adapt.iterations"],
            batch_size=cfg["adapt.batch"], lr=cfg["adapt.lr.token"],
            seed=_class_seed(cfg["seed"], ci, salt=1),
            null_cond_prob=cfg["adapt.null_prob"])
        v_star = adaptation.train_token_embedding(
            images, cfg["adapt.prompt"], model, sched, acfg,
            trainable_word=_trainable_word(cfg))
        out = wd.path("checkpoints", label, "token.ckpt")
        out.parent.mkdir(parents=True, exist_ok=True)
        save_model_checkpoint(out, model, sched, stage="token-adapted",
                              config_hash=config_hash(cfg), seed=acfg.seed,
                              extra={"class": label, "prompt": cfg["adapt.prompt"],
                                     "probe_loss": nets.probe_loss(
                                         model, images, v_star, sched)})
        outputs.append(out)
    return outputs


def _stage_adapt_lora(wd: Workdir, cfg: dict) -> list[Path]:
    manifest = data.load_manifest(_require(wd.manifest_path(), "pretrain"))
    outputs = []
    for ci, label in enumerate(manifest.classes):
        if cfg["pipeline.token"]:
            upstream = _require(wd.path("checkpoints", label, "token.ckpt"),
                                "adapt-token")
        else:
            upstream = _require(wd.path("checkpoints", "base.ckpt"), "pretrain")
        model, sched, _ = load_model_checkpoint(upstream)
        images = _class_images(manifest, label)
        v_star = model.tokenize(cfg["adapt.prompt"], _trainable_word(cfg))
        acfg = adaptation.AdaptationConfig(
            stage="lora", iterations=cfg["adapt.iterations"],
            batch_size=cfg["adapt.batch"], lr=cfg["adapt.lr.lora"],
            seed=_class_seed(cfg["seed"], ci, salt=2),
            null_cond_prob=cfg["adapt.null_prob"])
        out_dir = wd.path("checkpoints", label)
        out_dir.mkdir(parents=True, exist_ok=True)
        extra = {"class": label, "prompt": cfg["adapt.prompt"]}
        if cfg["pipeline.full_param"]:
            acfg.stage = "full"
            adaptation.train_full_parameter(images, v_star, model, sched, acfg)
            extra["adaptation"] = "full-parameter"
        else:
            adapter = adaptation.attach_lora(model, r=cfg["adapt.rank"],
                                             seed=acfg.seed)
            adaptation.train_lora(images, v_star, model, sched, acfg)
            save_adapter_checkpoint(out_dir / "lora.ckpt", adapter,
                                    config_hash=config_hash(cfg), seed=acfg.seed)
            adaptation.merge_lora(adapter, model)
            extra["adaptation"] = "lora"
            outputs.append(out_dir / "lora.ckpt")
        extra["probe_loss"] = nets.probe_loss(model, images, v_star, sched)
        out = out_dir / "model.ckpt"
        save_model_checkpoint(out, model, sched, stage="lora-adapted",
                              config_hash=config_hash(cfg), seed=acfg.seed,
                              extra=extra)
        outputs.append(out)
    return outputs


def _tuned_registry(wd: Workdir) -> dict:
    path = wd.path("manifests", "tuned.json")
    if path.exists():
        return json.loads(path.read_text())
    return {}


def _stage_generate(wd: Workdir, cfg: dict) -> list[Path]:
    manifest = data.load_manifest(_require(wd.manifest_path(), "pretrain"))
    tuned = _tuned_registry(wd)
    entries = []
    outputs = []
    for ci, label in enumerate(manifest.classes):
        model, sched, _ = load_model_checkpoint(_adapted_checkpoint(wd, cfg, label))
        v = model.tokenize(cfg["adapt.prompt"], _trainable_word(cfg))
        knobs = tuned.get(label, {})
        gcfg = GenerationConfig(
            omega_cfg=float(knobs.get("omega_cfg", cfg["gen.omega_cfg"])),
            strength=float(knobs.get("strength", cfg["gen.strength"])),
            mode=cfg["gen.mode"],
            seed=_class_seed(cfg["seed"], ci, salt=3))
        sources = _class_images(manifest, label)
        source_ids = [Path(e.path).name for e in
                      manifest.of_class(label, split="train", provenance="real")]
        images, class_entries = sampling.generate_dataset(
            model, v, sources, sched, gcfg, n=cfg["gen.n"], class_label=label,
            out_dir=wd.path("generated"), source_ids=source_ids,
            from_noise=not cfg["gen.image_oriented"], batch_size=cfg["gen.batch"])
        entries.extend(class_entries)
        fig = wd.path("reports", f"samples_{label}.png")
        report.save_image_grid(fig, images[:16], title=f"generated: {label}")
        outputs.append(fig)
    gen_manifest = data.DatasetManifest(entries=entries, classes=manifest.classes,
                                        image_size=manifest.image_size)
    data.save_manifest(gen_manifest, wd.generated_manifest_path())
    outputs.append(wd.generated_manifest_path())
    return outputs


def _stage_tune(wd: Workdir, cfg: dict) -> list[Path]:
    manifest = data.load_manifest(_require(wd.manifest_path(), "pretrain"))
    extractor, probe = _load_probe(wd, cfg, manifest)
    grid = parse_grid(cfg["tune.grid"])
    registry: dict = _tuned_registry(wd)
    table_all = []
    outputs = []
    for ci, label in enumerate(manifest.classes):
        model, sched, _ = load_model_checkpoint(_adapted_checkpoint(wd, cfg, label))
        v = model.tokenize(cfg["adapt.prompt"], _trainable_word(cfg))
        real = _class_images(manifest, label)
        seed = _class_seed(cfg["seed"], ci, salt=4)
        if cfg["tune.strategy"] == "coordinate-descent":
            omegas = sorted({w for w, _ in grid})
            strengths = sorted({s for _, s in grid})
            best, table = tuning.coordinate_descent(
                model, v, real, omegas, strengths, cfg["tune.n_per_cell"], sched,
                seed=seed, extractor=extractor, probe=probe,
                mode=cfg["gen.mode"], class_label=label)
        else:
            best, table = tuning.grid_search(
                model, v, real, grid, cfg["tune.n_per_cell"], sched, seed=seed,
                extractor=extractor, probe=probe, mode=cfg["gen.mode"],
                class_label=label,
                variance_probes=cfg["tune.variance_probes"])
        tuning.record_best(registry, label, best)
        table_all.extend(table)
        fig = wd.path("reports", f"tune_{label}.png")
        report.save_grid_heatmap(fig, table, title=f"FID over (omega, s): {label}")
        outputs.append(fig)
    csv_path = wd.path("reports", "tune.csv")
    cols = ["class", "omega_cfg", "strength", "fid", "n", "seed"]
    if any("fid_std" in row for row in table_all):
        cols.append("fid_std")
    report.write_csv(csv_path, table_all, cols)
    tuned_path = wd.path("manifests", "tuned.json")
    tuned_path.write_text(json.dumps(
        {label: {"omega_cfg": b.omega_cfg, "strength": b.strength, "seed": b.seed}
         for label, b in registry.items()}, indent=2, sort_keys=True))
    return outputs + [csv_path, tuned_path]


def _stage_fid(wd: Workdir, cfg: dict) -> list[Path]:
    manifest = data.load_manifest(_require(wd.manifest_path(), "pretrain"))
    gen_manifest = data.load_manifest(
        _require(wd.generated_manifest_path(), "generate"))
    extractor, probe = _load_probe(wd, cfg, manifest)
    rows = []
    for label in manifest.classes:
        real = _class_images(manifest, label)
        gen_entries = gen_manifest.of_class(label, provenance="generated")
        gen = np.stack([data.load_image(e.path, manifest.image_size)
                        for e in gen_entries])
        stats_r = metrics.gaussian_stats(metrics.extract_features(real, extractor, probe))
        stats_g = metrics.gaussian_stats(metrics.extract_features(gen, extractor, probe))
        rows.append({"class": label, "extractor": extractor,
                     "n_real": len(real), "n_gen": len(gen),
                     "fid": metrics.fid(stats_r, stats_g)})
    csv_path = wd.path("reports", "fid.csv")
    report.write_csv(csv_path, rows, ["class", "extractor", "n_real", "n_gen", "fid"])
    fig = wd.path("reports", "fid.png")
    report.save_bar_chart(fig, [r["class"] for r in rows], [r["fid"] for r in rows],
                          ylabel="FID", title="generated-set distance by class")
    return [csv_path, fig]


def _stage_classify(wd: Workdir, cfg: dict) -> list[Path]:
    manifest = data.load_manifest(_require(wd.manifest_path(), "pretrain"))
    alpha = cfg["classify.alpha"]
    expand_n = cfg["classify.expand_n"]
    needs_pool = (cfg["classify.substitute"] and alpha < 1.0) or expand_n > 0
    pool = None
    if needs_pool:
        pool = data.load_manifest(
            _require(wd.generated_manifest_path(), "generate"))
    work = manifest
    if alpha < 1.0:
        if cfg["classify.substitute"]:
            work = data.substitute(work, alpha, pool, seed=cfg["seed"])
        else:
            work = data.subset_train(work, alpha, seed=cfg["seed"])
    if expand_n > 0:
        work = data.expand(work, pool, expand_n)
    run = classifier.TrainRun(epochs=cfg["classify.epochs"],
                              batch_size=cfg["classify.batch"],
                              lr=cfg["classify.lr"], seed=cfg["seed"],
                              patience=cfg["classify.patience"],
                              channels=cfg["classify.channels"])
    model, history = classifier.train_classifier(work, run)
    test_acc, confusion = classifier.evaluate(model, work, "test")
    run_id = f"{config_hash(cfg)}-s{cfg['seed']}"
    hist_path = wd.path("reports", f"classifier_history_{run_id}.csv")
    report.write_csv(hist_path, history, ["epoch", "train_loss", "val_acc"])
    report.save_history_curves(wd.path("reports", f"classifier_{run_id}.png"),
                               history, title=f"classifier run {run_id}")
    runs_path = wd.path("reports", "classifier_runs.csv")
    row = {"run_id": run_id, "alpha": alpha,
           "substitute": cfg["classify.substitute"], "expansion_n": expand_n,
           "test_acc": test_acc}
    existing = report.read_csv(runs_path) if runs_path.exists() else []
    existing.append(row)
    report.write_csv(runs_path, existing,
                     ["run_id", "alpha", "substitute", "expansion_n", "test_acc"])
    np.savetxt(wd.path("reports", f"confusion_{run_id}.csv"), confusion,
               fmt="%d", delimiter=",")
    return [hist_path, runs_path]


def _stage_sentinels(wd: Workdir, cfg: dict, stage: str) -> list[Path]:
    """Outputs whose joint existence lets a stage be skipped."""
    if stage == "pretrain-base":
        return [wd.path("checkpoints", "base.ckpt"), wd.manifest_path()]
    if stage in ("adapt-token", "adapt-lora"):
        if not wd.manifest_path().exists():
            return [wd.path("missing")]
        manifest = data.load_manifest(wd.manifest_path(), check_paths=False)
        name = "token.ckpt" if stage == "adapt-token" else "model.ckpt"
        return [wd.path("checkpoints", c, name) for c in manifest.classes]
    if stage == "generate":
        return [wd.generated_manifest_path()]
    if stage == "tune":
        return [wd.path("reports", "tune.csv"), wd.path("manifests", "tuned.json")]
    if stage == "fid-report":
        return [wd.path("reports", "fid.csv")]
    return [wd.path("missing")]   # classify and full-pipeline always run


_STAGE_FNS = {
    "pretrain-base": _stage_pretrain,
    "adapt-token": _stage_adapt_token,
    "adapt-lora": _stage_adapt_lora,
    "generate": _stage_generate,
    "tune": _stage_tune,
    "fid-report": _stage_fid,
    "classify": _stage_classify,
}


def run_stage(stage: str, config_path: str | Path | None, workdir: str | Path,
              seed: int | None = None, force: bool = False,
              overrides: dict | None = None) -> dict:
    """Run one pipeline stage (or the whole pipeline) in a workdir and append
    a run record to the log."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    overrides = dict(overrides or {})
    if seed is not None:
        overrides["seed"] = seed
    cfg = parse_config(config_path, overrides)
    wd = Workdir(workdir)
    with _Lock(wd):
        return _run_stage_locked(stage, cfg, wd, force)


def _run_stage_locked(stage: str, cfg: dict, wd: Workdir, force: bool) -> dict:
    if stage == "full-pipeline":
        t0 = time.time()
        sub_stages = ["pretrain-base"]
        if cfg["pipeline.token"]:
            sub_stages.append("adapt-token")
        if cfg["pipeline.lora"] or cfg["pipeline.full_param"]:
            sub_stages.append("adapt-lora")
        if cfg["pipeline.tune"]:
            sub_stages.append("tune")
        sub_stages.append("generate")
        sub_stages.append("fid-report")
        if cfg["pipeline.classify"]:
            sub_stages.append("classify")
        records = [_run_stage_locked(s, cfg, wd, force) for s in sub_stages]
        record = {"stage": "full-pipeline", "config_hash": config_hash(cfg),
                  "seed": cfg["seed"], "wall_time_s": round(time.time() - t0, 3),
                  "stages": [r["stage"] for r in records], "skipped": False,
                  "outputs": sorted({o for r in records for o in r["outputs"]})}
        _log_run(wd, record)
        return record

    sentinels = _stage_sentinels(wd, cfg, stage)
    if not force and all(p.exists() for p in sentinels):
        record = {"stage": stage, "config_hash": config_hash(cfg),
                  "seed": cfg["seed"], "wall_time_s": 0.0, "skipped": True,
                  "outputs": [str(p.relative_to(wd.root)) for p in sentinels]}
        _log_run(wd, record)
        return record

    inputs = {}
    for name in ("checkpoints/base.ckpt", "manifests/data.jsonl",
                 "manifests/generated.jsonl"):
        p = wd.path(*name.split("/"))
        if p.exists():
            inputs[name] = _file_hash(p)
    t0 = time.time()
    outputs = _STAGE_FNS[stage](wd, cfg)
    record = {"stage": stage, "config_hash": config_hash(cfg), "seed": cfg["seed"],
              "wall_time_s": round(time.time() - t0, 3), "skipped": False,
              "input_hashes": inputs,
              "outputs": sorted(str(Path(o).relative_to(wd.root)) for o in outputs)}
    _log_run(wd, record)
    return record


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="minidiff",
        description="desk-scale diffusion data expansion for defect recognition")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERB_TO_STAGE:
        p = sub.add_parser(verb)
        p.add_argument("--config", type=str, default=None,
                       help="key=value config file (defaults used when omitted)")
        p.add_argument("--workdir", type=str, required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--force", action="store_true",
                       help="re-run even when stage outputs already exist")
    args = parser.parse_args(argv)
    try:
        record = run_stage(VERB_TO_STAGE[args.verb], args.config, args.workdir,
                           seed=args.seed, force=args.force)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DependencyMissingError as exc:
        print(f"dependency missing: {exc}", file=sys.stderr)
        return 3
    status = "skipped (outputs exist)" if record.get("skipped") else \
        f"done in {record['wall_time_s']}s"
    print(f"[{record['stage']}] {status}; outputs: "
          f"{', '.join(record['outputs'][:6])}"
          f"{' ...' if len(record['outputs']) > 6 else ''}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
