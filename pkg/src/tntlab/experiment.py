"""Experiment orchestration: dataset -> train variants -> evaluate splits -> artifacts on disk."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

from . import nn
from .config import ExperimentConfig
from .errors import ConfigError, DatasetDegeneracyError
from .flow_sim import TEST, TRAIN, Glyph, GlyphDataset, read_dataset, render_glyph_dataset, write_dataset
from .glyphs import pad_to, procedural_glyphs, read_idx_images, read_idx_labels
from .pipeline import EvalResult, PipelineConfig, TrainedModel, evaluate, init_model, train

logger = logging.getLogger(__name__)


def load_glyphs(cfg: ExperimentConfig) -> list:
    g = cfg.glyphs
    size = cfg.pipeline.width
    if g.idx_images is None:
        return procedural_glyphs(g.n_classes, g.n_train, g.n_test, cfg.seed, size, g.jitter)
    images = read_idx_images(g.idx_images)
    labels = read_idx_labels(g.idx_labels)
    if len(images) != len(labels):
        raise DatasetDegeneracyError(f"{len(images)} images but {len(labels)} labels")
    # first n_train + n_test images of each class, in file order
    out, taken = [], {}
    for img, lbl in zip(images, labels):
        lbl = int(lbl)
        if lbl >= g.n_classes:
            continue
        k = taken.get(lbl, 0)
        if k >= g.n_train + g.n_test:
            continue
        taken[lbl] = k + 1
        out.append(Glyph(pad_to(img, size) if img.width != size else img, lbl, TRAIN if k < g.n_train else TEST))
    return out


def build_dataset(cfg: ExperimentConfig, jobs: int = 1) -> GlyphDataset:
    if cfg.dataset:
        path = Path(cfg.dataset)
        if not (path / "manifest.json").exists():
            raise FileNotFoundError(f"no manifest.json under {path}")
        return read_dataset(path)
    if not cfg.simulate:
        raise ConfigError("dataset", "no dataset path given and simulation is disabled")
    return render_glyph_dataset(load_glyphs(cfg), cfg.sim, cfg.sweep, seed=cfg.seed, jobs=jobs)


def samples(dataset: GlyphDataset, role: str, motions: str) -> list:
    return [(it.stream, it.label) for it in dataset.select(role, motions)]


def split_name(split: str) -> str:
    return split.replace("/", "-")


def _log_csv(log, config_hash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "loss", "train_acc"])
    for row in log:
        w.writerow([row["iteration"], repr(row["loss"]), repr(row["train_acc"])])
    return buf.getvalue()


def summary_table(results: dict, variants, splits, config_hash: str) -> str:
    """CSV with one row per variant and one column per train/test split."""
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant"] + list(splits))
    for v in variants:
        w.writerow([v] + [f"{results[v][s].accuracy:.6f}" for s in splits])
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, dataset: Optional[GlyphDataset] = None,
                   out_dir=None) -> dict:
    """Train every configured variant, evaluate every split and write artifacts.

    Returns {variant: {split: EvalResult}}.  Artifacts: config.json, results/*.json,
    logs/*.csv, summary.csv and summary.json, each carrying the config hash.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash()
    cfg.save(out / "config.json")
    ds = dataset if dataset is not None else build_dataset(cfg, jobs)
    if cfg.save_dataset and cfg.dataset is None:
        write_dataset(ds, out / "dataset", {"config_hash": h})

    results: dict = {}
    for variant in cfg.variants:
        pcfg = replace(cfg.pipeline, variant=variant)
        results[variant] = {}
        models: dict = {}
        for split in cfg.splits:
            train_set, test_set = split.split("/")
            if train_set not in models:
                model, log = train(samples(ds, TRAIN, train_set), pcfg, seed=cfg.seed, n_classes=ds.n_classes)
                models[train_set] = model
                _write(out / "logs" / f"{variant}_{train_set}.csv", _log_csv(log, h))
            res = evaluate(models[train_set], samples(ds, TEST, test_set), split)
            results[variant][split] = res
            record = {"config_hash": h, "variant": variant, "seed": cfg.seed, **res.to_dict()}
            _write(out / "results" / f"{variant}_{split_name(split)}.json",
                   json.dumps(record, indent=1, sort_keys=True) + "\n")
            logger.info("%s %s accuracy %.4f", variant, split, res.accuracy)

    _write(out / "summary.csv", summary_table(results, cfg.variants, cfg.splits, h))
    summary = {"config_hash": h, "seed": cfg.seed,
               "accuracy": {v: {s: results[v][s].accuracy for s in cfg.splits} for v in cfg.variants}}
    _write(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return results


# --- single-model artifacts ----------------------------------------------------------

def save_model(model: TrainedModel, path, config_hash: str = "") -> None:
    """Weights as a TNNW file plus a JSON sidecar (path + '.json') describing the network."""
    path = Path(path)
    nn.save_params(model.all_params(), path)
    meta = {"config_hash": config_hash, "n_classes": model.n_classes, "pipeline": asdict(model.cfg)}
    _write(Path(str(path) + ".json"), json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_model(path) -> tuple:
    """(TrainedModel, config_hash) from save_model output."""
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
    pcfg = PipelineConfig(**meta["pipeline"])
    skeleton = init_model(pcfg, int(meta["n_classes"]), 0)
    params = nn.load_params(path)
    if len(params) != len(skeleton.all_params()):
        raise ConfigError("model", f"{path} holds {len(params)} layers, expected {len(skeleton.all_params())}")
    return skeleton.with_params(params), meta.get("config_hash", "")


# --- artifact audit -----------------------------------------------------------------

def artifact_hashes(root) -> dict:
    """config hash recorded by each artifact under ``root`` (JSON key or '# config_hash=' CSV header)."""
    root = Path(root)
    found = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file() or p.name == "config.json":
            continue
        if p.suffix == ".json":
            try:
                data = json.loads(p.read_text(encoding="utf-8"))
            except (json.JSONDecodeError, UnicodeDecodeError):
                continue
            if isinstance(data, dict) and "config_hash" in data:
                found[str(p.relative_to(root))] = data["config_hash"]
            elif isinstance(data, list) and data and isinstance(data[0], dict) and "config_hash" in data[0]:
                found[str(p.relative_to(root))] = data[0]["config_hash"]
        elif p.suffix in (".csv", ".jsonl"):
            first = p.read_text(encoding="utf-8").split("\n", 1)[0]
            if first.startswith("# config_hash="):
                found[str(p.relative_to(root))] = first.split("=", 1)[1].strip()
            elif p.suffix == ".jsonl" and first.startswith("{"):
                found[str(p.relative_to(root))] = json.loads(first).get("config_hash")
    return found


def audit(root, cfg: Optional[ExperimentConfig] = None) -> list:
    """Artifacts whose recorded hash differs from the config (``root``/config.json by default)."""
    root = Path(root)
    if cfg is None:
        cfg = ExperimentConfig.load(root / "config.json")
    expected = cfg.config_hash()
    return [(path, h) for path, h in artifact_hashes(root).items() if h != expected]
