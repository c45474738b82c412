"""Stage orchestration: wiring between dataset, parts, encoder, diffusion,
and metrics, with on-disk artifacts under one run directory.

Every stage validates that its upstream artifacts exist and raises
MissingDependency naming the stage to run first. Re-running a stage with the
same config and seeds reproduces the same manifests and metric JSON.
"""

from __future__ import annotations

import json
import logging
import time
import zlib
from pathlib import Path

import numpy as np
import torch

from . import metrics as M
from .config import RunConfig
from .dataset import (
    ALPHABET,
    DatasetSplit,
    FontRecord,
    ingest_corpus,
    load_cached_font,
    load_split,
    make_split,
    save_split,
)
from .diffusion import (
    ConditionalUNet,
    DiffusionBundle,
    DiffusionTrainer,
    TrainCorpus,
    latest_diffusion_checkpoint,
    load_diffusion_checkpoint,
    save_diffusion_checkpoint,
)
from .encoder import (
    StyleEncoder,
    latest_checkpoint,
    load_encoder_checkpoint,
    pretrain,
    save_encoder_checkpoint,
)
from .errors import MissingDependency
from .parts import extract_parts, load_parts_manifest, save_parts_manifest
from .util import save_glyph_png

log = logging.getLogger(__name__)


class RunPaths:
    """Canonical artifact layout inside a run directory."""

    def __init__(self, run_dir: str | Path):
        self.root = Path(run_dir)

    @property
    def config(self) -> Path:
        return self.root / "config.yaml"

    @property
    def cache(self) -> Path:
        return self.root / "cache"

    @property
    def dataset(self) -> Path:
        return self.root / "dataset"

    def parts(self, size: int) -> Path:
        return self.root / "parts" / f"s{size}"

    def encoder(self, size: int) -> Path:
        return self.root / "encoder" / f"s{size}"

    def diffusion(self, size: int) -> Path:
        return self.root / "diffusion" / f"s{size}"

    @property
    def classifiers(self) -> Path:
        return self.root / "classifiers"

    def samples(self, size: int, k: int) -> Path:
        return self.root / "samples" / f"s{size}-k{k}"

    def eval(self, size: int, k: int) -> Path:
        return self.root / "eval" / f"s{size}-k{k}"

    @property
    def ablation(self) -> Path:
        return self.root / "ablation.json"

    @property
    def plots(self) -> Path:
        return self.root / "plots"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"


def _update_manifest(paths: RunPaths, stage: str, artifacts: list[str]) -> None:
    manifest = {}
    if paths.manifest.exists():
        manifest = json.loads(paths.manifest.read_text())
    manifest[stage] = {
        "completed_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "artifacts": artifacts,
    }
    paths.manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def apply_determinism(cfg: RunConfig) -> None:
    if cfg.strict_determinism:
        torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_ingest(cfg: RunConfig) -> list[str]:
    """Read the source image tree into the glyph cache."""
    paths = RunPaths(cfg.run_dir)
    source = Path(cfg.dataset.source)
    if not cfg.dataset.source or not source.exists():
        raise MissingDependency(
            f"dataset source {source} not found; point dataset.source at a "
            "<family>/<font>/<CHAR>.png tree (e.g. from `partfont demo-corpus`)"
        )
    records = ingest_corpus(source, paths.cache, size=cfg.dataset.image_size)
    if not records:
        raise MissingDependency(f"no valid fonts found under {source}")
    families = {r.font_id: r.family_id for r in records}
    (paths.cache / "families.json").write_text(json.dumps(families, indent=2, sort_keys=True))
    cfg.save(paths.config)
    _update_manifest(paths, "ingest", [str(paths.cache)])
    log.info("ingested %d fonts", len(records))
    return [r.font_id for r in records]


def _load_families(paths: RunPaths) -> dict[str, str]:
    fam_path = paths.cache / "families.json"
    if not fam_path.exists():
        raise MissingDependency("glyph cache missing; run `partfont ingest` first")
    return json.loads(fam_path.read_text())


def _load_records(cfg: RunConfig, font_ids: list[str]) -> list[FontRecord]:
    paths = RunPaths(cfg.run_dir)
    families = _load_families(paths)
    return [
        load_cached_font(paths.cache, fid, families[fid], cfg.dataset.image_size)
        for fid in font_ids
    ]


def stage_split(cfg: RunConfig) -> DatasetSplit:
    paths = RunPaths(cfg.run_dir)
    families = _load_families(paths)
    records = _load_records(cfg, sorted(families))
    split = make_split(records, tuple(cfg.dataset.fractions), cfg.dataset.split_seed)
    save_split(split, paths.dataset)
    _update_manifest(paths, "split", [str(paths.dataset / f"{n}.json") for n in ("train", "val", "test")])
    log.info("split: %d train / %d val / %d test fonts", len(split.train), len(split.val), len(split.test))
    return split


def _require_split(cfg: RunConfig) -> DatasetSplit:
    paths = RunPaths(cfg.run_dir)
    try:
        return load_split(paths.dataset)
    except FileNotFoundError:
        raise MissingDependency("split manifests missing; run `partfont split` first")


def stage_extract_parts(cfg: RunConfig, part_size: int) -> dict[str, int]:
    """Extract K parts for every font in all three splits."""
    paths = RunPaths(cfg.run_dir)
    split = _require_split(cfg)
    out_dir = paths.parts(part_size)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts: dict[str, int] = {}
    for name in ("train", "val", "test"):
        for record in _load_records(cfg, split.fonts(name)):
            parts = extract_parts(record, cfg.parts.k, part_size, seed=cfg.parts.seed)
            save_parts_manifest(parts, out_dir, cfg.parts.k)
            counts[record.font_id] = len(parts)
    _update_manifest(paths, f"extract-parts-s{part_size}", [str(out_dir)])
    log.info("extracted parts (size %d) for %d fonts", part_size, len(counts))
    return counts


def _load_parts_for(cfg: RunConfig, part_size: int, font_ids: list[str]) -> dict:
    paths = RunPaths(cfg.run_dir)
    out: dict[str, list] = {}
    for fid in font_ids:
        manifest = paths.parts(part_size) / f"{fid}.json"
        if not manifest.exists():
            raise MissingDependency(
                f"parts manifest for {fid} (size {part_size}) missing; "
                f"run `partfont extract-parts --part-size {part_size}` first"
            )
        out[fid] = load_parts_manifest(paths.parts(part_size), fid)
    return out


def stage_pretrain_encoder(cfg: RunConfig, part_size: int) -> Path:
    paths = RunPaths(cfg.run_dir)
    apply_determinism(cfg)
    split = _require_split(cfg)
    train_parts = _load_parts_for(cfg, part_size, split.train)
    val_parts = _load_parts_for(cfg, part_size, split.val)
    enc_cfg = type(cfg.encoder)(**{**cfg.encoder.__dict__})
    enc_cfg.part_size = part_size
    encoder, rows = pretrain(
        train_parts, val_parts, enc_cfg, log_path=paths.encoder(part_size) / "log.csv"
    )
    ckpt = save_encoder_checkpoint(encoder, paths.encoder(part_size), step=len(rows))
    _update_manifest(paths, f"pretrain-encoder-s{part_size}", [str(ckpt)])
    log.info("pretrained encoder (size %d): %d epochs, ckpt %s", part_size, len(rows), ckpt.name)
    return ckpt


def stage_train_diffusion(cfg: RunConfig, part_size: int, pretrained: bool = True) -> Path:
    paths = RunPaths(cfg.run_dir)
    apply_determinism(cfg)
    split = _require_split(cfg)
    records = _load_records(cfg, split.train)
    parts = _load_parts_for(cfg, part_size, split.train)

    if pretrained:
        try:
            enc_ckpt = latest_checkpoint(paths.encoder(part_size))
        except FileNotFoundError:
            raise MissingDependency(
                f"encoder checkpoint (size {part_size}) missing; "
                f"run `partfont pretrain-encoder --part-size {part_size}` first"
            )
        encoder = load_encoder_checkpoint(enc_ckpt)
    else:
        enc_cfg = type(cfg.encoder)(**{**cfg.encoder.__dict__})
        enc_cfg.part_size = part_size
        encoder = StyleEncoder.create(enc_cfg)

    diff_cfg = type(cfg.diffusion)(**{**cfg.diffusion.__dict__})
    torch.manual_seed(diff_cfg.seed)
    model = ConditionalUNet(diff_cfg.unet_config())
    schedule = diff_cfg.schedule()
    trainer = DiffusionTrainer(model, encoder, schedule, diff_cfg)
    corpus = TrainCorpus(records, {fid: [p.patch for p in ps] for fid, ps in parts.items()})
    rows = trainer.fit(corpus, diff_cfg.train_steps, log_path=paths.diffusion(part_size) / "log.csv")
    bundle = DiffusionBundle(model, encoder, schedule, diff_cfg, step=trainer.step)
    ckpt = save_diffusion_checkpoint(bundle, paths.diffusion(part_size))
    _update_manifest(paths, f"train-diffusion-s{part_size}", [str(ckpt)])
    log.info(
        "trained diffusion (size %d): %d steps, final loss %.4f",
        part_size, trainer.step, rows[-1][1] if rows else float("nan"),
    )
    return ckpt


def _load_bundle(cfg: RunConfig, part_size: int) -> DiffusionBundle:
    paths = RunPaths(cfg.run_dir)
    try:
        ckpt = latest_diffusion_checkpoint(paths.diffusion(part_size))
    except FileNotFoundError:
        raise MissingDependency(
            f"diffusion checkpoint (size {part_size}) missing; "
            f"run `partfont train-diffusion --part-size {part_size}` first"
        )
    return load_diffusion_checkpoint(ckpt)


def stage_classifiers(cfg: RunConfig) -> tuple[M.FeatureClassifier, M.FeatureClassifier]:
    """Train (or load cached) style and content classifiers on the train split."""
    paths = RunPaths(cfg.run_dir)
    split = _require_split(cfg)
    paths.classifiers.mkdir(parents=True, exist_ok=True)
    out = []
    for role in ("style", "content"):
        ckpt = paths.classifiers / f"{role}.pt"
        if ckpt.exists():
            payload = torch.load(ckpt, map_location="cpu", weights_only=False)
            net = M._ClassifierNet(len(payload["label_names"]), payload["feature_dim"])
            net.load_state_dict(payload["state_dict"])
            net.eval()
            out.append(
                M.FeatureClassifier(role, net, payload["label_names"], payload["val_accuracy"])
            )
            continue
        records = _load_records(cfg, split.train)
        clf = M.train_feature_classifier(
            role, records, M.ClassifierConfig(epochs=cfg.eval.classifier_epochs)
        )
        torch.save(
            {
                "state_dict": clf.net.state_dict(),
                "label_names": clf.label_names,
                "feature_dim": clf.feature_dim,
                "val_accuracy": clf.val_accuracy,
                "role": role,
            },
            ckpt,
        )
        log.info("%s classifier val accuracy: %.3f", role, clf.val_accuracy)
        out.append(clf)
    return out[0], out[1]


def select_style_parts(parts: list, k: int, font_id: str, subset_seed: int) -> list:
    """Deterministic per-font K-subset of the extracted parts."""
    k_eff = min(k, len(parts))
    if k_eff == len(parts):
        return list(parts)
    rng = np.random.default_rng((subset_seed << 16) ^ zlib.crc32(font_id.encode()))
    idx = sorted(rng.choice(len(parts), size=k_eff, replace=False))
    return [parts[int(i)] for i in idx]


def stage_generate_evaluate(
    cfg: RunConfig,
    part_size: int,
    k: int,
    classifiers: tuple | None = None,
    save_samples: bool = True,
) -> M.CorpusReport:
    """Generate test-split alphabets from K-part style vectors and score them."""
    paths = RunPaths(cfg.run_dir)
    apply_determinism(cfg)
    split = _require_split(cfg)
    bundle = _load_bundle(cfg, part_size)
    test_parts = _load_parts_for(cfg, part_size, split.test)
    records = {r.font_id: r for r in _load_records(cfg, split.test)}
    if classifiers is None:
        classifiers = stage_classifiers(cfg)
    style_clf, content_clf = classifiers

    echo = {
        "part_size": part_size,
        "k": k,
        "checkpoint": bundle.checkpoint_id,
        "sample_steps": cfg.eval.sample_steps,
        "seed": cfg.eval.seed,
        "config": cfg.to_dict(),
    }
    pairs = []
    for fid in sorted(records):
        chosen = select_style_parts(test_parts[fid], k, fid, cfg.eval.subset_seed)
        style = bundle.encoder.encode_set(chosen)
        font_seed = cfg.eval.seed ^ zlib.crc32(fid.encode())
        generated = bundle.generate_alphabet(style, steps=cfg.eval.sample_steps, seed=font_seed)
        if save_samples:
            sample_dir = paths.samples(part_size, k) / fid
            sample_dir.mkdir(parents=True, exist_ok=True)
            for ch, glyph in generated.items():
                save_glyph_png(glyph.pixels, sample_dir / f"{ch}.png")
        pairs.append((generated, records[fid]))

    report = M.evaluate_corpus(
        pairs, style_clf, content_clf, local_patch=cfg.eval.local_patch, config_echo=echo
    )
    M.save_report(report, paths.eval(part_size, k))
    _update_manifest(paths, f"evaluate-s{part_size}-k{k}", [str(paths.eval(part_size, k))])
    log.info(
        "evaluated size=%d k=%d: L1 %.4f, localL1 %.4f, SSIM %.4f",
        part_size, k, report.aggregate["l1"], report.aggregate["local_l1"], report.aggregate["ssim"],
    )
    return report


def stage_ablate(cfg: RunConfig) -> dict:
    """Run the K x part-size grid and write ablation.json."""
    paths = RunPaths(cfg.run_dir)
    classifiers = stage_classifiers(cfg)
    cells = []
    for size in cfg.parts.part_sizes:
        for k in cfg.eval.ks:
            report = stage_generate_evaluate(cfg, size, k, classifiers)
            cells.append(
                {
                    "part_size": size,
                    "k": k,
                    "aggregate": report.aggregate,
                    "report": str(paths.eval(size, k) / "report.json"),
                }
            )
    payload = {"cells": cells, "config_echo": cfg.to_dict()}
    paths.ablation.write_text(json.dumps(payload, indent=2))
    _update_manifest(paths, "ablate", [str(paths.ablation)])
    return payload


def stage_plot(cfg: RunConfig) -> list[Path]:
    """Emit the part-ablation three-panel figure and the class-wise box plot."""
    from .plotting import plot_ablation, plot_classwise_l1

    paths = RunPaths(cfg.run_dir)
    if not paths.ablation.exists():
        raise MissingDependency("ablation.json missing; run `partfont ablate` first")
    ablation = json.loads(paths.ablation.read_text())
    paths.plots.mkdir(parents=True, exist_ok=True)
    out1 = plot_ablation(ablation, paths.plots / "part_ablation.png")

    # class-wise panel uses the paper's canonical cell (smallest size, middle K)
    size = min(cfg.parts.part_sizes)
    ks = sorted(cfg.eval.ks)
    k = ks[len(ks) // 2]
    report_csv = paths.eval(size, k) / "report.csv"
    if not report_csv.exists():
        raise MissingDependency(f"{report_csv} missing; run `partfont ablate` first")
    out2 = plot_classwise_l1(report_csv, paths.plots / "classwise_l1.png", title=f"size {size}, K={k}")
    _update_manifest(paths, "plot", [str(out1), str(out2)])
    return [out1, out2]
