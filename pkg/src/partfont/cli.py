"""Command-line interface: pipeline stages, experiments, and the server.

Exit codes: 0 success, 2 config error, 3 missing dependency, 4 runtime
failure.
"""

from __future__ import annotations

import logging
import sys
import zlib
from pathlib import Path

import click

from . import pipeline
from .config import RunConfig, from_preset
from .dataset import ALPHABET
from .errors import ConfigError, MissingDependency, PartFontError

log = logging.getLogger("partfont")


def _resolve_config(run_dir: str | None, config_path: str | None, preset: str | None) -> RunConfig:
    if config_path:
        cfg = RunConfig.load(config_path)
        if run_dir:
            cfg.run_dir = run_dir
        return cfg
    if run_dir and (Path(run_dir) / "config.yaml").exists():
        cfg = RunConfig.load(Path(run_dir) / "config.yaml")
        cfg.run_dir = run_dir
        if preset and preset != cfg.preset:
            # an explicit preset beats the remembered one
            cfg = from_preset(preset, run_dir)
        return cfg
    return from_preset(preset or "desk", run_dir or "runs/default")


@click.group()
@click.option("--run-dir", type=click.Path(), default=None, help="Run directory for all artifacts.")
@click.option("--config", "config_path", type=click.Path(), default=None, help="Config YAML path.")
@click.option("--preset", type=str, default=None, help="Config preset: desk, paper, or smoke.")
@click.option("-v", "--verbose", is_flag=True, help="Verbose logging.")
@click.pass_context
def cli(ctx, run_dir, config_path, preset, verbose):
    """Few-part-shot font generation pipeline."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    ctx.obj = _resolve_config(run_dir, config_path, preset)


@cli.command("demo-corpus")
@click.option("--out", type=click.Path(), required=True, help="Output corpus directory.")
@click.option("--fonts", type=int, default=70, show_default=True)
@click.option("--size", type=int, default=None, help="Canvas size (defaults to config image size).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_obj
def demo_corpus(cfg: RunConfig, out, fonts, size, seed):
    """Build a synthetic corpus from bundled system fonts."""
    from .demo import build_demo_corpus

    written = build_demo_corpus(out, n_fonts=fonts, size=size or cfg.dataset.image_size, seed=seed)
    click.echo(f"wrote {len(written)} fonts under {out}")


@cli.command()
@click.option("--source", type=click.Path(), default=None, help="Image tree to ingest.")
@click.pass_obj
def ingest(cfg: RunConfig, source):
    """Ingest an image corpus into the glyph cache."""
    if source:
        cfg.dataset.source = str(source)
    fonts = pipeline.stage_ingest(cfg)
    click.echo(f"ingested {len(fonts)} fonts into {pipeline.RunPaths(cfg.run_dir).cache}")


@cli.command()
@click.pass_obj
def split(cfg: RunConfig):
    """Build the family-disjoint train/val/test split."""
    s = pipeline.stage_split(cfg)
    click.echo(f"train/val/test fonts: {len(s.train)}/{len(s.val)}/{len(s.test)}")


def _sizes(cfg: RunConfig, part_size: tuple[int, ...]) -> tuple[int, ...]:
    return part_size or tuple(cfg.parts.part_sizes)


@cli.command("extract-parts")
@click.option("--part-size", type=int, multiple=True, help="Part size(s); default from config.")
@click.pass_obj
def extract_parts_cmd(cfg: RunConfig, part_size):
    """Mine K representative parts per font."""
    for size in _sizes(cfg, part_size):
        counts = pipeline.stage_extract_parts(cfg, size)
        click.echo(f"size {size}: parts extracted for {len(counts)} fonts")


@cli.command("pretrain-encoder")
@click.option("--part-size", type=int, multiple=True)
@click.pass_obj
def pretrain_encoder_cmd(cfg: RunConfig, part_size):
    """Contrastively pretrain the style encoder."""
    for size in _sizes(cfg, part_size):
        ckpt = pipeline.stage_pretrain_encoder(cfg, size)
        click.echo(f"size {size}: encoder checkpoint {ckpt}")


@cli.command("train-diffusion")
@click.option("--part-size", type=int, multiple=True)
@click.option("--from-scratch", is_flag=True, help="Skip the pretrained encoder initialization.")
@click.pass_obj
def train_diffusion_cmd(cfg: RunConfig, part_size, from_scratch):
    """Train the conditional diffusion model (encoder updated jointly)."""
    for size in _sizes(cfg, part_size):
        ckpt = pipeline.stage_train_diffusion(cfg, size, pretrained=not from_scratch)
        click.echo(f"size {size}: diffusion checkpoint {ckpt}")


@cli.command()
@click.option("--parts", "part_files", type=click.Path(exists=True), multiple=True, required=True)
@click.option("--chars", type=str, default=ALPHABET, show_default=False, help="Characters to generate.")
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--part-size", type=int, default=None, help="Which trained model to use.")
@click.option("--out", type=click.Path(), default="generated", show_default=True)
@click.pass_obj
def generate(cfg: RunConfig, part_files, chars, steps, seed, checkpoint, part_size, out):
    """Generate characters from user-supplied part images."""
    import numpy as np

    from .dataset import normalize_polarity
    from .diffusion import load_diffusion_checkpoint, latest_diffusion_checkpoint
    from .parts import Part
    from .util import image_grid, load_grayscale, save_glyph_png

    chars = "".join(sorted(set(chars.upper())))
    bad = [c for c in chars if c not in ALPHABET]
    if bad:
        raise ConfigError(f"chars must be uppercase A..Z, got {bad}")

    if checkpoint is None:
        size = part_size or min(cfg.parts.part_sizes)
        checkpoint = latest_diffusion_checkpoint(pipeline.RunPaths(cfg.run_dir).diffusion(size))
    bundle = load_diffusion_checkpoint(checkpoint)

    parts = []
    for i, pf in enumerate(part_files):
        patch = normalize_polarity(load_grayscale(pf))
        parts.append(Part(patch=patch, center=(0, 0), source_char=None, font_id="user"))
    style = bundle.encoder.encode_set(parts)

    out = Path(out)
    images = []
    for ch in chars:
        glyph = bundle.sample(ch, style, steps=steps, seed=seed ^ zlib.crc32(ch.encode()))
        save_glyph_png(glyph.pixels, out / f"{ch}.png")
        images.append(glyph.pixels)
    save_glyph_png(1.0 - image_grid([1.0 - im for im in images]), out / "grid.png")
    click.echo(f"generated {len(chars)} glyphs under {out}")


@cli.command()
@click.option("--part-size", type=int, multiple=True)
@click.option("--k", "ks", type=int, multiple=True, help="Style part count(s); default from config.")
@click.pass_obj
def evaluate(cfg: RunConfig, part_size, ks):
    """Generate test-split alphabets and score all six metrics."""
    classifiers = pipeline.stage_classifiers(cfg)
    for size in _sizes(cfg, part_size):
        for k in (ks or tuple(cfg.eval.ks)):
            report = pipeline.stage_generate_evaluate(cfg, size, k, classifiers)
            agg = report.aggregate
            click.echo(
                f"size {size} K={k}: L1={agg['l1']:.4f} localL1={agg['local_l1']:.4f} "
                f"SSIM={agg['ssim']:.4f} MSSSIM={agg['msssim']:.4f} "
                f"StyleFID={agg.get('style_fid', float('nan')):.3f} "
                f"ContentFID={agg.get('content_fid', float('nan')):.3f}"
            )


@cli.command()
@click.pass_obj
def ablate(cfg: RunConfig):
    """Run the K x part-size evaluation grid (Fig. 8 protocol analogue)."""
    payload = pipeline.stage_ablate(cfg)
    click.echo(f"ablation grid with {len(payload['cells'])} cells -> {pipeline.RunPaths(cfg.run_dir).ablation}")


@cli.command()
@click.pass_obj
def plot(cfg: RunConfig):
    """Emit the three-panel ablation figure and the class-wise box plot."""
    outs = pipeline.stage_plot(cfg)
    for p in outs:
        click.echo(str(p))


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--part-size", type=int, default=None)
@click.pass_obj
def serve(cfg: RunConfig, host, port, checkpoint, part_size):
    """Serve the studio HTTP API (and the studio UI if built)."""
    import uvicorn

    from .server.app import create_app
    from .diffusion import latest_diffusion_checkpoint

    if checkpoint is None:
        size = part_size or min(cfg.parts.part_sizes)
        try:
            checkpoint = latest_diffusion_checkpoint(pipeline.RunPaths(cfg.run_dir).diffusion(size))
        except FileNotFoundError:
            checkpoint = None
    app = create_app(checkpoint_path=checkpoint, part_size=part_size)
    uvicorn.run(app, host=host, port=port)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except (ConfigError, click.UsageError, click.BadParameter) as e:
        click.echo(f"config error: {e}", err=True)
        return 2
    except MissingDependency as e:
        click.echo(f"missing dependency: {e}", err=True)
        return 3
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.Abort:
        return 130
    except PartFontError as e:
        click.echo(f"error: {e}", err=True)
        return 4
    except Exception as e:  # pragma: no cover - last-resort guard
        log.exception("unhandled failure")
        click.echo(f"error: {e}", err=True)
        return 4


if __name__ == "__main__":
    sys.exit(main())
