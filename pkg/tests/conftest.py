"""Shared fixtures: cached rasterized fonts, small corpora, a tiny checkpoint."""

from __future__ import annotations

import numpy as np
import pytest
import torch

torch.set_num_threads(2)

DEJAVU_SANS = "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf"
DEJAVU_SERIF = "/usr/share/fonts/truetype/dejavu/DejaVuSerif.ttf"


@pytest.fixture(scope="session")
def dejavu_64():
    from partfont.dataset import rasterize_font

    return rasterize_font(DEJAVU_SANS, 64)


@pytest.fixture(scope="session")
def dejavu_128():
    from partfont.dataset import rasterize_font

    return rasterize_font(DEJAVU_SANS, 128)


@pytest.fixture(scope="session")
def dejavu_parts_32(dejavu_64):
    from partfont.parts import extract_parts

    return extract_parts(dejavu_64, 26, 32, seed=0)


def synth_record(font_id: str, family_id: str, size: int = 64, seed: int = 0):
    """Cheap deterministic FontRecord: a distinct bar doodle per character,
    with per-font stroke thickness as the 'style'."""
    from partfont.dataset import ALPHABET, FontRecord, GlyphImage

    thickness = 2 + seed % 4
    margin = 6 + (seed * 3) % 5  # font-specific frame position
    span = size - 12
    glyphs = {}
    for i, ch in enumerate(ALPHABET):
        img = np.zeros((size, size), dtype=np.float32)
        x = 4 + (i * span) // 26
        img[margin : size - 6, x : x + thickness] = 1.0
        y = 4 + (((i * 7) % 26) * span) // 26
        img[y : y + thickness, margin : size - 6] = 1.0
        glyphs[ch] = GlyphImage(img, ch, font_id, family_id)
    return FontRecord(font_id, family_id, glyphs)


@pytest.fixture(scope="session")
def synth_records():
    return [synth_record(f"font{i:02d}", f"fam{i // 2:02d}", seed=i) for i in range(12)]


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory, dejavu_64):
    """A 12-font demo corpus image tree at 64 px (for ingest/CLI tests)."""
    from partfont.demo import build_demo_corpus

    root = tmp_path_factory.mktemp("corpus")
    build_demo_corpus(root, n_fonts=12, size=64, seed=0)
    return root


@pytest.fixture(scope="session")
def tiny_bundle(dejavu_64):
    """A briefly trained 32-px diffusion bundle: exercises every code path
    cheaply; output quality is irrelevant for the tests that use it."""
    import cv2

    from partfont.dataset import ALPHABET, FontRecord, GlyphImage
    from partfont.diffusion import (
        ConditionalUNet,
        DiffusionBundle,
        DiffusionConfig,
        DiffusionTrainer,
        TrainCorpus,
    )
    from partfont.encoder import EncoderConfig, StyleEncoder
    from partfont.parts import extract_parts

    glyphs = {
        ch: GlyphImage(
            cv2.resize(g.pixels, (32, 32), interpolation=cv2.INTER_AREA).clip(0, 1),
            ch,
            "tiny",
            "tiny",
        )
        for ch, g in dejavu_64.glyphs.items()
    }
    record = FontRecord("tiny", "tiny", glyphs)
    parts = extract_parts(record, 8, 32, seed=0)

    cfg = DiffusionConfig(
        image_size=32, base=16, mults=(1, 2), attn_levels=1, heads=2,
        batch=8, train_steps=30, sample_steps=8, seed=0,
    )
    torch.manual_seed(0)
    model = ConditionalUNet(cfg.unet_config())
    encoder = StyleEncoder.create(EncoderConfig(part_size=32, seed=0))
    trainer = DiffusionTrainer(model, encoder, cfg.schedule(), cfg)
    corpus = TrainCorpus([record], {"tiny": [p.patch for p in parts]})
    trainer.fit(corpus, cfg.train_steps)
    bundle = DiffusionBundle(model, encoder, cfg.schedule(), cfg, step=trainer.step,
                             checkpoint_id="tiny-test")
    bundle._parts = parts  # handy for server tests
    return bundle


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_bundle, tmp_path_factory):
    from partfont.diffusion import save_diffusion_checkpoint

    out = tmp_path_factory.mktemp("ckpt")
    return save_diffusion_checkpoint(tiny_bundle, out)
