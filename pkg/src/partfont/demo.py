"""Synthetic demo corpus: renders bundled TTFs and derives styled variants.

Real runs ingest a font corpus (e.g. Google Fonts). For self-contained demos
and CI we build families out of the fonts shipped with matplotlib/the OS:
each (base face, transform kind) pair becomes a family whose members are two
strengths of that transform, so family-disjoint splits stay meaningful.
"""

from __future__ import annotations

import logging
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .dataset import ALPHABET, FontRecord, GlyphImage, rasterize_font

log = logging.getLogger(__name__)


def bundled_font_files() -> list[Path]:
    """TTF files shipped with matplotlib plus common system font dirs."""
    roots: list[Path] = []
    try:
        import matplotlib

        roots.append(Path(matplotlib.__file__).parent / "mpl-data" / "fonts" / "ttf")
    except ImportError:
        pass
    roots.append(Path("/usr/share/fonts"))
    files: dict[str, Path] = {}
    for root in roots:
        if root.exists():
            for p in sorted(root.rglob("*.ttf")):
                files.setdefault(p.stem, p)
    return [files[k] for k in sorted(files)]


def _apply_weight(pixels: np.ndarray, strength: int) -> np.ndarray:
    kernel = np.ones((3, 3), np.uint8)
    out = cv2.dilate(pixels, kernel, iterations=strength)
    return np.clip(out, 0.0, 1.0)


def _apply_slant(pixels: np.ndarray, shear: float) -> np.ndarray:
    size = pixels.shape[0]
    m = np.float32([[1.0, -shear, shear * size / 2.0], [0.0, 1.0, 0.0]])
    out = cv2.warpAffine(pixels, m, (size, size), flags=cv2.INTER_LINEAR, borderValue=0.0)
    return np.clip(out, 0.0, 1.0)


def _apply_width(pixels: np.ndarray, factor: float) -> np.ndarray:
    size = pixels.shape[0]
    w = max(4, int(round(size * factor)))
    squeezed = cv2.resize(pixels, (w, size), interpolation=cv2.INTER_AREA)
    out = np.zeros_like(pixels)
    x0 = (size - w) // 2
    out[:, x0 : x0 + w] = squeezed
    return np.clip(out, 0.0, 1.0)


_VARIANTS = {
    "regular": [("base", lambda g: g)],
    "bold": [("b1", lambda g: _apply_weight(g, 1)), ("b2", lambda g: _apply_weight(g, 2))],
    "slant": [("s1", lambda g: _apply_slant(g, 0.18)), ("s2", lambda g: _apply_slant(g, 0.3))],
    "narrow": [("n1", lambda g: _apply_width(g, 0.8)), ("n2", lambda g: _apply_width(g, 0.62))],
}


def _transform_record(record: FontRecord, font_id: str, family_id: str, fn) -> FontRecord | None:
    glyphs = {}
    for ch in ALPHABET:
        pixels = fn(record.glyphs[ch].pixels)
        coverage = float(pixels.mean())
        if not 0.01 < coverage < 0.85:
            return None  # transform destroyed or saturated the glyph
        glyphs[ch] = GlyphImage(pixels, ch, font_id, family_id)
    return FontRecord(font_id, family_id, glyphs)


def build_demo_corpus(
    out_dir: str | Path,
    n_fonts: int = 70,
    size: int = 128,
    seed: int = 0,
) -> list[str]:
    """Write a <family>/<font>/<CHAR>.png tree with roughly n_fonts fonts.

    PNGs are written black-on-white so ingest exercises polarity detection.
    Returns the list of font ids written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    bases: list[FontRecord] = []
    for ttf in bundled_font_files():
        try:
            bases.append(rasterize_font(ttf, size))
        except Exception as e:
            log.info("skipping %s: %s", ttf.name, e)
    if not bases:
        raise RuntimeError("no renderable base fonts found on this system")

    # deterministic base order, lightly shuffled so families mix faces
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(bases))

    written: list[str] = []
    done = False
    for variant_kind, members in _VARIANTS.items():
        if done:
            break
        for bi in order:
            base = bases[int(bi)]
            family_id = f"{base.font_id}-{variant_kind}"
            records = []
            for tag, fn in members:
                font_id = f"{base.font_id}-{variant_kind}-{tag}"
                rec = _transform_record(base, font_id, family_id, fn)
                if rec is None:
                    records = []
                    break
                records.append(rec)
            if not records:
                continue
            for rec in records:
                font_dir = out_dir / family_id / rec.font_id
                font_dir.mkdir(parents=True, exist_ok=True)
                for ch, glyph in rec.glyphs.items():
                    # black-on-white on disk; ingest re-normalizes polarity
                    img = np.round((1.0 - glyph.pixels) * 255.0).astype(np.uint8)
                    Image.fromarray(img, mode="L").save(font_dir / f"{ch}.png")
                written.append(rec.font_id)
            if len(written) >= n_fonts:
                done = True
                break
    if len(written) < n_fonts:
        log.warning("requested %d fonts but only %d could be built", n_fonts, len(written))
    return written
