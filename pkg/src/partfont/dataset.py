"""Glyph rasterization, image-directory ingest, and family-disjoint splits.

Internal pixel convention everywhere: float32 in [0, 1], ink = 1,
background = 0. PNGs on disk store ink as white (255) on black.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from fontTools.ttLib import TTFont

from .errors import (
    BadGlyphImage,
    BadImageSize,
    IncompleteFont,
    MissingGlyph,
    TooFewFamilies,
    UnreadableFont,
)

log = logging.getLogger(__name__)

ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
NUM_CLASSES = len(ALPHABET)

# Tallest glyph of a font fills this fraction of the canvas height; the
# remainder is margin. Shared across the font so relative proportions and a
# common baseline are preserved.
GLYPH_HEIGHT_FRACTION = 0.8

# Oversampling factor for outline rendering before the anti-aliased downscale.
_RENDER_OVERSAMPLE = 4


def class_index(char: str) -> int:
    idx = ord(char) - ord("A")
    if not 0 <= idx < NUM_CLASSES:
        raise ValueError(f"char class must be one of A..Z, got {char!r}")
    return idx


@dataclass
class GlyphImage:
    """One character rendered as a fixed-size grayscale raster."""

    pixels: np.ndarray  # HxW float32 in [0,1], ink=1
    char_class: str  # 'A'..'Z'
    font_id: str
    family_id: str

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2 or self.pixels.shape[0] != self.pixels.shape[1]:
            raise BadGlyphImage(f"glyph pixels must be square HxW, got {self.pixels.shape}")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise BadGlyphImage(f"glyph pixels outside [0,1]: min={lo}, max={hi}")
        class_index(self.char_class)

    @property
    def class_index(self) -> int:
        return class_index(self.char_class)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    @property
    def ink_coverage(self) -> float:
        return float(self.pixels.mean())


@dataclass
class FontRecord:
    """All 26 uppercase glyphs of one font."""

    font_id: str
    family_id: str
    glyphs: dict[str, GlyphImage]

    def __post_init__(self):
        missing = [c for c in ALPHABET if c not in self.glyphs]
        if missing:
            raise IncompleteFont(f"font {self.font_id}: missing classes {missing}")
        for g in self.glyphs.values():
            if g.font_id != self.font_id or g.family_id != self.family_id:
                raise BadGlyphImage(
                    f"glyph {g.char_class} identity mismatch in font {self.font_id}"
                )

    @property
    def size(self) -> int:
        return self.glyphs["A"].size

    def glyph(self, char: str) -> GlyphImage:
        return self.glyphs[char]

    def stacked(self) -> np.ndarray:
        """Glyph pixels as a (26, H, W) array in A..Z order."""
        return np.stack([self.glyphs[c].pixels for c in ALPHABET])


@dataclass
class DatasetSplit:
    """Family-disjoint train/val/test partition, stored as font id lists."""

    train: list[str]
    val: list[str]
    test: list[str]
    family_of: dict[str, str] = field(default_factory=dict)
    seed: int | None = None

    def fonts(self, name: str) -> list[str]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def families(self, name: str) -> set[str]:
        return {self.family_of[f] for f in self.fonts(name)}


# ---------------------------------------------------------------------------
# Rasterization from outline fonts
# ---------------------------------------------------------------------------


def _outline_charset(font_file: Path) -> set[str]:
    """Characters of A..Z that the font's cmap actually covers."""
    try:
        tt = TTFont(str(font_file), fontNumber=0, lazy=True)
        cmap = tt.getBestCmap() or {}
        tt.close()
    except Exception as e:  # fontTools raises a zoo of types here
        raise UnreadableFont(f"{font_file}: {e}") from e
    return {c for c in ALPHABET if ord(c) in cmap}


def rasterize_font(font_file: str | Path, size: int = 128) -> FontRecord:
    """Render A..Z of an outline font to size x size ink-on-black rasters.

    The tallest glyph is scaled to GLYPH_HEIGHT_FRACTION of the canvas and
    all glyphs share one scale and one baseline; each glyph is centered
    horizontally on its own bounding box.
    """
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    font_file = Path(font_file)
    covered = _outline_charset(font_file)

    ref_px = size * _RENDER_OVERSAMPLE
    try:
        face = ImageFont.truetype(str(font_file), ref_px)
    except Exception as e:
        raise UnreadableFont(f"{font_file}: {e}") from e

    # Render each glyph inside its (loose) layout box, then tight-crop the
    # ink; getbbox alone reflects metrics, not ink extents.
    crops: dict[str, Image.Image] = {}
    boxes: dict[str, tuple[int, int, int, int]] = {}  # tight, in 'la' text coords
    for ch in ALPHABET:
        if ch not in covered:
            raise MissingGlyph(ch, font_file.name)
        loose = face.getbbox(ch)
        if loose is None or loose[2] <= loose[0] or loose[3] <= loose[1]:
            raise MissingGlyph(ch, font_file.name)
        lx0, ly0, lx1, ly1 = loose
        canvas = Image.new("L", (lx1 - lx0, ly1 - ly0), 0)
        ImageDraw.Draw(canvas).text((-lx0, -ly0), ch, fill=255, font=face)
        tight = canvas.getbbox()
        if tight is None:
            raise MissingGlyph(ch, font_file.name)
        crops[ch] = canvas.crop(tight)
        boxes[ch] = (lx0 + tight[0], ly0 + tight[1], lx0 + tight[2], ly0 + tight[3])

    tallest = max(y1 - y0 for _, y0, _, y1 in boxes.values())
    scale = GLYPH_HEIGHT_FRACTION * size / tallest
    band_top = min(y0 for _, y0, _, _ in boxes.values())
    band_bottom = max(y1 for _, _, _, y1 in boxes.values())
    if (band_bottom - band_top) * scale > size:
        # Deep descenders (Q, J) can push the shared band past the canvas.
        scale = size / (band_bottom - band_top)
    top_margin = (size - (band_bottom - band_top) * scale) / 2.0

    font_id = font_file.stem
    glyphs: dict[str, GlyphImage] = {}
    for ch in ALPHABET:
        x0, y0, x1, y1 = boxes[ch]
        w, h = x1 - x0, y1 - y0
        tw = max(1, round(w * scale))
        th = max(1, round(h * scale))
        small = crops[ch].resize((tw, th), Image.LANCZOS)
        out = Image.new("L", (size, size), 0)
        ix = round((size - tw) / 2.0)
        iy = round(top_margin + (y0 - band_top) * scale)
        out.paste(small, (ix, min(max(iy, 0), size - th)))
        pixels = np.clip(np.asarray(out, dtype=np.float32) / 255.0, 0.0, 1.0)
        if pixels.max() <= 0.0:
            raise MissingGlyph(ch, font_file.name)
        glyphs[ch] = GlyphImage(pixels, ch, font_id, font_id)
    return FontRecord(font_id, font_id, glyphs)


# ---------------------------------------------------------------------------
# Ingest of pre-rendered glyph images
# ---------------------------------------------------------------------------


def normalize_polarity(pixels: np.ndarray) -> np.ndarray:
    """Force the internal ink=1 convention.

    Images whose mean exceeds 0.5 are assumed black-on-white and inverted.
    """
    pixels = np.asarray(pixels, dtype=np.float32)
    if float(pixels.mean()) > 0.5:
        pixels = 1.0 - pixels
    return pixels


def load_glyph_png(path: str | Path, size: int, char: str, font_id: str, family_id: str) -> GlyphImage:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0
    if arr.shape != (size, size):
        raise BadImageSize(f"{path}: expected {size}x{size}, got {arr.shape[1]}x{arr.shape[0]}")
    arr = normalize_polarity(arr)
    coverage = float(arr.mean())
    if not 0.0 < coverage < 0.9:
        raise BadGlyphImage(f"{path}: ink coverage {coverage:.3f} outside (0, 0.9)")
    return GlyphImage(arr, char, font_id, family_id)


def ingest_image_dir(root: str | Path, size: int = 128) -> list[FontRecord]:
    """Read a <family>/<font>/<CHAR>.png tree into FontRecords.

    Polarity is auto-normalized; blank or solid glyphs are rejected.
    """
    root = Path(root)
    records: list[FontRecord] = []
    seen: set[str] = set()
    for family_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for font_dir in sorted(p for p in family_dir.iterdir() if p.is_dir()):
            files = {p.stem: p for p in font_dir.glob("*.png")}
            missing = [c for c in ALPHABET if c not in files]
            if missing:
                raise IncompleteFont(f"font {font_dir.name}: missing classes {missing}")
            font_id = font_dir.name
            if font_id in seen:
                raise IncompleteFont(f"duplicate font id {font_id!r} in corpus")
            seen.add(font_id)
            glyphs = {
                c: load_glyph_png(files[c], size, c, font_id, family_dir.name) for c in ALPHABET
            }
            records.append(FontRecord(font_id, family_dir.name, glyphs))
    return records


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def make_split(
    records: list[FontRecord],
    fractions: tuple[float, float, float],
    seed: int,
) -> DatasetSplit:
    """Partition fonts into train/val/test with no family straddling splits.

    Families are shuffled by a seeded RNG, then assigned greedily so the
    realized font counts approximate the requested fractions.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    families: dict[str, list[str]] = {}
    for r in sorted(records, key=lambda r: r.font_id):
        families.setdefault(r.family_id, []).append(r.font_id)
    if len(families) < 3:
        raise TooFewFamilies(f"need >= 3 families, got {len(families)}")

    order = sorted(families)
    random.Random(seed).shuffle(order)

    total = sum(len(v) for v in families.values())
    cut_train = fractions[0] * total
    cut_val = (fractions[0] + fractions[1]) * total

    buckets: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    count = 0
    for fam in order:
        if count < cut_train:
            dest = "train"
        elif count < cut_val:
            dest = "val"
        else:
            dest = "test"
        buckets[dest].extend(families[fam])
        count += len(families[fam])

    family_of = {r.font_id: r.family_id for r in records}
    return DatasetSplit(
        train=buckets["train"], val=buckets["val"], test=buckets["test"],
        family_of=family_of, seed=seed,
    )


def save_split(split: DatasetSplit, dataset_dir: str | Path) -> None:
    dataset_dir = Path(dataset_dir)
    dataset_dir.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        payload = {
            "split": name,
            "seed": split.seed,
            "fonts": {fid: {"family_id": split.family_of[fid]} for fid in split.fonts(name)},
        }
        (dataset_dir / f"{name}.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_split(dataset_dir: str | Path) -> DatasetSplit:
    dataset_dir = Path(dataset_dir)
    buckets: dict[str, list[str]] = {}
    family_of: dict[str, str] = {}
    seed = None
    for name in ("train", "val", "test"):
        path = dataset_dir / f"{name}.json"
        if not path.exists():
            raise FileNotFoundError(path)
        payload = json.loads(path.read_text())
        buckets[name] = sorted(payload["fonts"])
        seed = payload.get("seed", seed)
        for fid, meta in payload["fonts"].items():
            family_of[fid] = meta["family_id"]
    return DatasetSplit(buckets["train"], buckets["val"], buckets["test"], family_of, seed)


# ---------------------------------------------------------------------------
# Glyph PNG cache
# ---------------------------------------------------------------------------


def save_glyph_cache(record: FontRecord, cache_dir: str | Path) -> Path:
    """Write cache/<font_id>/<CHAR>.png as 8-bit grayscale, ink = white."""
    out = Path(cache_dir) / record.font_id
    out.mkdir(parents=True, exist_ok=True)
    for ch, glyph in record.glyphs.items():
        img = Image.fromarray(np.round(glyph.pixels * 255.0).astype(np.uint8), mode="L")
        img.save(out / f"{ch}.png")
    return out


def load_cached_font(cache_dir: str | Path, font_id: str, family_id: str, size: int) -> FontRecord:
    font_dir = Path(cache_dir) / font_id
    glyphs = {}
    for ch in ALPHABET:
        path = font_dir / f"{ch}.png"
        if not path.exists():
            raise IncompleteFont(f"cache for {font_id} is missing {ch}.png")
        glyphs[ch] = load_glyph_png(path, size, ch, font_id, family_id)
    return FontRecord(font_id, family_id, glyphs)


def ingest_corpus(
    root: str | Path,
    cache_dir: str | Path,
    size: int = 128,
    skip_bad: bool = True,
) -> list[FontRecord]:
    """Ingest an image tree and populate the glyph PNG cache.

    Fonts that fail validation are logged and skipped so one bad file cannot
    abort a corpus build.
    """
    root = Path(root)
    records: list[FontRecord] = []
    for family_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for font_dir in sorted(p for p in family_dir.iterdir() if p.is_dir()):
            try:
                files = {p.stem: p for p in font_dir.glob("*.png")}
                missing = [c for c in ALPHABET if c not in files]
                if missing:
                    raise IncompleteFont(f"font {font_dir.name}: missing classes {missing}")
                glyphs = {
                    c: load_glyph_png(files[c], size, c, font_dir.name, family_dir.name)
                    for c in ALPHABET
                }
                record = FontRecord(font_dir.name, family_dir.name, glyphs)
            except Exception as e:
                if not skip_bad:
                    raise
                log.warning("skipping font %s: %s", font_dir.name, e)
                continue
            save_glyph_cache(record, cache_dir)
            records.append(record)
    return records
