"""Evaluation metrics: L1, local L1, SSIM, MS-SSIM, StyleFID, ContentFID.

All image metrics operate on grayscale arrays in [0,1]. FIDs are computed
from penultimate features of small classifiers trained on the run's own
corpus, so they are internally consistent across configurations but not
comparable to numbers produced with other feature extractors.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.signal
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import ALPHABET, FontRecord, GlyphImage
from .errors import NonFiniteInput, ShapeMismatch, TooSmall
from .parts import crop_patch, detect_keypoints_in_images

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

LOCAL_L1_PATCH = 32


def _as_image(a) -> np.ndarray:
    if isinstance(a, GlyphImage):
        a = a.pixels
    return np.asarray(a, dtype=np.float64)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ShapeMismatch(f"expected 2-D grayscale images, got ndim={a.ndim}")


def l1(a, b) -> float:
    """Mean absolute pixel-wise difference."""
    a, b = _as_image(a), _as_image(b)
    _check_pair(a, b)
    return float(np.abs(a - b).mean())


def local_l1(
    target,
    generated,
    patch: int = LOCAL_L1_PATCH,
    keypoints: list[tuple[int, int]] | None = None,
) -> float:
    """L1 averaged over patches around keypoints detected on the target.

    The same window is cropped from both images (border-padded). Returns NaN
    when the target yields no keypoints; callers exclude such glyphs from
    aggregation.
    """
    a, b = _as_image(target), _as_image(generated)
    _check_pair(a, b)
    if keypoints is None:
        kps = detect_keypoints_in_images([a.astype(np.float32)], patch_size=patch)
        keypoints = [(int(round(k.x)), int(round(k.y))) for k in kps]
    if not keypoints:
        return float("nan")
    vals = [
        float(np.abs(crop_patch(a, cx, cy, patch) - crop_patch(b, cx, cy, patch)).mean())
        for cx, cy in keypoints
    ]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# SSIM / MS-SSIM
# ---------------------------------------------------------------------------


def _gaussian_window(size: int = _SSIM_WINDOW, sigma: float = _SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


_WINDOW = _gaussian_window()


def _ssim_maps(a: np.ndarray, b: np.ndarray, data_range: float = 1.0):
    """Luminance*structure map and contrast-structure map over valid windows."""
    conv = lambda img: scipy.signal.convolve2d(img, _WINDOW, mode="valid")
    c1 = (_SSIM_K1 * data_range) ** 2
    c2 = (_SSIM_K2 * data_range) ** 2
    mu_a, mu_b = conv(a), conv(b)
    s_aa = conv(a * a) - mu_a * mu_a
    s_bb = conv(b * b) - mu_b * mu_b
    s_ab = conv(a * b) - mu_a * mu_b
    cs = (2.0 * s_ab + c2) / (s_aa + s_bb + c2)
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    return lum * cs, cs


def ssim(a, b, data_range: float = 1.0) -> float:
    """Structural similarity with the 11x11 sigma-1.5 Gaussian window."""
    a, b = _as_image(a), _as_image(b)
    _check_pair(a, b)
    if min(a.shape) < _SSIM_WINDOW:
        raise TooSmall(f"images must be >= {_SSIM_WINDOW} px per side for SSIM")
    full, _ = _ssim_maps(a, b, data_range)
    return float(full.mean())


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    x = img[:h, :w]
    return (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2]) / 4.0


def msssim_scales(side: int) -> int:
    """Usable scale count: every scale needs the 11-px window to fit, max 5."""
    if side < _SSIM_WINDOW:
        raise TooSmall(f"images must be >= {_SSIM_WINDOW} px per side for MS-SSIM")
    return min(len(_MSSSIM_WEIGHTS) - 1, int(np.floor(np.log2(side / _SSIM_WINDOW))) + 1)


def msssim(a, b, data_range: float = 1.0, scales: int | None = None) -> float:
    """Multi-scale SSIM with renormalized standard weights.

    128-px glyphs use 4 scales (a 5th would shrink below the 11-px window);
    smaller canvases reduce the count accordingly.
    """
    a, b = _as_image(a), _as_image(b)
    _check_pair(a, b)
    n = msssim_scales(min(a.shape)) if scales is None else scales
    weights = np.asarray(_MSSSIM_WEIGHTS[:n], dtype=np.float64)
    weights = weights / weights.sum()
    vals = []
    for level in range(n):
        full, cs = _ssim_maps(a, b, data_range)
        vals.append(float(full.mean()) if level == n - 1 else float(cs.mean()))
        if level < n - 1:
            a, b = _downsample2(a), _downsample2(b)
    vals = np.maximum(np.asarray(vals), 0.0)  # negative cs would NaN the fractional power
    return float(np.prod(vals**weights))


# ---------------------------------------------------------------------------
# Frechet distance
# ---------------------------------------------------------------------------


def frechet_distance(
    mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray, cov2: np.ndarray
) -> float:
    """||mu1-mu2||^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2)).

    The matrix square root is computed plain first; a 1e-6 diagonal jitter
    is applied only if that fails numerically, so the exact closed-form
    cases stay exact.
    """
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    cov1, cov2 = np.asarray(cov1, dtype=np.float64), np.asarray(cov2, dtype=np.float64)
    for arr in (mu1, cov1, mu2, cov2):
        if not np.isfinite(arr).all():
            raise NonFiniteInput("frechet_distance received NaN/Inf")

    def _sqrtm_trace(c1, c2):
        covmean, _ = scipy.linalg.sqrtm(c1 @ c2, disp=False)
        if not np.isfinite(covmean).all():
            return None
        if np.iscomplexobj(covmean):
            if np.abs(covmean.imag).max() > 1e-6:
                return None
            covmean = covmean.real
        return float(np.trace(covmean))

    tr_covmean = _sqrtm_trace(cov1, cov2)
    if tr_covmean is None:
        eye = 1e-6 * np.eye(cov1.shape[0])
        tr_covmean = _sqrtm_trace(cov1 + eye, cov2 + eye)
        if tr_covmean is None:
            raise NonFiniteInput("matrix square root did not converge")
    diff = mu1 - mu2
    fid = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_covmean)
    return max(fid, 0.0)


def feature_statistics(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(features, dtype=np.float64)
    return feats.mean(axis=0), np.cov(feats, rowvar=False)


def fid_from_features(real: np.ndarray, generated: np.ndarray) -> float:
    mu_r, cov_r = feature_statistics(real)
    mu_g, cov_g = feature_statistics(generated)
    return frechet_distance(mu_r, cov_r, mu_g, cov_g)


# ---------------------------------------------------------------------------
# Feature classifiers for StyleFID / ContentFID
# ---------------------------------------------------------------------------


@dataclass
class ClassifierConfig:
    epochs: int = 25
    lr: float = 1e-3
    batch: int = 64
    val_fraction: float = 0.1
    feature_dim: int = 256
    seed: int = 0


class _ClassifierNet(nn.Module):
    def __init__(self, num_labels: int, feature_dim: int = 256):
        super().__init__()
        chans = (32, 64, 128, 256)
        blocks, prev = [], 1
        for c in chans:
            blocks += [nn.Conv2d(prev, c, 3, stride=2, padding=1), nn.GroupNorm(8, c), nn.SiLU()]
            prev = c
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(chans[-1], feature_dim)
        self.head = nn.Linear(feature_dim, num_labels)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.blocks(x * 2.0 - 1.0).mean(dim=(2, 3))
        return self.fc(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(F.silu(self.features(x)))


@dataclass
class FeatureClassifier:
    """Wraps a trained CNN whose penultimate features feed the FIDs."""

    role: str  # "style" (font identity labels) or "content" (character labels)
    net: _ClassifierNet
    label_names: list[str]
    val_accuracy: float = 0.0

    @property
    def feature_dim(self) -> int:
        return self.net.fc.out_features

    def features(self, images: np.ndarray, batch: int = 128) -> np.ndarray:
        """Penultimate-layer features for a (N, H, W) stack of [0,1] images."""
        self.net.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(images), batch):
                x = torch.from_numpy(
                    np.ascontiguousarray(images[start : start + batch], dtype=np.float32)
                ).unsqueeze(1)
                out.append(self.net.features(x).numpy())
        feats = np.concatenate(out, axis=0)
        if not np.isfinite(feats).all():
            raise NonFiniteInput(f"{self.role} classifier produced non-finite features")
        return feats


def train_feature_classifier(
    role: str,
    records: list[FontRecord],
    config: ClassifierConfig | None = None,
) -> FeatureClassifier:
    """Train the style (font id) or content (character) classifier."""
    if role not in ("style", "content"):
        raise ValueError(f"role must be 'style' or 'content', got {role!r}")
    config = config or ClassifierConfig()

    images, labels = [], []
    if role == "content":
        label_names = list(ALPHABET)
        for r in records:
            for ch in ALPHABET:
                images.append(r.glyphs[ch].pixels)
                labels.append(ALPHABET.index(ch))
    else:
        label_names = sorted(r.font_id for r in records)
        index = {f: i for i, f in enumerate(label_names)}
        for r in records:
            for ch in ALPHABET:
                images.append(r.glyphs[ch].pixels)
                labels.append(index[r.font_id])

    x = np.stack(images).astype(np.float32)
    y = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(x))
    n_val = max(1, int(round(config.val_fraction * len(x))))
    val_idx, train_idx = order[:n_val], order[n_val:]

    torch.manual_seed(config.seed)
    net = _ClassifierNet(len(label_names), config.feature_dim)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    for _ in range(config.epochs):
        net.train()
        for start in range(0, len(train_idx), config.batch):
            idx = train_idx[start : start + config.batch]
            xb = torch.from_numpy(x[idx]).unsqueeze(1)
            yb = torch.from_numpy(y[idx])
            loss = F.cross_entropy(net(xb), yb)
            opt.zero_grad()
            loss.backward()
            opt.step()

    net.eval()
    with torch.no_grad():
        logits = net(torch.from_numpy(x[val_idx]).unsqueeze(1))
        acc = float((logits.argmax(dim=1).numpy() == y[val_idx]).mean())
    return FeatureClassifier(role=role, net=net, label_names=label_names, val_accuracy=acc)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    """Per-character and aggregate scores for one generated font."""

    font_id: str
    per_char: dict[str, dict[str, float]]
    aggregate: dict[str, float]
    local_l1_skipped: int = 0
    config_echo: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "font_id": self.font_id,
            "per_char": self.per_char,
            "aggregate": self.aggregate,
            "local_l1_skipped": self.local_l1_skipped,
            "config_echo": self.config_echo,
        }


def evaluate_font(
    generated: dict[str, GlyphImage] | dict[str, np.ndarray],
    target: FontRecord,
    local_patch: int = LOCAL_L1_PATCH,
    config_echo: dict | None = None,
) -> MetricReport:
    """Score one generated alphabet against its target font.

    FIDs are corpus-level quantities and are attached by evaluate_corpus.
    """
    per_char: dict[str, dict[str, float]] = {}
    skipped = 0
    mss = []
    for ch in ALPHABET:
        if ch not in generated:
            raise ShapeMismatch(f"generated alphabet missing {ch}")
        gen = _as_image(generated[ch])
        ref = target.glyphs[ch].pixels.astype(np.float64)
        row = {
            "l1": l1(ref, gen),
            "local_l1": local_l1(ref, gen, patch=local_patch),
            "ssim": ssim(ref, gen),
        }
        if np.isnan(row["local_l1"]):
            skipped += 1
        per_char[ch] = row
        mss.append(msssim(ref, gen))

    locals_ = [v["local_l1"] for v in per_char.values() if not np.isnan(v["local_l1"])]
    aggregate = {
        "l1": float(np.mean([v["l1"] for v in per_char.values()])),
        "local_l1": float(np.mean(locals_)) if locals_ else float("nan"),
        "ssim": float(np.mean([v["ssim"] for v in per_char.values()])),
        "msssim": float(np.mean(mss)),
    }
    return MetricReport(
        font_id=target.font_id,
        per_char=per_char,
        aggregate=aggregate,
        local_l1_skipped=skipped,
        config_echo=config_echo or {},
    )


@dataclass
class CorpusReport:
    fonts: list[MetricReport]
    aggregate: dict[str, float]
    config_echo: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "fonts": [f.to_dict() for f in self.fonts],
            "aggregate": self.aggregate,
            "config_echo": self.config_echo,
        }


def evaluate_corpus(
    pairs: list[tuple[dict[str, GlyphImage], FontRecord]],
    style_classifier: FeatureClassifier | None = None,
    content_classifier: FeatureClassifier | None = None,
    local_patch: int = LOCAL_L1_PATCH,
    config_echo: dict | None = None,
) -> CorpusReport:
    """Per-font metrics plus pooled StyleFID/ContentFID over the whole corpus."""
    reports = [evaluate_font(gen, tgt, local_patch, config_echo) for gen, tgt in pairs]
    agg: dict[str, float] = {}
    for key in ("l1", "local_l1", "ssim", "msssim"):
        vals = [r.aggregate[key] for r in reports if not np.isnan(r.aggregate[key])]
        agg[key] = float(np.mean(vals)) if vals else float("nan")

    gen_stack = np.stack(
        [_as_image(gen[ch]) for gen, _ in pairs for ch in ALPHABET]
    ).astype(np.float32)
    real_stack = np.stack(
        [tgt.glyphs[ch].pixels for _, tgt in pairs for ch in ALPHABET]
    ).astype(np.float32)
    if style_classifier is not None:
        agg["style_fid"] = fid_from_features(
            style_classifier.features(real_stack), style_classifier.features(gen_stack)
        )
    if content_classifier is not None:
        agg["content_fid"] = fid_from_features(
            content_classifier.features(real_stack), content_classifier.features(gen_stack)
        )
    return CorpusReport(fonts=reports, aggregate=agg, config_echo=config_echo or {})


def save_report(report: CorpusReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Write report.json plus flat per-(font,char) report.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2, allow_nan=True))
    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["font_id", "char", "l1", "local_l1", "ssim"])
        for rep in report.fonts:
            for ch, row in rep.per_char.items():
                writer.writerow(
                    [rep.font_id, ch, f"{row['l1']:.6f}", f"{row['local_l1']:.6f}", f"{row['ssim']:.6f}"]
                )
    return json_path, csv_path
