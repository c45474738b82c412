"""Permutation-invariant style encoder over part sets.

Each patch runs through a small CNN; the per-part embeddings are summed and
the sum normalized to unit length. Summation follows a canonical part order
(source char, center, patch digest) with duplicate patches folded into
integer counts, which makes permutation invariance and duplicate-multiset
invariance hold bitwise, not just approximately.
"""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateSum, EmptySet, InsufficientParts, SizeMismatch
from .parts import Part, PartSet

EMBED_DIM = 256
_DEGENERATE_NORM = 1e-8


@dataclass
class StyleVector:
    """256-dim unit-norm aggregate of a part set."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if self.values.shape != (EMBED_DIM,):
            raise ValueError(f"style vector must be {EMBED_DIM}-dim, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("style vector contains non-finite values")
        norm = float(np.linalg.norm(self.values))
        if abs(norm - 1.0) > 1e-5:
            raise ValueError(f"style vector norm {norm} violates unit-norm invariant")

    def torch(self) -> torch.Tensor:
        return torch.from_numpy(self.values)


@dataclass
class EncoderConfig:
    embed_dim: int = EMBED_DIM
    part_size: int = 32
    min_set: int = 1
    max_set: int = 8
    batch: int = 64
    temperature: float = 1.0
    lr: float = 1e-4
    max_epochs: int = 500
    early_stop_patience: int = 500  # desk-scale runs override this (default 20 there)
    allow_resize: bool = True
    seed: int = 0

    @property
    def negatives(self) -> int:
        return self.batch - 1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch < 2:
            raise ValueError("contrastive batch needs at least 2 fonts")


class PartEncoderNet(nn.Module):
    """CNN mapping a single patch to a 256-dim embedding (pre-normalization).

    Four stride-2 conv blocks then global average pooling, so one set of
    weights serves 32/64/128 patches alike.
    """

    def __init__(self, embed_dim: int = EMBED_DIM):
        super().__init__()
        chans = (32, 64, 128, 256)
        blocks = []
        prev = 1
        for c in chans:
            blocks += [
                nn.Conv2d(prev, c, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(8, c),
                nn.SiLU(),
            ]
            prev = c
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(chans[-1], embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, 1, P, P) in [0,1]; shift to [-1,1] for a centered input
        h = self.blocks(x * 2.0 - 1.0)
        h = h.mean(dim=(2, 3))
        return self.head(h)


def _canonical_groups(parts: list[Part]) -> tuple[np.ndarray, np.ndarray]:
    """Order-free grouping of a part multiset.

    Returns (unique patches stacked (U,P,P), counts (U,)) sorted by the
    canonical key (source char, center y, center x, patch digest).
    """
    groups: dict[tuple, list] = {}
    for p in parts:
        ch = p.source_char if p.source_char else "~"
        key = (ch, p.center[1], p.center[0], p.digest())
        if key in groups:
            groups[key][1] += 1
        else:
            groups[key] = [p.patch, 1]
    keys = sorted(groups)
    patches = np.stack([groups[k][0] for k in keys]).astype(np.float32)
    counts = np.array([groups[k][1] for k in keys], dtype=np.float32)
    return patches, counts


class StyleEncoder:
    """Inference-facing wrapper around PartEncoderNet."""

    def __init__(self, net: PartEncoderNet, config: EncoderConfig):
        self.net = net
        self.config = config

    @classmethod
    def create(cls, config: EncoderConfig) -> "StyleEncoder":
        torch.manual_seed(config.seed)
        return cls(PartEncoderNet(config.embed_dim), config)

    def _prepare_patch(self, part: Part) -> np.ndarray:
        p = self.config.part_size
        if part.size == p:
            return part.patch
        if not self.config.allow_resize:
            raise SizeMismatch(f"part size {part.size} != encoder part size {p}")
        return cv2.resize(part.patch, (p, p), interpolation=cv2.INTER_AREA).astype(np.float32)

    def encode_batch(self, patches: np.ndarray) -> torch.Tensor:
        """Embed a (B, P, P) stack of patches; (B, embed_dim), no grad."""
        self.net.eval()
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(patches, dtype=np.float32))
            return self.net(x.unsqueeze(1))

    def encode_part(self, part: Part) -> np.ndarray:
        """Per-part embedding before aggregation and normalization."""
        patch = self._prepare_patch(part)
        vec = self.encode_batch(patch[None]).numpy()[0]
        if not np.isfinite(vec).all():
            raise ValueError("encoder produced non-finite embedding")
        return vec

    def encode_set(self, parts: PartSet | list[Part]) -> StyleVector:
        """Sum per-part embeddings in canonical order and unit-normalize."""
        items = parts.parts if isinstance(parts, PartSet) else list(parts)
        if not items:
            raise EmptySet("encode_set needs at least one part")
        items = [
            Part(self._prepare_patch(p), p.center, p.source_char, p.font_id, p.medoid_index, p.scale)
            for p in items
        ]
        patches, counts = _canonical_groups(items)
        vecs = self.encode_batch(patches)
        summed = (vecs * torch.from_numpy(counts)[:, None]).sum(dim=0)
        norm = torch.linalg.vector_norm(summed)
        if float(norm) < _DEGENERATE_NORM:
            raise DegenerateSum("aggregated embedding has near-zero norm")
        return StyleVector((summed / norm).numpy())

    def encode_sets_train(self, sets: list[list[np.ndarray]], device=None) -> torch.Tensor:
        """Differentiable batched encoding of several part sets.

        sets: list of lists of (P,P) patches. Returns (B, embed_dim) of
        unit-norm style vectors with gradients attached.
        """
        flat = [patch for s in sets for patch in s]
        owners = torch.tensor(
            [i for i, s in enumerate(sets) for _ in s], dtype=torch.long, device=device
        )
        x = torch.from_numpy(np.stack(flat).astype(np.float32)).unsqueeze(1)
        if device is not None:
            x = x.to(device)
        vecs = self.net(x)
        summed = torch.zeros(len(sets), vecs.shape[1], dtype=vecs.dtype, device=vecs.device)
        summed.index_add_(0, owners, vecs)
        norms = torch.linalg.vector_norm(summed, dim=1, keepdim=True).clamp_min(_DEGENERATE_NORM)
        return summed / norms


# ---------------------------------------------------------------------------
# InfoNCE
# ---------------------------------------------------------------------------


def info_nce_loss(
    anchor: np.ndarray,
    positive: np.ndarray,
    negatives: np.ndarray,
    temperature: float = 1.0,
) -> float:
    """-log( exp(a.p/t) / (exp(a.p/t) + sum_j exp(a.n_j/t)) ) on unit vectors."""
    loss, _ = info_nce_loss_and_grad(anchor, positive, negatives, temperature)
    return loss


def info_nce_loss_and_grad(
    anchor: np.ndarray,
    positive: np.ndarray,
    negatives: np.ndarray,
    temperature: float = 1.0,
) -> tuple[float, np.ndarray]:
    """InfoNCE loss plus its analytic gradient w.r.t. the anchor.

    With rows M = [positive; negatives], logits z = M a / t and softmax w:
    loss = logsumexp(z) - z_0, grad_a = (w^T M - positive) / t.
    """
    a = np.asarray(anchor, dtype=np.float64).reshape(-1)
    p = np.asarray(positive, dtype=np.float64).reshape(-1)
    n = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if n.shape[0] < 1:
        raise ValueError("need at least one negative")
    m = np.vstack([p[None, :], n])
    z = m @ a / temperature
    zmax = z.max()
    lse = zmax + np.log(np.exp(z - zmax).sum())
    loss = float(lse - z[0])
    w = np.exp(z - lse)
    grad = (w @ m - p) / temperature
    return loss, grad


def info_nce_batch(
    anchors: torch.Tensor, positives: torch.Tensor, temperature: float
) -> torch.Tensor:
    """Batched InfoNCE where each anchor's negatives are the other positives."""
    logits = anchors @ positives.T / temperature
    target = torch.arange(anchors.shape[0], device=anchors.device)
    return F.cross_entropy(logits, target)


# ---------------------------------------------------------------------------
# Contrastive pretraining
# ---------------------------------------------------------------------------


@dataclass
class TrainLogRow:
    epoch: int
    train_loss: float
    val_loss: float


def _contrastive_epoch_batches(
    font_parts: list[list[np.ndarray]],
    batch: int,
    rng: np.random.Generator,
):
    order = rng.permutation(len(font_parts))
    for start in range(0, len(order), batch):
        chunk = order[start : start + batch]
        if len(chunk) < 2:
            continue  # a single font has no negatives
        yield [font_parts[i] for i in chunk]


def _draw_pairs(fonts_in_batch: list[list[np.ndarray]], rng: np.random.Generator):
    """Anchor/positive patch subsets per font, disjoint when possible."""
    anchors, positives = [], []
    for patches in fonts_in_batch:
        n = len(patches)
        hi = min(8, n)
        s1, s2 = int(rng.integers(1, hi + 1)), int(rng.integers(1, hi + 1))
        if s1 + s2 <= n:
            picked = rng.choice(n, size=s1 + s2, replace=False)
            first, second = picked[:s1], picked[s1:]
        else:
            first = rng.choice(n, size=s1, replace=False)
            second = rng.choice(n, size=s2, replace=False)
        anchors.append([patches[int(i)] for i in first])
        positives.append([patches[int(i)] for i in second])
    return anchors, positives


def _epoch_loss(
    encoder: StyleEncoder,
    font_parts: list[list[np.ndarray]],
    config: EncoderConfig,
    rng: np.random.Generator,
    optimizer: torch.optim.Optimizer | None,
) -> float:
    losses = []
    for batch_fonts in _contrastive_epoch_batches(font_parts, config.batch, rng):
        anchors_p, positives_p = _draw_pairs(batch_fonts, rng)
        if optimizer is None:
            with torch.no_grad():
                a = encoder.encode_sets_train(anchors_p)
                p = encoder.encode_sets_train(positives_p)
                loss = info_nce_batch(a, p, config.temperature)
        else:
            a = encoder.encode_sets_train(anchors_p)
            p = encoder.encode_sets_train(positives_p)
            loss = info_nce_batch(a, p, config.temperature)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        losses.append(float(loss.detach()))
    return float(np.mean(losses)) if losses else float("nan")


def pretrain(
    train_parts: dict[str, list[Part]],
    val_parts: dict[str, list[Part]],
    config: EncoderConfig,
    log_path: str | Path | None = None,
) -> tuple[StyleEncoder, list[TrainLogRow]]:
    """Contrastively pretrain the part encoder on same-font part pairs.

    Each step pulls two independent part-set draws of the same font together
    and pushes apart sets from the other fonts in the batch. Early stopping
    watches the validation loss; the best-validation weights are returned.
    """
    for fid, parts in {**train_parts, **val_parts}.items():
        if not parts:
            raise InsufficientParts(f"font {fid} has no parts in its manifest")

    encoder = StyleEncoder.create(config)
    optimizer = torch.optim.Adam(encoder.net.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)

    train_list = [[p.patch for p in train_parts[f]] for f in sorted(train_parts)]
    val_list = [[p.patch for p in val_parts[f]] for f in sorted(val_parts)]

    rows: list[TrainLogRow] = []
    best_val, best_state, best_epoch, since_best = np.inf, None, 0, 0
    for epoch in range(1, config.max_epochs + 1):
        encoder.net.train()
        train_loss = _epoch_loss(encoder, train_list, config, rng, optimizer)
        encoder.net.eval()
        # fixed sampling seed so validation losses are comparable across epochs
        val_rng = np.random.default_rng(config.seed + 7919)
        val_loss = _epoch_loss(encoder, val_list, config, val_rng, None)
        rows.append(TrainLogRow(epoch, train_loss, val_loss))
        if val_loss < best_val - 1e-6:
            best_val, best_epoch, since_best = val_loss, epoch, 0
            best_state = copy.deepcopy(encoder.net.state_dict())
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                break
    if best_state is not None:
        encoder.net.load_state_dict(best_state)

    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for r in rows:
                writer.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.val_loss:.6f}"])
    return encoder, rows


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = 1


def save_encoder_checkpoint(encoder: StyleEncoder, out_dir: str | Path, step: int) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"ckpt-{step:06d}.pt"
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "kind": "encoder",
            "config": asdict(encoder.config),
            "state_dict": encoder.net.state_dict(),
            "step": step,
        },
        path,
    )
    (out_dir / "latest.json").write_text(json.dumps({"checkpoint": path.name, "step": step}))
    return path


def load_encoder_checkpoint(path: str | Path) -> StyleEncoder:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "encoder":
        raise ValueError(f"{path} is not an encoder checkpoint")
    config = EncoderConfig(**payload["config"])
    net = PartEncoderNet(config.embed_dim)
    net.load_state_dict(payload["state_dict"])
    net.eval()
    return StyleEncoder(net, config)


def latest_checkpoint(out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    pointer = out_dir / "latest.json"
    if pointer.exists():
        return out_dir / json.loads(pointer.read_text())["checkpoint"]
    candidates = sorted(out_dir.glob("ckpt-*.pt"))
    if not candidates:
        raise FileNotFoundError(f"no checkpoints under {out_dir}")
    return candidates[-1]
