"""Class- and style-conditioned denoising diffusion.

The U-Net predicts the noise added to a glyph image; conditioning enters as
a two-token cross-attention context (class embedding, style vector) plus a
sinusoidal timestep embedding added inside residual blocks. Sampling is
deterministic strided DDIM (eta = 0). Timesteps are 1-based at the API; the
schedule tables are indexed t-1 internally.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import ALPHABET, NUM_CLASSES, GlyphImage, class_index
from .encoder import EncoderConfig, PartEncoderNet, StyleEncoder, StyleVector
from .errors import BadSteps, BadTimestep, ShapeMismatch


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------


@dataclass
class NoiseSchedule:
    betas: np.ndarray  # (T,) float64, strictly increasing in (0,1)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64).reshape(-1)
        if self.betas.size < 1:
            raise ValueError("schedule needs at least one step")
        if not (np.all(self.betas > 0) and np.all(self.betas < 1)):
            raise ValueError("betas must lie in (0,1)")
        if self.betas.size > 1 and not np.all(np.diff(self.betas) > 0):
            raise ValueError("betas must be strictly increasing")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        if self.alpha_bars[-1] >= 0.01:
            raise ValueError(
                f"terminal alpha_bar {self.alpha_bars[-1]:.4f} >= 0.01; "
                "the forward process must end near pure noise"
            )

    @property
    def T(self) -> int:
        return self.betas.size

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        return cls(np.linspace(beta_start, beta_end, T, dtype=np.float64))

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at 1-based timestep t."""
        if not 1 <= t <= self.T:
            raise BadTimestep(f"t={t} outside [1, {self.T}]")
        return float(self.alpha_bars[t - 1])


def forward_noise(x0, t, eps, schedule: NoiseSchedule):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, t 1-based.

    Accepts numpy or torch inputs; t may be a scalar or a per-sample vector
    (then x0/eps carry a leading batch dimension).
    """
    numpy_in = isinstance(x0, np.ndarray)
    x0_t = torch.as_tensor(np.asarray(x0, dtype=np.float32)) if numpy_in else x0
    eps_t = torch.as_tensor(np.asarray(eps, dtype=np.float32)) if isinstance(eps, np.ndarray) else eps

    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise BadTimestep(f"t={t} outside [1, {schedule.T}]")
    ab = torch.as_tensor(schedule.alpha_bars[t_arr - 1], dtype=x0_t.dtype, device=x0_t.device)
    if ab.numel() == 1:
        ab = ab.reshape(())
    else:
        ab = ab.reshape(-1, *([1] * (x0_t.ndim - 1)))
    out = torch.sqrt(ab) * x0_t + torch.sqrt(1.0 - ab) * eps_t
    return out.numpy() if numpy_in else out


# ---------------------------------------------------------------------------
# Network blocks
# ---------------------------------------------------------------------------


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Feature map attends over the conditioning token sequence."""

    def __init__(self, channels: int, ctx_dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(ctx_dim, channels)
        self.to_v = nn.Linear(ctx_dim, channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).reshape(b, c, h * w).transpose(1, 2))
        k, v = self.to_k(ctx), self.to_v(ctx)
        dh = c // self.heads
        q = q.reshape(b, -1, self.heads, dh).transpose(1, 2)
        k = k.reshape(b, -1, self.heads, dh).transpose(1, 2)
        v = v.reshape(b, -1, self.heads, dh).transpose(1, 2)
        att = F.scaled_dot_product_attention(q, k, v)
        att = att.transpose(1, 2).reshape(b, h * w, c)
        return x + self.proj(att).transpose(1, 2).reshape(b, c, h, w)


@dataclass
class UNetConfig:
    image_size: int = 128
    base: int = 64
    mults: tuple = (1, 2, 4, 4)
    attn_levels: int = 2  # cross-attention at this many lowest resolutions
    heads: int = 4
    ctx_dim: int = 256
    time_dim: int = 256
    # raw sinusoidal width before the MLP; independent of base so slim nets
    # still resolve the noise level finely
    time_freq_dim: int = 128


class ConditionalUNet(nn.Module):
    """Noise predictor with per-resolution residual blocks and cross-attention."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        self.class_embed = nn.Embedding(NUM_CLASSES, cfg.ctx_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_freq_dim, cfg.time_dim),
            nn.SiLU(),
            nn.Linear(cfg.time_dim, cfg.time_dim),
        )
        chans = [cfg.base * m for m in cfg.mults]
        n_levels = len(chans)
        attn_at = set(range(n_levels - cfg.attn_levels, n_levels))

        self.conv_in = nn.Conv2d(1, chans[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = chans[0]
        for i, c in enumerate(chans):
            self.down_blocks.append(ResBlock(prev, c, cfg.time_dim))
            self.down_attn.append(
                CrossAttention(c, cfg.ctx_dim, cfg.heads) if i in attn_at else nn.Identity()
            )
            self.downsamples.append(
                nn.Conv2d(c, c, 3, stride=2, padding=1) if i < n_levels - 1 else nn.Identity()
            )
            prev = c

        self.mid1 = ResBlock(prev, prev, cfg.time_dim)
        self.mid_attn = CrossAttention(prev, cfg.ctx_dim, cfg.heads)
        self.mid2 = ResBlock(prev, prev, cfg.time_dim)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(n_levels)):
            c = chans[i]
            self.up_blocks.append(ResBlock(prev + c, c, cfg.time_dim))
            self.up_attn.append(
                CrossAttention(c, cfg.ctx_dim, cfg.heads) if i in attn_at else nn.Identity()
            )
            self.upsamples.append(
                nn.Conv2d(c, c, 3, padding=1) if i > 0 else nn.Identity()
            )
            prev = c

        self.norm_out = nn.GroupNorm(8, chans[0])
        self.conv_out = nn.Conv2d(chans[0], 1, 3, padding=1)
        # near-zero output init: the model starts close to predicting zero
        # noise, which stabilizes early training while keeping gradients
        # flowing to every conditioning pathway from the first step
        with torch.no_grad():
            self.conv_out.weight.mul_(1e-4)
            nn.init.zeros_(self.conv_out.bias)

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        class_idx: torch.Tensor,
        style: torch.Tensor,
    ) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeMismatch(f"expected (B,1,H,W) input, got {tuple(x.shape)}")
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_freq_dim))
        ctx = torch.stack([self.class_embed(class_idx), style], dim=1)

        h = self.conv_in(x)
        skips = []
        for block, attn, down in zip(self.down_blocks, self.down_attn, self.downsamples):
            h = block(h, temb)
            h = attn(h, ctx) if isinstance(attn, CrossAttention) else h
            skips.append(h)
            h = down(h)

        h = self.mid1(h, temb)
        h = self.mid_attn(h, ctx)
        h = self.mid2(h, temb)

        for block, attn, up in zip(self.up_blocks, self.up_attn, self.upsamples):
            skip = skips.pop()
            if h.shape[-1] != skip.shape[-1]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), temb)
            h = attn(h, ctx) if isinstance(attn, CrossAttention) else h
            h = up(h)

        return self.conv_out(F.silu(self.norm_out(h)))


# ---------------------------------------------------------------------------
# Condition bundle and prediction
# ---------------------------------------------------------------------------


@dataclass
class ConditionBundle:
    char_class: str
    style: StyleVector
    timestep: int

    def __post_init__(self):
        class_index(self.char_class)


def predict_noise(
    model: ConditionalUNet, x_t: torch.Tensor, cond: ConditionBundle, schedule: NoiseSchedule
) -> torch.Tensor:
    """Single-condition U-Net forward pass in eval mode."""
    if not 1 <= cond.timestep <= schedule.T:
        raise BadTimestep(f"t={cond.timestep} outside [1, {schedule.T}]")
    model.eval()
    squeeze = x_t.ndim == 3
    if squeeze:
        x_t = x_t[None]
    with torch.no_grad():
        out = model(
            x_t,
            torch.full((x_t.shape[0],), float(cond.timestep)),
            torch.full((x_t.shape[0],), class_index(cond.char_class), dtype=torch.long),
            cond.style.torch()[None].expand(x_t.shape[0], -1),
        )
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# DDIM sampling
# ---------------------------------------------------------------------------


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Descending 1-based timestep subsequence of length `steps`."""
    if not 1 <= steps <= T:
        raise BadSteps(f"steps={steps} outside [1, {T}]")
    idx = np.floor(np.linspace(0, T - 1, steps)).astype(np.int64)
    return idx[::-1] + 1


def ddim_step(x, eps, alpha_bar_t: float, alpha_bar_prev: float, clip_x0: bool = False):
    """One deterministic (eta=0) reverse update from t to the previous stride.

    clip_x0 constrains the implied clean image to the pixel domain [-1, 1],
    which keeps early steps (tiny alpha_bar) from amplifying prediction
    error; it is exact whenever the true clean image lies in range.
    """
    x0_hat = (x - math.sqrt(1.0 - alpha_bar_t) * eps) / math.sqrt(alpha_bar_t)
    if clip_x0:
        x0_hat = x0_hat.clamp(-1.0, 1.0) if torch.is_tensor(x0_hat) else np.clip(x0_hat, -1.0, 1.0)
    return math.sqrt(alpha_bar_prev) * x0_hat + math.sqrt(1.0 - alpha_bar_prev) * eps


def _ddim_loop(eps_fn, schedule: NoiseSchedule, x: torch.Tensor, taus: np.ndarray) -> torch.Tensor:
    for i, t in enumerate(taus):
        eps = eps_fn(x, int(t))
        ab_t = schedule.alpha_bar(int(t))
        ab_prev = schedule.alpha_bar(int(taus[i + 1])) if i + 1 < len(taus) else 1.0
        x = ddim_step(x, eps, ab_t, ab_prev, clip_x0=True)
    return x.clamp(-1.0, 1.0)


def ddim_sample(
    eps_fn,
    schedule: NoiseSchedule,
    shape: tuple,
    steps: int,
    seed: int = 0,
) -> torch.Tensor:
    """Run the strided deterministic sampler; one eps_fn call per step.

    eps_fn(x, t) receives the current state and a 1-based scalar timestep.
    Returns the final state, clamped to [-1, 1].
    """
    taus = ddim_timesteps(schedule.T, steps)
    gen = torch.Generator().manual_seed(seed)
    return _ddim_loop(eps_fn, schedule, torch.randn(shape, generator=gen), taus)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class DiffusionConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    image_size: int = 128
    base: int = 64
    mults: tuple = (1, 2, 4, 4)
    attn_levels: int = 2
    heads: int = 4
    lr: float = 1e-4
    batch: int = 64
    train_steps: int = 200_000
    sample_steps: int = 200
    set_min: int = 1
    set_max: int = 8
    seed: int = 0

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            image_size=self.image_size,
            base=self.base,
            mults=tuple(self.mults),
            attn_levels=self.attn_levels,
            heads=self.heads,
        )

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.timesteps, self.beta_start, self.beta_end)


class TrainCorpus:
    """Flat view of (glyph, class, font) triples plus per-font part patches."""

    def __init__(self, fonts: list, parts_by_font: dict[str, list[np.ndarray]]):
        glyphs, classes, font_ids = [], [], []
        for record in fonts:
            if not parts_by_font.get(record.font_id):
                from .errors import InsufficientParts

                raise InsufficientParts(f"font {record.font_id} has no extracted parts")
            for ch in ALPHABET:
                glyphs.append(record.glyphs[ch].pixels)
                classes.append(class_index(ch))
                font_ids.append(record.font_id)
        self.glyphs = np.stack(glyphs).astype(np.float32)
        self.classes = np.array(classes, dtype=np.int64)
        self.font_ids = font_ids
        self.parts_by_font = parts_by_font

    def __len__(self) -> int:
        return len(self.font_ids)


class DiffusionTrainer:
    """Joint trainer for the U-Net and the style encoder."""

    def __init__(
        self,
        model: ConditionalUNet,
        encoder: StyleEncoder,
        schedule: NoiseSchedule,
        config: DiffusionConfig,
    ):
        self.model = model
        self.encoder = encoder
        self.schedule = schedule
        self.config = config
        self.optimizer = torch.optim.Adam(
            list(model.parameters()) + list(encoder.net.parameters()), lr=config.lr
        )
        self.rng = np.random.default_rng(config.seed)
        self.noise_gen = torch.Generator().manual_seed(config.seed)
        self.step = 0
        self._ab = torch.from_numpy(schedule.alpha_bars.astype(np.float32))

    def _draw_batch(self, corpus: TrainCorpus) -> dict:
        idx = self.rng.integers(len(corpus), size=self.config.batch)
        x0 = torch.from_numpy(corpus.glyphs[idx]).unsqueeze(1) * 2.0 - 1.0
        classes = torch.from_numpy(corpus.classes[idx])
        sets = []
        for i in idx:
            pool = corpus.parts_by_font[corpus.font_ids[int(i)]]
            hi = min(self.config.set_max, len(pool))
            lo = min(self.config.set_min, hi)
            n = int(self.rng.integers(lo, hi + 1))
            chosen = self.rng.choice(len(pool), size=n, replace=False)
            sets.append([pool[int(j)] for j in chosen])
        return {"x0": x0, "classes": classes, "sets": sets}

    def train_step(self, batch: dict) -> float:
        """One joint Adam update; returns the scalar noise-prediction loss."""
        x0, classes, sets = batch["x0"], batch["classes"], batch["sets"]
        b = x0.shape[0]
        t = torch.from_numpy(
            self.rng.integers(1, self.schedule.T + 1, size=b).astype(np.int64)
        )
        eps = torch.randn(x0.shape, generator=self.noise_gen)
        ab = self._ab[t - 1].reshape(b, 1, 1, 1)
        x_t = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps

        self.model.train()
        self.encoder.net.train()
        style = self.encoder.encode_sets_train(sets)
        eps_hat = self.model(x_t, t.float(), classes, style)
        loss = F.mse_loss(eps_hat, eps)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.step += 1
        return float(loss.detach())

    def fit(
        self,
        corpus: TrainCorpus,
        steps: int,
        log_path: str | Path | None = None,
        log_every: int = 50,
    ) -> list[tuple[int, float]]:
        rows = []
        running = []
        for _ in range(steps):
            loss = self.train_step(self._draw_batch(corpus))
            running.append(loss)
            if self.step % log_every == 0 or self.step == steps:
                rows.append((self.step, float(np.mean(running))))
                running = []
        if log_path is not None:
            log_path = Path(log_path)
            log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(log_path, "a", newline="") as fh:
                writer = csv.writer(fh)
                for step, loss in rows:
                    writer.writerow([step, f"{loss:.6f}"])
        return rows


# ---------------------------------------------------------------------------
# Checkpoint bundle: everything needed to sample
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = 1


@dataclass
class DiffusionBundle:
    model: ConditionalUNet
    encoder: StyleEncoder
    schedule: NoiseSchedule
    config: DiffusionConfig
    step: int = 0
    checkpoint_id: str = ""

    def _eps_fn(self, class_idx: torch.Tensor, style: torch.Tensor):
        def eps_fn(x, t):
            with torch.no_grad():
                return self.model(
                    x, torch.full((x.shape[0],), float(t)), class_idx, style
                )

        return eps_fn

    def sample(
        self,
        char_class: str,
        style: StyleVector,
        steps: int | None = None,
        seed: int = 0,
    ) -> GlyphImage:
        """Generate one glyph; deterministic for a fixed seed."""
        steps = self.config.sample_steps if steps is None else steps
        self.model.eval()
        size = self.config.image_size
        cls = torch.tensor([class_index(char_class)], dtype=torch.long)
        sty = style.torch()[None]
        x = ddim_sample(self._eps_fn(cls, sty), self.schedule, (1, 1, size, size), steps, seed)
        pixels = ((x[0, 0] + 1.0) / 2.0).clamp(0.0, 1.0).numpy()
        return GlyphImage(pixels, char_class, font_id=f"generated-{seed}", family_id="generated")

    def generate_alphabet(
        self,
        style: StyleVector,
        steps: int | None = None,
        seed: int = 0,
        chars: str = ALPHABET,
    ) -> dict[str, GlyphImage]:
        """Sample every requested class with per-class derived seeds (seed xor class)."""
        steps = self.config.sample_steps if steps is None else steps
        self.model.eval()
        size = self.config.image_size
        cls = torch.tensor([class_index(c) for c in chars], dtype=torch.long)
        sty = style.torch()[None].expand(len(chars), -1)
        taus = ddim_timesteps(self.schedule.T, steps)
        noise = [
            torch.randn(
                (1, size, size),
                generator=torch.Generator().manual_seed(seed ^ class_index(c)),
            )
            for c in chars
        ]
        x = _ddim_loop(self._eps_fn(cls, sty), self.schedule, torch.stack(noise), taus)
        out = {}
        for row, c in enumerate(chars):
            pixels = ((x[row, 0] + 1.0) / 2.0).clamp(0.0, 1.0).numpy()
            out[c] = GlyphImage(pixels, c, font_id=f"generated-{seed}", family_id="generated")
        return out


def save_diffusion_checkpoint(
    bundle: DiffusionBundle, out_dir: str | Path, step: int | None = None
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    step = bundle.step if step is None else step
    path = out_dir / f"ckpt-{step:06d}.pt"
    cfg = asdict(bundle.config)
    cfg["mults"] = list(bundle.config.mults)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "kind": "diffusion",
            "config": cfg,
            "betas": bundle.schedule.betas,
            "unet_state": bundle.model.state_dict(),
            "encoder_state": bundle.encoder.net.state_dict(),
            "encoder_config": asdict(bundle.encoder.config),
            "step": step,
        },
        path,
    )
    (out_dir / "latest.json").write_text(json.dumps({"checkpoint": path.name, "step": step}))
    return path


def load_diffusion_checkpoint(path: str | Path) -> DiffusionBundle:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "diffusion":
        raise ValueError(f"{path} is not a diffusion checkpoint")
    cfg_dict = dict(payload["config"])
    cfg_dict["mults"] = tuple(cfg_dict["mults"])
    config = DiffusionConfig(**cfg_dict)
    model = ConditionalUNet(config.unet_config())
    model.load_state_dict(payload["unet_state"])
    model.eval()
    enc_config = EncoderConfig(**payload["encoder_config"])
    enc_net = PartEncoderNet(enc_config.embed_dim)
    enc_net.load_state_dict(payload["encoder_state"])
    enc_net.eval()
    schedule = NoiseSchedule(payload["betas"])
    return DiffusionBundle(
        model=model,
        encoder=StyleEncoder(enc_net, enc_config),
        schedule=schedule,
        config=config,
        step=payload["step"],
        checkpoint_id=Path(path).stem,
    )


def latest_diffusion_checkpoint(out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    pointer = out_dir / "latest.json"
    if pointer.exists():
        return out_dir / json.loads(pointer.read_text())["checkpoint"]
    candidates = sorted(out_dir.glob("ckpt-*.pt"))
    if not candidates:
        raise FileNotFoundError(f"no checkpoints under {out_dir}")
    return candidates[-1]
