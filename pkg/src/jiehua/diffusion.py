"""Pixel-space conditional diffusion: schedule, text embedder, U-Net, training
loss and ancestral sampling with classifier-free guidance.

Images enter the model as NHWC arrays scaled to [-1, 1].
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .tensor import autograd as ag
from .tensor.autograd import NonFiniteError, Parameter, Tensor, backward, no_grad
from .tensor.nn import Conv2d, GroupNorm, Linear, Module
from .tensor.rng import Rng


# ----------------------------------------------------------------- noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)


def make_schedule(T: int = 50, beta_start: float | None = None, beta_end: float | None = None) -> NoiseSchedule:
    """Linear betas. Defaults are 1e-4 -> 0.02 at T=1000, scaled by 1000/T."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    scale = 1000.0 / T
    beta_start = 1e-4 * scale if beta_start is None else beta_start
    beta_end = min(0.02 * scale, 0.999) if beta_end is None else beta_end
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def forward_diffuse(z0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps``; ``t`` is an int or one int per batch item."""
    z0, eps = np.asarray(z0, np.float32), np.asarray(eps, np.float32)
    if z0.shape != eps.shape:
        raise ValueError(f"z0 {z0.shape} and eps {eps.shape} differ in shape")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.T):
        raise ValueError(f"timestep out of range [0, {schedule.T})")
    ab = schedule.alpha_bars[t]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (z0.ndim - 1))
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)


# ----------------------------------------------------------------- text conditioning

_PUNCT = re.compile(r"^[^\w]+|[^\w]+$")


def tokenize(prompt: str) -> list[str]:
    toks = (_PUNCT.sub("", w) for w in prompt.lower().split())
    return [t for t in toks if t]


class TextEmbedder(Module):
    """Mean-pooled token embeddings; the last table row is the null prompt."""

    def __init__(self, vocabulary, dim: int = 32, rng: Rng | None = None):
        self.vocab = {tok: i for i, tok in enumerate(sorted(set(vocabulary)))}
        rng = rng or Rng(0)
        self.table = Parameter(rng.normal((len(self.vocab) + 1, dim)))

    @classmethod
    def from_prompts(cls, prompts, dim: int = 32, rng: Rng | None = None) -> "TextEmbedder":
        return cls({t for p in prompts for t in tokenize(p)}, dim, rng)

    @property
    def null_index(self) -> int:
        return len(self.vocab)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def pooling_matrix(self, prompts) -> np.ndarray:
        """Rows average the known tokens; prompts with none map to the null row."""
        mat = np.zeros((len(prompts), len(self.vocab) + 1), np.float32)
        for i, p in enumerate(prompts):
            ids = [self.vocab[t] for t in tokenize(p) if t in self.vocab]
            if ids:
                for j in ids:
                    mat[i, j] += 1.0 / len(ids)
            else:
                mat[i, self.null_index] = 1.0
        return mat

    def encode(self, prompts) -> Tensor:
        if isinstance(prompts, str):
            prompts = [prompts]
        return ag.matmul(Tensor(self.pooling_matrix(prompts)), self.table)

    forward = encode


# ----------------------------------------------------------------- U-Net


@dataclass
class DenoiserConfig:
    resolution: int = 64
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 2)
    time_dim: int = 64
    text_dim: int = 32
    groups: int = 8

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        if self.resolution % (2 ** (self.levels - 1)):
            raise ValueError(
                f"resolution {self.resolution} not divisible by 2^{self.levels - 1}"
            )

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mults]


def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.asarray(t, np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(np.float32)


class ResBlock(Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int, rng: Rng):
        self.norm1 = GroupNorm(groups, cin)
        self.conv1 = Conv2d(cin, cout, 3, rng=rng)
        self.emb_proj = Linear(emb_dim, cout, rng)
        self.norm2 = GroupNorm(groups, cout)
        self.conv2 = Conv2d(cout, cout, 3, rng=rng)
        self.skip = Conv2d(cin, cout, 1, rng=rng) if cin != cout else None

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(ag.silu(self.norm1(x)))
        e = self.emb_proj(emb)
        h = ag.add(h, ag.reshape(e, (e.shape[0], 1, 1, e.shape[1])))
        h = self.conv2(ag.silu(self.norm2(h)))
        return ag.add(h, self.skip(x) if self.skip is not None else x)


class Encoder(Module):
    """Embedding MLPs, input conv, down path and middle block.

    This is the part of the U-Net that a control branch duplicates.
    """

    def __init__(self, cfg: DenoiserConfig, rng: Rng):
        self.cfg = cfg
        td = cfg.time_dim
        self.time_fc1 = Linear(td, td, rng)
        self.time_fc2 = Linear(td, td, rng)
        self.text_proj = Linear(cfg.text_dim, td, rng)
        chans = cfg.channels
        self.conv_in = Conv2d(cfg.in_channels, chans[0], 3, rng=rng)
        self.down = []
        prev = chans[0]
        for ch in chans:
            self.down.append(ResBlock(prev, ch, td, cfg.groups, rng))
            prev = ch
        self.mid = ResBlock(prev, prev, td, cfg.groups, rng)

    def embed(self, t, c_t: Tensor) -> Tensor:
        temb = Tensor(timestep_embedding(t, self.cfg.time_dim))
        h = self.time_fc2(ag.silu(self.time_fc1(temb)))
        return ag.silu(ag.add(h, self.text_proj(c_t)))

    def forward(self, x: Tensor, emb: Tensor, hint: Tensor | None = None):
        h = self.conv_in(x)
        if hint is not None:
            h = ag.add(h, hint)
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.down) - 1:
                h = ag.avgpool2(h)
        return skips, self.mid(h, emb)


class Denoiser(Module):
    """U-Net noise predictor eps(z_t, t, c_t).

    ``residuals`` (one tensor per down level plus one for the middle block)
    are added at the skip junctions; this is where a control branch plugs in.
    """

    def __init__(self, cfg: DenoiserConfig | None = None, rng: Rng | None = None):
        cfg = cfg or DenoiserConfig()
        rng = rng or Rng(0)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng.child("encoder"))
        chans = cfg.channels
        urng = rng.child("decoder")
        self.up = []
        prev = chans[-1]
        for ch in reversed(chans):
            self.up.append(ResBlock(prev + ch, ch, cfg.time_dim, cfg.groups, urng))
            prev = ch
        self.out_norm = GroupNorm(cfg.groups, chans[0])
        self.out_conv = Conv2d(chans[0], cfg.in_channels, 3, zero=True)

    def decode(self, skips, mid: Tensor, emb: Tensor, residuals=None) -> Tensor:
        if residuals is not None:
            *res_skips, res_mid = residuals
            mid = ag.add(mid, res_mid)
            skips = [ag.add(s, r) for s, r in zip(skips, res_skips)]
        h = mid
        levels = len(skips)
        for j, block in enumerate(self.up):
            i = levels - 1 - j
            h = block(ag.concat([h, skips[i]], axis=-1), emb)
            if i > 0:
                h = ag.nearest_upsample2(h)
        return self.out_conv(ag.silu(self.out_norm(h)))

    def forward(self, z_t, t, c_t: Tensor, control=None, residuals=None) -> Tensor:
        """``control`` is accepted for call compatibility and ignored here."""
        x = ag.as_tensor(z_t)
        emb = self.encoder.embed(t, c_t)
        skips, mid = self.encoder(x, emb)
        return self.decode(skips, mid, emb, residuals)


# ----------------------------------------------------------------- training


def to_model_space(images: np.ndarray) -> np.ndarray:
    return (np.asarray(images, np.float32) * 2.0 - 1.0).astype(np.float32)


def to_image_space(z: np.ndarray) -> np.ndarray:
    return ((np.clip(z, -1.0, 1.0) + 1.0) * 0.5).astype(np.float32)


def diffusion_loss(model, embedder: TextEmbedder, schedule: NoiseSchedule, images, prompts, rng: Rng, edges=None) -> Tensor:
    """L2 between drawn noise and the model's prediction at a random timestep."""
    z0 = to_model_space(images)
    n = z0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    t = rng.integers(0, schedule.T, n)
    eps = rng.normal(z0.shape)
    z_t = forward_diffuse(z0, t, eps, schedule)
    pred = model(Tensor(z_t), t, embedder.encode(list(prompts)), control=edges)
    return ag.mse(pred, Tensor(eps))


def diffusion_train_step(batch, model, embedder, schedule, rng: Rng, use_control: bool = False) -> float:
    """Loss on a batch of TripletSamples (prompts already dropped out); runs backward."""
    images = np.stack([s.image for s in batch])
    edges = np.stack([s.edge for s in batch]) if use_control else None
    loss = diffusion_loss(model, embedder, schedule, images, [s.prompt for s in batch], rng, edges)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"diffusion loss diverged: {value}")
    backward(loss)
    return value


# ----------------------------------------------------------------- sampling


def guide(eps_cond: np.ndarray, eps_uncond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance, written so scale 0 and 1 are exact."""
    return (scale * eps_cond + (1.0 - scale) * eps_uncond).astype(np.float32)


def sample(
    model,
    embedder: TextEmbedder,
    schedule: NoiseSchedule,
    prompt,
    control=None,
    guidance_scale: float = 3.0,
    rng: Rng | None = None,
    n: int | None = None,
    resolution: int | None = None,
    channels: int = 3,
) -> np.ndarray:
    """Ancestral sampling from pure noise; returns ``(n, H, W, C)`` images in [0, 1].

    ``prompt`` is one string or one per image; ``control`` is ``None``, one
    HxW edge map, or one per image.
    """
    if guidance_scale < 0:
        raise ValueError("guidance_scale must be >= 0")
    rng = rng or Rng(0)
    prompts = [prompt] if isinstance(prompt, str) else list(prompt)
    if control is not None:
        control = np.asarray(control, np.float32)
        if control.ndim == 2:
            control = control[None]
    n = n or max(len(prompts), 1 if control is None else control.shape[0])
    if len(prompts) == 1:
        prompts = prompts * n
    if control is not None and control.shape[0] == 1 and n > 1:
        control = np.repeat(control, n, axis=0)
    res = resolution or getattr(getattr(model, "cfg", None), "resolution", None) or control.shape[1]
    z = rng.normal((n, res, res, channels))
    with no_grad():
        c_cond = embedder.encode(prompts).data
        c_null = embedder.encode([""] * n).data
        for t in range(schedule.T - 1, -1, -1):
            tt = np.full(n, t)
            if guidance_scale == 1.0:
                eps = model(Tensor(z), tt, Tensor(c_cond), control=control).data
            elif guidance_scale == 0.0:
                eps = model(Tensor(z), tt, Tensor(c_null), control=control).data
            else:
                both = model(
                    Tensor(np.concatenate([z, z])),
                    np.concatenate([tt, tt]),
                    Tensor(np.concatenate([c_cond, c_null])),
                    control=None if control is None else np.concatenate([control, control]),
                ).data
                eps = guide(both[:n], both[n:], guidance_scale)
            z = ancestral_step(z, eps, t, schedule, rng)
    return to_image_space(z)


def ancestral_step(z: np.ndarray, eps: np.ndarray, t: int, schedule: NoiseSchedule, rng: Rng) -> np.ndarray:
    """One reverse step through the posterior q(z_{t-1} | z_t, x0).

    The x0 estimate implied by ``eps`` is clipped to the data range [-1, 1]
    first; without it a small model's errors compound over the few large steps
    of a T=50 schedule and samples saturate.
    """
    beta, alpha, ab = schedule.betas[t], schedule.alphas[t], schedule.alpha_bars[t]
    x0 = np.clip((z - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab), -1.0, 1.0)
    if t == 0:
        return x0.astype(np.float32)
    ab_prev = schedule.alpha_bars[t - 1]
    mean = (math.sqrt(ab_prev) * beta / (1.0 - ab)) * x0 + (math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)) * z
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    return (mean + math.sqrt(var) * rng.normal(z.shape)).astype(np.float32)
