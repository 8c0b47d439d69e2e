"""Control branch grafted onto a locked denoiser through zero convolutions.

The branch is a trainable copy of the base encoder (embedding MLPs, input
conv, down path, middle block). The edge map is encoded, passed through an
input zero conv and added after the copied input conv; each branch skip
feature and the middle output pass through their own output zero conv and
are added at the base decoder's junctions. With all zero convs at zero the
grafted output equals the base output exactly.
"""

from __future__ import annotations

import math

import numpy as np

from .diffusion import Denoiser, TextEmbedder, diffusion_loss
from .tensor import autograd as ag
from .tensor.autograd import NonFiniteError, Tensor, backward
from .tensor.nn import Conv2d, Module
from .tensor.rng import Rng


class ZeroConv(Conv2d):
    """1x1 convolution whose weight and bias start at exactly zero."""

    def __init__(self, channels: int):
        super().__init__(channels, channels, k=1, padding=0, zero=True)


class ControlEncoder(Module):
    """Three 3x3 convs mapping a 1-channel edge map to branch features."""

    def __init__(self, out_channels: int, rng: Rng, hidden: int = 16):
        self.conv1 = Conv2d(1, hidden, 3, rng=rng)
        self.conv2 = Conv2d(hidden, hidden, 3, rng=rng)
        self.conv3 = Conv2d(hidden, out_channels, 3, rng=rng)

    def forward(self, edges: Tensor) -> Tensor:
        h = ag.silu(self.conv1(edges))
        h = ag.silu(self.conv2(h))
        return self.conv3(h)


class ControlBranch(Module):
    def __init__(self, base: Denoiser, rng: Rng):
        cfg = base.cfg
        self.copy = base.encoder.clone()
        self.hint = ControlEncoder(cfg.channels[0], rng.child("hint"))
        self.zero_in = ZeroConv(cfg.channels[0])
        self.zero_out = [ZeroConv(ch) for ch in cfg.channels] + [ZeroConv(cfg.channels[-1])]

    def zero_convs(self) -> list[ZeroConv]:
        return [self.zero_in, *self.zero_out]

    def forward(self, z_t: Tensor, t, c_t: Tensor, edges: Tensor) -> list[Tensor]:
        emb = self.copy.embed(t, c_t)
        skips, mid = self.copy(z_t, emb, hint=self.zero_in(self.hint(edges)))
        return [z(h) for z, h in zip(self.zero_out, [*skips, mid])]


class GraftedDenoiser(Module):
    def __init__(self, base: Denoiser, branch: ControlBranch):
        self.base = base
        self.branch = branch

    @property
    def cfg(self):
        return self.base.cfg

    def trainable_parameters(self):
        return [p for p in self.branch.parameters() if not p.locked]

    def forward(self, z_t, t, c_t: Tensor, control=None) -> Tensor:
        if control is None:
            return self.base(z_t, t, c_t)
        edges = np.asarray(control.data if isinstance(control, Tensor) else control, np.float32)
        if edges.ndim == 3:
            edges = edges[..., None]
        z_t = ag.as_tensor(z_t)
        if edges.shape[:3] != z_t.shape[:3]:
            raise ValueError(
                f"control maps {edges.shape[:3]} do not match latent batch/size {z_t.shape[:3]}"
            )
        residuals = self.branch(z_t, t, c_t, Tensor(edges))
        return self.base(z_t, t, c_t, residuals=residuals)


def graft(base: Denoiser, rng: Rng | None = None) -> GraftedDenoiser:
    """Lock ``base`` and attach a trainable branch copied from its encoder.

    ``base`` itself is modified (locked) and shared, not copied.
    """
    base.set_locked(True)
    branch = ControlBranch(base, rng or Rng(0))
    branch.set_locked(False)
    g = GraftedDenoiser(base, branch)
    g.assign_names()
    return g


def finetune_step(
    g: GraftedDenoiser,
    batch,
    embedder: TextEmbedder,
    schedule,
    rng: Rng,
) -> float:
    """Diffusion loss through the grafted model; gradients reach only the branch.

    Missing edge maps are replaced by all-zero maps so batch shapes stay uniform.
    """
    images = np.stack([s.image for s in batch])
    edges = np.stack(
        [s.edge if s.edge is not None else np.zeros(s.image.shape[:2], np.float32) for s in batch]
    )
    loss = diffusion_loss(g, embedder, schedule, images, [s.prompt for s in batch], rng, edges)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"fine-tune loss diverged: {value}")
    backward(loss)
    leaked = [p.name for p in g.base.parameters() if p.grad is not None]
    leaked += [p.name for p in embedder.parameters() if p.locked and p.grad is not None]
    if leaked:
        raise RuntimeError(f"locked parameters received gradients: {leaked[:5]}")
    return value
