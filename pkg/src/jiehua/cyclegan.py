"""CycleGAN: two generators, two patch discriminators, alternating updates.

Domain X is the non-target style, domain Y the target (Jiehua) style.
G maps X to Y and is judged by D_Y; F maps Y to X and is judged by D_X.
Images are handled in [-1, 1] inside this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import autograd as ag
from .tensor.autograd import NonFiniteError, Tensor, backward, no_grad
from .tensor.nn import Conv2d, GroupNorm, Module
from .tensor.optim import AdamState, adam_step
from .tensor.rng import Rng

LOG_FLOOR = 1e-7


class ResidualBlock(Module):
    def __init__(self, ch: int, rng: Rng):
        self.conv1 = Conv2d(ch, ch, 3, rng=rng)
        self.norm1 = GroupNorm(ch, ch)
        self.conv2 = Conv2d(ch, ch, 3, rng=rng)
        self.norm2 = GroupNorm(ch, ch)

    def forward(self, x):
        h = ag.relu(self.norm1(self.conv1(x)))
        return ag.add(x, self.norm2(self.conv2(h)))


class Generator(Module):
    """Conv stem, two stride-2 downs, residual blocks, two upsample+conv ups, tanh."""

    def __init__(self, direction: str, ch: int = 16, n_res: int = 4, rng: Rng | None = None):
        rng = rng or Rng(0)
        self.direction = direction
        self.stem = Conv2d(3, ch, 3, rng=rng)
        self.stem_norm = GroupNorm(ch, ch)
        self.down1 = Conv2d(ch, 2 * ch, 3, stride=2, padding=1, rng=rng)
        self.down1_norm = GroupNorm(2 * ch, 2 * ch)
        self.down2 = Conv2d(2 * ch, 4 * ch, 3, stride=2, padding=1, rng=rng)
        self.down2_norm = GroupNorm(4 * ch, 4 * ch)
        self.blocks = [ResidualBlock(4 * ch, rng) for _ in range(n_res)]
        self.up1 = Conv2d(4 * ch, 2 * ch, 3, rng=rng)
        self.up1_norm = GroupNorm(2 * ch, 2 * ch)
        self.up2 = Conv2d(2 * ch, ch, 3, rng=rng)
        self.up2_norm = GroupNorm(ch, ch)
        self.head = Conv2d(ch, 3, 3, rng=rng)

    def forward(self, x) -> Tensor:
        h = ag.relu(self.stem_norm(self.stem(x)))
        h = ag.relu(self.down1_norm(self.down1(h)))
        h = ag.relu(self.down2_norm(self.down2(h)))
        for block in self.blocks:
            h = block(h)
        h = ag.relu(self.up1_norm(self.up1(ag.nearest_upsample2(h))))
        h = ag.relu(self.up2_norm(self.up2(ag.nearest_upsample2(h))))
        return ag.tanh(self.head(h))


class Discriminator(Module):
    """Four-layer patch classifier; output is a grid of per-patch probabilities."""

    def __init__(self, domain: str, ch: int = 16, rng: Rng | None = None):
        rng = rng or Rng(0)
        self.domain = domain
        self.conv1 = Conv2d(3, ch, 4, stride=2, padding=1, rng=rng)
        self.conv2 = Conv2d(ch, 2 * ch, 4, stride=2, padding=1, rng=rng)
        self.norm2 = GroupNorm(2 * ch, 2 * ch)
        self.conv3 = Conv2d(2 * ch, 4 * ch, 4, stride=2, padding=1, rng=rng)
        self.norm3 = GroupNorm(4 * ch, 4 * ch)
        self.conv4 = Conv2d(4 * ch, 1, 3, rng=rng)

    def forward(self, x) -> Tensor:
        h = ag.relu(self.conv1(x))
        h = ag.relu(self.norm2(self.conv2(h)))
        h = ag.relu(self.norm3(self.conv3(h)))
        return ag.sigmoid(self.conv4(h))


def _log(p: Tensor) -> Tensor:
    return ag.log(p, LOG_FLOOR)


def gan_loss(D, real_batch, fake_batch) -> tuple[Tensor, Tensor]:
    """Discriminator loss ``-(E log D(real) + E log(1 - D(fake)))`` and the
    non-saturating generator loss ``-E log D(fake)``.

    ``D`` is any callable returning probabilities. The fake batch is detached
    for the discriminator term, so backward on ``disc_loss`` never reaches the
    generator.
    """
    real_batch, fake_batch = ag.as_tensor(real_batch), ag.as_tensor(fake_batch)
    if real_batch.shape != fake_batch.shape or real_batch.shape[0] == 0:
        raise ValueError(f"batches must be nonempty and equal in shape: {real_batch.shape} vs {fake_batch.shape}")
    d_real = D(real_batch)
    d_fake_detached = D(fake_batch.detach())
    disc = ag.mul(
        ag.add(ag.mean(_log(d_real)), ag.mean(_log(ag.sub(1.0, d_fake_detached)))), -1.0
    )
    gen = ag.mul(ag.mean(_log(D(fake_batch))), -1.0)
    for name, v in (("disc_loss", disc), ("gen_loss", gen)):
        if not math.isfinite(v.item()):
            raise NonFiniteError(f"{name} is not finite")
    return disc, gen


def generator_adversarial_loss(D, fake_batch) -> Tensor:
    return ag.mul(ag.mean(_log(D(fake_batch))), -1.0)


def discriminator_loss(D, real_batch, fake_batch) -> Tensor:
    d_real = D(ag.as_tensor(real_batch))
    d_fake = D(ag.as_tensor(fake_batch).detach())
    return ag.mul(ag.add(ag.mean(_log(d_real)), ag.mean(_log(ag.sub(1.0, d_fake)))), -1.0)


def cycle_loss(G, F, x_batch, y_batch) -> Tensor:
    """``E|F(G(x)) - x| + E|G(F(y)) - y|`` (mean absolute error per term)."""
    x, y = ag.as_tensor(x_batch), ag.as_tensor(y_batch)
    fx = ag.mean(ag.abs(ag.sub(F(G(x)), x)))
    gy = ag.mean(ag.abs(ag.sub(G(F(y)), y)))
    return ag.add(fx, gy)


@dataclass
class CycleGANState:
    G: Generator
    F: Generator
    D_X: Discriminator
    D_Y: Discriminator
    lambda_cycle: float = 10.0
    lr: float = 2e-4
    gen_opt: AdamState = field(default_factory=lambda: AdamState(beta1=0.5))
    disc_opt: AdamState = field(default_factory=lambda: AdamState(beta1=0.5))
    step: int = 0

    @classmethod
    def create(cls, rng: Rng, ch: int = 16, n_res: int = 4, lambda_cycle: float = 10.0, lr: float = 2e-4):
        if lambda_cycle < 0:
            raise ValueError("lambda_cycle must be >= 0")
        state = cls(
            Generator("X->Y", ch, n_res, rng.child("G")),
            Generator("Y->X", ch, n_res, rng.child("F")),
            Discriminator("X", ch, rng.child("D_X")),
            Discriminator("Y", ch, rng.child("D_Y")),
            lambda_cycle,
            lr,
        )
        for name in ("G", "F", "D_X", "D_Y"):
            getattr(state, name).assign_names(name + ".")
        return state

    def generator_params(self):
        return self.G.parameters() + self.F.parameters()

    def discriminator_params(self):
        return self.D_X.parameters() + self.D_Y.parameters()

    def networks(self):
        return {"G": self.G, "F": self.F, "D_X": self.D_X, "D_Y": self.D_Y}


def total_generator_loss(state: CycleGANState, x_batch, y_batch, parts: dict | None = None) -> Tensor:
    """Adversarial terms for both generators plus ``lambda * cycle_loss``."""
    x, y = ag.as_tensor(x_batch), ag.as_tensor(y_batch)
    adv_g = generator_adversarial_loss(state.D_Y, state.G(x))
    adv_f = generator_adversarial_loss(state.D_X, state.F(y))
    cyc = cycle_loss(state.G, state.F, x, y)
    total = ag.add(ag.add(adv_g, adv_f), ag.mul(cyc, float(state.lambda_cycle)))
    if parts is not None:
        parts.update(gen_adv_G=adv_g.item(), gen_adv_F=adv_f.item(), cycle=cyc.item())
    return total


def _frozen(params):
    class _Freeze:
        def __enter__(self):
            self.prev = [p.locked for p in params]
            for p in params:
                p.locked = True

        def __exit__(self, *exc):
            for p, was in zip(params, self.prev):
                p.locked = was

    return _Freeze()


def cyclegan_train_step(state: CycleGANState, x_batch, y_batch, rng: Rng | None = None) -> dict:
    """One alternating update; batches are NHWC in [-1, 1].

    Phase 1 updates D_X and D_Y with both generators frozen. Phase 2 updates
    G and F on the total generator loss with both discriminators frozen.
    ``rng`` is accepted for interface symmetry; the step itself draws nothing.
    """
    x, y = Tensor(x_batch), Tensor(y_batch)
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("empty batch")
    gparams, dparams = state.generator_params(), state.discriminator_params()

    with _frozen(gparams):
        with no_grad():
            fake_y = state.G(x)
            fake_x = state.F(y)
        d_y = discriminator_loss(state.D_Y, y, fake_y)
        d_x = discriminator_loss(state.D_X, x, fake_x)
        d_total = ag.add(d_x, d_y)
        backward(d_total)
        adam_step(dparams, state.disc_opt, state.lr)

    parts: dict = {}
    with _frozen(dparams):
        g_total = total_generator_loss(state, x, y, parts)
        backward(g_total)
        adam_step(gparams, state.gen_opt, state.lr)

    state.step += 1
    report = {"disc_X": d_x.item(), "disc_Y": d_y.item(), **parts, "gen_total": g_total.item()}
    for k, v in report.items():
        if not math.isfinite(v):
            raise NonFiniteError(f"cyclegan {k} diverged: {v}")
    return report


def translate(state: CycleGANState, images: np.ndarray, direction: str = "X->Y") -> np.ndarray:
    """Run G (``X->Y``) or F (``Y->X``) on NHWC images in [0, 1]; output in [0, 1]."""
    net = {"X->Y": state.G, "Y->X": state.F}.get(direction)
    if net is None:
        raise ValueError(f"direction must be 'X->Y' or 'Y->X', got {direction!r}")
    images = np.asarray(images, np.float32)
    single = images.ndim == 3
    if single:
        images = images[None]
    with no_grad():
        out = net(Tensor(images * 2.0 - 1.0)).data
    out = ((out + 1.0) * 0.5).astype(np.float32)
    return out[0] if single else out
