"""Input checks shared by the estimator wrappers and the CLI."""

from __future__ import annotations

import numpy as np


def check_images(X, name: str = "X", min_count: int = 1) -> np.ndarray:
    """Return ``X`` as a float32 NHWC RGB batch in [0, 1] or raise ValueError.

    A single HxWx3 image is promoted to a batch of one; grayscale HxWx1
    batches are broadcast to three channels.
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[3] not in (1, 3):
        raise ValueError(f"{name}: expected NxHxWx3 images, got shape {X.shape}")
    if X.shape[0] < min_count:
        raise ValueError(f"{name}: need at least {min_count} image(s), got {X.shape[0]}")
    if X.shape[1] != X.shape[2]:
        raise ValueError(f"{name}: images must be square, got {X.shape[1]}x{X.shape[2]}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name}: contains NaN or Inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name}: pixel values must lie in [0, 1]")
    if X.shape[3] == 1:
        X = np.repeat(X, 3, axis=3)
    return X


def check_edge_maps(E, like: np.ndarray | None = None, name: str = "edges") -> np.ndarray:
    E = np.asarray(E, dtype=np.float32)
    if E.ndim == 4 and E.shape[3] == 1:
        E = E[..., 0]
    if E.ndim == 2:
        E = E[None]
    if E.ndim != 3:
        raise ValueError(f"{name}: expected NxHxW maps, got shape {E.shape}")
    if not np.all((E == 0) | (E == 1)):
        raise ValueError(f"{name}: edge maps must be binary (0 or 1)")
    if like is not None and E.shape != like.shape[:3]:
        raise ValueError(f"{name}: shape {E.shape} does not match images {like.shape[:3]}")
    return E


def check_prompts(prompts, n: int) -> list[str]:
    if isinstance(prompts, str):
        return [prompts] * n
    prompts = list(prompts)
    if len(prompts) != n or not all(isinstance(p, str) for p in prompts):
        raise ValueError(f"need {n} prompt strings, got {len(prompts)}")
    return prompts
