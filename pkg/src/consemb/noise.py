"""Token-embedding noise shared by the text and segmentation objectives."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import InvalidInputError

DISTRIBUTIONS = ("uniform", "gaussian")
# N(0, 1/3) has the same per-component variance as U(-1, 1)
GAUSSIAN_STD = 1.0 / math.sqrt(3.0)


@dataclass(frozen=True)
class NoiseSpec:
    alpha: float = 5.0
    distribution: str = "uniform"
    seed: int = 0
    # "sequence": L is each sequence's non-pad length; "padded": L is the padded length
    length_mode: str = "sequence"

    def __post_init__(self):
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise InvalidInputError(f"noise alpha must be finite and >= 0, got {self.alpha}")
        if self.distribution not in DISTRIBUTIONS:
            raise InvalidInputError(f"unknown noise distribution {self.distribution!r}")
        if self.length_mode not in ("sequence", "padded"):
            raise InvalidInputError(f"unknown length mode {self.length_mode!r}")

    def generator(self) -> torch.Generator:
        return torch.Generator().manual_seed(int(self.seed))


def noise_scale(L: int, C: int, alpha: float) -> float:
    if L < 1 or C < 1:
        raise InvalidInputError(f"L and C must be >= 1, got L={L}, C={C}")
    return alpha / math.sqrt(L * C)


def sample_epsilon(shape, distribution: str, generator: torch.Generator, dtype=torch.float32):
    if distribution == "uniform":
        return torch.rand(shape, generator=generator, dtype=dtype) * 2.0 - 1.0
    if distribution == "gaussian":
        return torch.randn(shape, generator=generator, dtype=dtype) * GAUSSIAN_STD
    raise InvalidInputError(f"unknown noise distribution {distribution!r}")


def inject_noise(x: torch.Tensor, spec: NoiseSpec, pad_mask: torch.Tensor | None = None,
                 generator: torch.Generator | None = None) -> torch.Tensor:
    """Return ``x + alpha / sqrt(L*C) * eps`` with pad positions left untouched.

    ``x`` is B x L x C; ``pad_mask`` is B x L and True at padding. A fresh
    generator seeded from ``spec.seed`` is used unless one is passed in.
    """
    if x.dim() != 3:
        raise InvalidInputError(f"expected B x L x C embeddings, got shape {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise InvalidInputError("embeddings contain non-finite values")
    if spec.alpha == 0:
        return x.clone()
    B, L, C = x.shape
    if pad_mask is None:
        pad_mask = torch.zeros(B, L, dtype=torch.bool)
    keep = (~pad_mask).to(x.dtype)
    if spec.length_mode == "sequence":
        lengths = keep.sum(dim=1).clamp(min=1)
    else:
        lengths = torch.full((B,), float(L), dtype=x.dtype)
    scale = spec.alpha / torch.sqrt(lengths * C)
    gen = generator if generator is not None else spec.generator()
    eps = sample_epsilon((B, L, C), spec.distribution, gen, dtype=x.dtype)
    return x + eps * scale.view(B, 1, 1) * keep.unsqueeze(-1)
