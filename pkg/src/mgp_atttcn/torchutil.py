"""Small torch helpers: shared dtype, positivity transforms, generators."""

import math

import torch

# All model math runs in double precision: posterior conditioning is
# checked against dense oracles at 1e-8 relative, which float32 cannot hold.
DTYPE = torch.float64

# Floor added after softplus so constrained parameters stay strictly positive
# even if raw values drift far negative during optimization.
POSITIVITY_FLOOR = 1e-8


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def softplus(raw: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.softplus(raw) + POSITIVITY_FLOOR


def softplus_inverse(value) -> torch.Tensor:
    """Raw parameter whose softplus equals ``value`` (elementwise)."""
    v = as_tensor(value) - POSITIVITY_FLOOR
    if (v <= 0).any():
        raise ValueError("softplus_inverse needs values above the positivity floor")
    # log(expm1(v)), stable for large v where expm1 overflows
    return torch.where(v > 30.0, v, torch.log(torch.expm1(torch.clamp(v, max=30.0))))


def generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) & 0x7FFF_FFFF_FFFF_FFFF)
    return gen


def randn(shape, seed: int) -> torch.Tensor:
    return torch.randn(shape, generator=generator(seed), dtype=DTYPE)


def log2pi() -> float:
    return math.log(2.0 * math.pi)
