"""Gaussian-mixture heads for numerical properties and numeric input features.

All values live in normalized units (the fitted [0, 1] training range).
A single component with its scale frozen at 1 reduces the negative
log-likelihood to squared error plus a constant, which is the plain
regression special case.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError

SCALE_FLOOR = 1e-3
LOG_TWO_PI = math.log(2.0 * math.pi)


@dataclass
class GmmParams:
    """Mixture weights (simplex), means, and floored scales, shape (M,) each."""

    weights: torch.Tensor
    means: torch.Tensor
    scales: torch.Tensor

    def __post_init__(self):
        if not (self.weights.shape == self.means.shape == self.scales.shape):
            raise ConfigError("weights, means, and scales must share one shape")

    @property
    def n_components(self) -> int:
        return self.weights.shape[-1]


def gmm_from_raw(
    weight_logits: torch.Tensor,
    means: torch.Tensor,
    raw_scales: torch.Tensor,
    scale_floor: float = SCALE_FLOOR,
) -> GmmParams:
    """Build valid parameters from unconstrained head outputs."""
    weights = torch.softmax(weight_logits, dim=-1)
    scales = torch.nn.functional.softplus(raw_scales) + scale_floor
    return GmmParams(weights=weights, means=means, scales=scales)


def gmm_nll(params: GmmParams, x: torch.Tensor | float) -> torch.Tensor:
    """Negative log density of x under the mixture, via log-sum-exp."""
    x = torch.as_tensor(x, dtype=params.means.dtype)
    if not bool(torch.isfinite(x).all()):
        raise ValueError("gmm_nll requires a finite target")
    z = x.unsqueeze(-1) - params.means
    log_comp = -0.5 * (z / params.scales) ** 2 - torch.log(params.scales) - 0.5 * LOG_TWO_PI
    return -torch.logsumexp(torch.log(params.weights) + log_comp, dim=-1)


def gmm_point(params: GmmParams) -> float:
    """Weight-averaged mean, the deterministic point prediction."""
    return float((params.weights * params.means).sum(dim=-1))


def gmm_sample(params: GmmParams, rng: np.random.Generator) -> float:
    """Ancestral draw: component by weight, then its Gaussian."""
    weights = params.weights.detach().cpu().double().numpy()
    k = int(np.searchsorted(np.cumsum(weights), rng.random()))
    k = min(k, len(weights) - 1)
    mean = float(params.means[..., k])
    scale = float(params.scales[..., k])
    return mean + scale * float(rng.standard_normal())


def mse_params(mean: torch.Tensor) -> GmmParams:
    """Single-component head with unit scale; NLL becomes 0.5*(mean-x)^2 + const."""
    one = torch.ones_like(mean)
    return GmmParams(weights=one.unsqueeze(-1), means=mean.unsqueeze(-1), scales=one.unsqueeze(-1))


# ---------------------------------------------------------------------------
# Numeric input features
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NumericEmbeddingConfig:
    kind: str = "periodic"  # periodic | dice
    dim: int = 16
    dice_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("periodic", "dice"):
            raise ConfigError(f"unknown numeric embedding kind {self.kind!r}")
        if self.kind == "periodic" and self.dim % 2 != 0:
            raise ConfigError("periodic embedding needs an even dim (sine/cosine pairs)")
        if self.dim < 2:
            raise ConfigError("numeric embedding dim must be >= 2")


def default_frequencies(dim: int, dtype=torch.float64) -> torch.Tensor:
    """Log-spaced initial frequencies for the periodic features (dim/2 of them)."""
    half = dim // 2
    exponents = torch.linspace(0.0, 1.0, half, dtype=dtype)
    return math.pi * torch.pow(torch.tensor(64.0, dtype=dtype), exponents)


def periodic_features(x: torch.Tensor | float, frequencies: torch.Tensor) -> torch.Tensor:
    """[sin(f_i x), cos(f_i x)] pairs; frequencies are learnable upstream."""
    x = torch.as_tensor(x, dtype=frequencies.dtype)
    angles = x.unsqueeze(-1) * frequencies
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


@functools.lru_cache(maxsize=None)
def _dice_rotation(dim: int) -> np.ndarray:
    rng = np.random.default_rng(20240 + dim)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def dice_features(x: float, cfg: NumericEmbeddingConfig, dtype=torch.float64) -> torch.Tensor:
    """Deterministic angle embedding on the unit sphere.

    Values map linearly onto [0, pi], so cosine similarity between two
    embeddings decreases monotonically with |x - y| inside dice_range.
    """
    lo, hi = cfg.dice_range
    theta = math.pi * (float(x) - lo) / (hi - lo)
    base = np.zeros(cfg.dim)
    base[0] = math.cos(theta)
    base[1] = math.sin(theta)
    return torch.as_tensor(_dice_rotation(cfg.dim) @ base, dtype=dtype)


def embed_numeric(
    x: torch.Tensor | float,
    cfg: NumericEmbeddingConfig,
    frequencies: torch.Tensor | None = None,
) -> torch.Tensor:
    """Embed one normalized value with the configured scheme."""
    if cfg.kind == "periodic":
        if frequencies is None:
            frequencies = default_frequencies(cfg.dim)
        return periodic_features(x, frequencies)
    return dice_features(float(x), cfg)
