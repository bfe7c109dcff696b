"""Correlation-constrained feature decomposition.

Each sequence is split into sparse unique codes, predicted by an unrolled
learned convolutional sparse coding network, and a non-unique residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


class ParameterError(ValueError):
    pass


@dataclass
class LcscConfig:
    n_filters: int = 8
    kernel_size: int = 5
    n_blocks: int = 2
    lambda_init: float = 0.05
    # learnable 1-layer convolution of the non-unique estimate inside x_hat
    nonunique_conv: bool = True

    def __post_init__(self):
        if self.n_blocks < 0:
            raise ParameterError("n_blocks must be >= 0")
        if self.kernel_size % 2 != 1:
            raise ParameterError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.n_filters < 1:
            raise ParameterError("n_filters must be >= 1")


@dataclass
class Decomposition:
    codes: torch.Tensor       # f, (B, n_filters, H, W)
    unique: torch.Tensor      # u = sum_i d_i * f_i, (B, 1, H, W)
    nonunique: torch.Tensor   # c = x - u
    x: torch.Tensor


def soft_threshold(z: torch.Tensor, lam) -> torch.Tensor:
    """sign(z) * max(|z| - lam, 0) with one threshold per channel (dim 1)."""
    lam = torch.as_tensor(lam, dtype=z.dtype, device=z.device)
    if torch.any(lam < 0):
        raise ParameterError("soft-threshold parameters must be nonnegative")
    if lam.ndim == 1:
        lam = lam.view(1, -1, *([1] * (z.ndim - 2)))
    return torch.sign(z) * F.relu(z.abs() - lam)


def _conv(x, w):
    return F.conv2d(x, w, padding=w.shape[-1] // 2)


def prednet_forward(x_hat, c0, c1, c2, lam, n_blocks: int) -> torch.Tensor:
    """Unrolled LISTA-style code prediction.

    f0 = h(C0 * x);  f <- h(f + C1 * (x - C2 * f)), repeated ``n_blocks`` times.
    """
    if x_hat.shape[1] != c0.shape[1]:
        raise ValueError(f"input has {x_hat.shape[1]} channels, C0 expects {c0.shape[1]}")
    f = soft_threshold(_conv(x_hat, c0), lam)
    for _ in range(n_blocks):
        f = soft_threshold(f + _conv(x_hat - _conv(f, c2), c1), lam)
    return f


class PredNet(nn.Module):
    """Unique-feature predictor for one sequence, plus its synthesis filters."""

    def __init__(self, config: LcscConfig, in_channels: int = 1):
        super().__init__()
        self.config = config
        k, n = config.kernel_size, config.n_filters
        self.c0 = nn.Parameter(torch.empty(n, in_channels, k, k))
        self.c1 = nn.Parameter(torch.empty(n, in_channels, k, k))
        self.c2 = nn.Parameter(torch.empty(in_channels, n, k, k))
        self.unique_filters = nn.Parameter(torch.empty(in_channels, n, k, k))
        self.lam = nn.Parameter(torch.full((n,), float(config.lambda_init)))
        self.nonunique = nn.Conv2d(in_channels, in_channels, 3, padding=1, bias=False) if config.nonunique_conv else None
        self.reset_parameters()

    def reset_parameters(self):
        for w in (self.c0, self.c1, self.c2, self.unique_filters):
            fan_in = w.shape[1] * w.shape[2] * w.shape[3]
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(w, -bound, bound)
        with torch.no_grad():
            self.lam.fill_(self.config.lambda_init)
        if self.nonunique is not None:
            nn.init.dirac_(self.nonunique.weight)

    @torch.no_grad()
    def clamp_(self):
        self.lam.clamp_(min=0.0)

    def codes(self, x_hat):
        return prednet_forward(x_hat, self.c0, self.c1, self.c2, self.lam, self.config.n_blocks)

    def synthesize(self, f):
        return _conv(f, self.unique_filters)

    def forward(self, x, nonunique_estimate: Optional[torch.Tensor] = None) -> Decomposition:
        return decompose(x, nonunique_estimate, self)


def decompose(x, nonunique_estimate, net: PredNet) -> Decomposition:
    """x_hat = x - Conv(c_est); f = PredNet(x_hat); u = D * f; c = x - u."""
    if nonunique_estimate is None:
        x_hat = x
    else:
        if nonunique_estimate.shape != x.shape:
            raise ValueError(f"non-unique estimate {tuple(nonunique_estimate.shape)} vs input {tuple(x.shape)}")
        x_hat = x - (net.nonunique(nonunique_estimate) if net.nonunique is not None else nonunique_estimate)
    f = net.codes(x_hat)
    u = net.synthesize(f)
    return Decomposition(codes=f, unique=u, nonunique=x - u, x=x)


def pearson_cc(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Pearson correlation over all flattened entries.

    If either input has zero variance the correlation is taken as 0.
    """
    a = a.reshape(-1)
    b = b.reshape(-1)
    if a.numel() != b.numel() or a.numel() < 2:
        raise ValueError("pearson_cc needs two inputs of equal size >= 2")
    da = a - a.mean()
    db = b - b.mean()
    num = (da * db).sum()
    den2 = (da * da).sum() * (db * db).sum()
    if den2 <= eps * eps:
        return num * 0.0
    return torch.clamp(num / torch.sqrt(den2), -1.0, 1.0)


def decomposition_loss(f_t1, f_fa, c_t1, c_fa, epsilon: float = 1.01) -> torch.Tensor:
    """PCC(f_t1, f_fa)^2 / (epsilon + PCC(c_t1, c_fa))."""
    if epsilon <= 1.0:
        raise ParameterError(f"epsilon must exceed 1 so the denominator stays positive, got {epsilon}")
    return pearson_cc(f_t1, f_fa) ** 2 / (epsilon + pearson_cc(c_t1, c_fa))


def density(f: torch.Tensor) -> float:
    """Fraction of nonzero entries."""
    return float((f != 0).float().mean())


class CFD(nn.Module):
    """The pair of per-sequence predictors."""

    def __init__(self, t1: LcscConfig, fa: LcscConfig):
        super().__init__()
        self.t1 = PredNet(t1)
        self.fa = PredNet(fa)

    def forward(self, x_t1, x_fa):
        # single-pass bootstrap: the non-unique estimate starts at zero
        return self.t1(x_t1, torch.zeros_like(x_t1)), self.fa(x_fa, torch.zeros_like(x_fa))

    @torch.no_grad()
    def clamp_(self):
        self.t1.clamp_()
        self.fa.clamp_()
