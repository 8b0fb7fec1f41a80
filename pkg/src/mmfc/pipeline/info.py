"""Closed-form mutual information for linear-Gaussian chains X -> Y1 -> Y2."""

from __future__ import annotations

import math
from dataclasses import dataclass


def gaussian_mi(rho: float) -> float:
    """I(X;Y) in bits for jointly Gaussian scalars with correlation ``rho``."""
    rho = float(rho)
    if not abs(rho) < 1.0:
        raise ValueError(f"|rho| must be < 1 (mutual information diverges), got {rho}")
    return -0.5 * math.log1p(-rho * rho) / math.log(2.0)


@dataclass(frozen=True)
class IBDiagnosticConfig:
    rho1: float  # corr(X, Y1)
    rho2: float  # corr(Y1, Y2); +-1 means the second stage is lossless
    beta: float = 1.0  # trade-off weight, reported only
    dims: int = 1  # independent identical components

    def __post_init__(self):
        if not abs(self.rho1) < 1.0:
            raise ValueError(f"|rho1| must be < 1, got {self.rho1}")
        if not abs(self.rho2) <= 1.0:
            raise ValueError(f"|rho2| must be <= 1, got {self.rho2}")
        if self.dims < 1:
            raise ValueError("dims must be >= 1")


@dataclass(frozen=True)
class DPIReport:
    i_xy1: float
    i_xy2: float
    chain_rho: float
    beta: float
    lossless_stage2: bool

    @property
    def holds(self) -> bool:
        return self.i_xy2 <= self.i_xy1

    @property
    def equality(self) -> bool:
        return self.i_xy2 == self.i_xy1


def dpi_diagnostic(cfg: IBDiagnosticConfig) -> DPIReport:
    """In a Markov chain of Gaussians the end-to-end correlation is the product
    of the stage correlations, so I(X;Y2) can only shrink."""
    chain = cfg.rho1 * cfg.rho2
    i1 = cfg.dims * gaussian_mi(cfg.rho1)
    i2 = cfg.dims * gaussian_mi(chain)
    report = DPIReport(i1, i2, chain, cfg.beta, abs(cfg.rho2) == 1.0)
    if not report.holds:
        raise AssertionError(f"data processing inequality violated: {i2} > {i1}")
    return report
