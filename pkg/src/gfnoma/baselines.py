"""
Reference detectors: LMMSE two-step demodulation and the known-support oracle.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .channel_sim import ActivityPattern
from .errors import ParameterError
from .noncoh_detector import SymbolDecision
from .sbl_detector import SupportEstimate
from .tx_waveform import DpskAlphabet, dpsk_hard_demap


@dataclass
class BaselineConfig:
    """Regularisation of the LMMSE step.

    ``noise_var`` is the variance used in the regulariser (the true one in
    simulation, or ``1/lambda`` from the activity detector).
    """

    noise_var: float = 0.0
    prior_var: float = 1.0

    def __post_init__(self):
        if self.noise_var < 0 or self.prior_var <= 0:
            raise ParameterError("noise_var must be >= 0 and prior_var > 0")


def lmmse_xbar(Y, Pbar, noise_var: float, prior_var: float = 1.0) -> np.ndarray:
    """``(Pbar^H Pbar + noise_var/prior_var I)^-1 Pbar^H Y``; pseudo-inverse when noiseless."""
    Y = np.asarray(Y)
    Pbar = np.asarray(Pbar)
    L, K = Pbar.shape
    if K > L:
        warnings.warn(f"{K} columns on {L} chips: estimate relies on regularisation",
                      stacklevel=2)
    if noise_var == 0:
        return np.linalg.pinv(Pbar) @ Y
    G = Pbar.conj().T @ Pbar + (noise_var / prior_var) * np.eye(K)
    return np.linalg.solve(G, Pbar.conj().T @ Y)


@dataclass
class ConventionalResult:
    decision: SymbolDecision
    ratio_estimates: np.ndarray
    fallback: np.ndarray  # True where every antenna was excluded


def conventional_detect(Y_prev, Y_curr, Pbar, alphabet: DpskAlphabet | None = None,
                        config: BaselineConfig | None = None) -> ConventionalResult:
    """Estimate both intervals by LMMSE, average per-antenna ratios, snap to the alphabet.

    Antennas with an exactly zero previous-interval estimate are left out of
    the average; a device with none left decides symbol index 0.
    """
    alphabet = alphabet or DpskAlphabet(4)
    config = config or BaselineConfig()
    Pbar = np.asarray(Pbar)
    if Pbar.ndim != 2 or Pbar.shape[1] == 0:
        raise ParameterError("conventional detection needs a nonempty reduced code matrix")
    x_prev = lmmse_xbar(Y_prev, Pbar, config.noise_var, config.prior_var)
    x_curr = lmmse_xbar(Y_curr, Pbar, config.noise_var, config.prior_var)
    ok = x_prev != 0
    ratios = np.where(ok, x_curr / np.where(ok, x_prev, 1), 0)
    count = ok.sum(axis=1)
    fallback = count == 0
    psi = np.where(fallback, 0, ratios.sum(axis=1) / np.maximum(count, 1))
    idx = alphabet.nearest_index(psi)
    idx = np.where(fallback, 0, idx)
    K = Pbar.shape[1]
    beta = np.zeros((K, alphabet.Q))
    beta[np.arange(K), idx] = 1.0
    sym = alphabet.points[idx]
    bits = dpsk_hard_demap(sym, alphabet).reshape(K, alphabet.bits_per_symbol)
    return ConventionalResult(SymbolDecision(beta, idx, sym, bits), psi, fallback)


def oracle_support(truth: ActivityPattern) -> SupportEstimate:
    """The true active set, as a support estimate without scores."""
    return SupportEstimate(active=truth.active.copy(), scores=np.zeros(0), threshold=np.nan)
