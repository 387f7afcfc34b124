"""
Device activity, Rayleigh block-fading channels and received-pair synthesis.

SNR convention: spreading columns have unit energy, channel coefficients
unit variance and symbols unit modulus, so one device delivers unit energy
per symbol to each receive antenna.  ``SNR = 1 / noise_var``, with
``noise_var`` the variance of each complex noise chip.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .tx_waveform import SpreadingMatrix


@dataclass(frozen=True)
class ActivityPattern:
    indicators: np.ndarray  # (U,) of 0/1

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.indicators)

    @property
    def K(self) -> int:
        return int(self.indicators.sum())

    @property
    def U(self) -> int:
        return self.indicators.size

    @classmethod
    def from_indices(cls, U: int, active) -> "ActivityPattern":
        ind = np.zeros(U, dtype=np.int8)
        ind[np.asarray(active, dtype=int)] = 1
        return cls(ind)


@dataclass(frozen=True)
class ChannelRealization:
    coefficients: np.ndarray  # (U, N) complex

    @property
    def N(self) -> int:
        return self.coefficients.shape[1]


@dataclass
class ReceivedPair:
    """Observations at symbol times t-1 and t, plus ground truth for scoring.

    ``x_prev``/``x_curr`` are the U x N row-sparse signal matrices
    ``A_u h_{u,n} s_{u,tau}``; ``data`` holds the true ratio symbols of every
    device (meaningful only where active).
    """

    Y_prev: np.ndarray
    Y_curr: np.ndarray
    noise_var: float
    activity: ActivityPattern
    channel: ChannelRealization
    s_prev: np.ndarray  # equivalent symbols A_u * s_{u,t-1}
    s_curr: np.ndarray
    data: np.ndarray
    x_prev: np.ndarray
    x_curr: np.ndarray

    @property
    def Y(self) -> np.ndarray:
        """Both slots stacked as (2, L, N), slot 0 = t-1."""
        return np.stack([self.Y_prev, self.Y_curr])


def draw_activity(U: int, K: int, rng) -> ActivityPattern:
    """Exactly K of U devices active, chosen uniformly without replacement."""
    if not 0 <= K <= U:
        raise ParameterError(f"need 0 <= K <= U, got K={K}, U={U}")
    idx = np.sort(rng.choice(U, size=K, replace=False))
    return ActivityPattern.from_indices(U, idx)


def crandn(rng, shape, var: float = 1.0) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples of the given variance."""
    scale = np.sqrt(var / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def draw_channel(U: int, N: int, rng) -> ChannelRealization:
    if U < 1 or N < 1:
        raise ParameterError(f"need U, N >= 1, got U={U}, N={N}")
    return ChannelRealization(crandn(rng, (U, N)))


def snr_to_noise_variance(snr_db: float) -> float:
    return float(10.0 ** (-float(snr_db) / 10.0))


def synthesize_pair(
    P: SpreadingMatrix | np.ndarray,
    channel: ChannelRealization,
    activity: ActivityPattern,
    symbols_prev,
    symbols_curr,
    noise_var: float,
    rng,
) -> ReceivedPair:
    """``Y = P X + W`` for the two consecutive symbol intervals.

    ``symbols_prev``/``symbols_curr`` give ``s_{u,t-1}``, ``s_{u,t}`` for all
    U devices; entries of inactive devices are ignored.  The same channel is
    used for both intervals.
    """
    Pm = P.entries if isinstance(P, SpreadingMatrix) else np.asarray(P)
    L, U = Pm.shape
    H = channel.coefficients
    s_prev = np.asarray(symbols_prev, dtype=complex).reshape(-1)
    s_curr = np.asarray(symbols_curr, dtype=complex).reshape(-1)
    if H.shape[0] != U or activity.U != U or s_prev.size != U or s_curr.size != U:
        raise ParameterError(
            f"dimension mismatch: P has {U} columns, channel {H.shape[0]} rows, "
            f"activity {activity.U}, symbols {s_prev.size}/{s_curr.size}"
        )
    if noise_var < 0:
        raise ParameterError(f"noise variance must be >= 0, got {noise_var}")
    A = activity.indicators.astype(float)
    sb_prev = A * s_prev
    sb_curr = A * s_curr
    x_prev = H * sb_prev[:, None]
    x_curr = H * sb_curr[:, None]
    N = H.shape[1]
    W_prev = crandn(rng, (L, N), noise_var)
    W_curr = crandn(rng, (L, N), noise_var)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.where(A > 0, s_curr / np.where(s_prev == 0, 1, s_prev), 0)
    return ReceivedPair(
        Y_prev=Pm @ x_prev + W_prev,
        Y_curr=Pm @ x_curr + W_curr,
        noise_var=float(noise_var),
        activity=activity,
        channel=channel,
        s_prev=sb_prev,
        s_curr=sb_curr,
        data=data,
        x_prev=x_prev,
        x_curr=x_curr,
    )
