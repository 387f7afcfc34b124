"""
Gaussian message kernels shared by both detection stages.

Arrays carry a leading slot axis: ``(S, L, N)`` for chip-domain quantities
and ``(S, U, N)`` for signal rows, with slot 0 = t-1 and slot 1 = t when
both intervals are processed.  Every variance that leaves a kernel has been
clamped to ``floor``; the number of clamped entries is added to ``events``.
"""

from __future__ import annotations

from collections import Counter

import numpy as np


def clamp_var(v: np.ndarray, floor: float, events: Counter | None, key: str = "var_clamp"):
    bad = ~(v >= floor)  # also catches NaN
    n_bad = int(np.count_nonzero(bad))
    if n_bad:
        if events is not None:
            events[key] += n_bad
        v = np.where(bad, floor, v)
    return v


def forward_x(Y, P, mz_back, vz_back, lam, m_x, floor=1e-12, events=None):
    """Extrinsic Gaussian message from the chip constraints to every signal entry.

    ``v = (sum_l |P_lu|^2 / (1/lam_n + vz_ln))^-1``
    ``m = v * sum_l conj(P_lu) (y_ln - mz_ln) / (1/lam_n + vz_ln) + m_x``
    """
    denom = 1.0 / lam[None, None, :] + vz_back
    absP2 = np.abs(P) ** 2
    prec = np.matmul(absP2.T, 1.0 / denom)
    v = clamp_var(1.0 / prec, floor, events)
    m = v * np.matmul(P.conj().T, (Y - mz_back) / denom) + m_x
    return m, v


def gaussian_product_prior(fm, fv, gamma):
    """Combine the extrinsic message with a zero-mean prior of precision ``gamma``.

    ``gamma`` broadcasts against the row axis; returns belief mean/variance.
    """
    v = 1.0 / (1.0 / fv + gamma)
    m = fm / (1.0 + gamma * fv)
    return m, v


def backward_z(Y, P, m_x, v_x, lam, mz_old, vz_old, floor=1e-12, events=None):
    """Aggregate backward message at each chip with the previous-iteration correction.

    ``vz = sum_u |P_lu|^2 v_x``
    ``mz = sum_u P_lu m_x - vz (y - mz_old) / (1/lam + vz_old)``
    """
    absP2 = np.abs(P) ** 2
    vz = np.matmul(absP2, v_x)
    mz = np.matmul(P, m_x) - vz * (Y - mz_old) / (1.0 / lam[None, None, :] + vz_old)
    return mz, clamp_var(vz, floor, events)


def belief_z(Y, mz_back, vz_back, lam, floor=1e-12, events=None):
    """Posterior of the noiseless chip value given its backward message and y."""
    v = 1.0 / (lam[None, None, :] + 1.0 / vz_back)
    m = v * (Y * lam[None, None, :] + mz_back / vz_back)
    return m, clamp_var(v, floor, events)


def noise_precision(Y, m_z, v_z, lam_max=1e12, events=None):
    """Mean of the noise-precision belief, one value per antenna.

    Numerator is the number of chip observations summed over the slot axis.
    The result is kept inside ``[1/lam_max, lam_max]``.
    """
    S, L = Y.shape[0], Y.shape[1]
    resid = np.sum(np.abs(m_z - Y) ** 2 + v_z, axis=(0, 1))
    with np.errstate(divide="ignore"):
        lam = (S * L) / resid
    high = ~(lam <= lam_max)
    low = lam < 1.0 / lam_max  # overflowing residuals
    if np.any(high | low):
        if events is not None:
            events["lambda_clamp"] += int(np.count_nonzero(high | low))
        lam = np.where(high, lam_max, np.where(low, 1.0 / lam_max, lam))
    return lam
