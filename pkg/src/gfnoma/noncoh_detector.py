"""
Non-coherent multi-device data detection for differentially modulated devices.

Works on the reduced model ``Y = Pbar Xbar + W`` (only detected devices) over
two consecutive intervals.  The differential relation
``xbar_t = psi * xbar_{t-1}`` ties the two intervals together through the
unknown ratio symbol ``psi`` of each device, which is inferred directly
without estimating channels.  Categorical quantities are handled in the log
domain.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import messages as msg
from .errors import ParameterError
from .sbl_detector import write_diagnostics  # noqa: F401  (shared CSV writer)
from .tx_waveform import DpskAlphabet, dpsk_hard_demap

PREV, CURR = 0, 1


@dataclass
class DataConfig:
    max_iter: int = 10
    tol: float = 0.0
    lambda_max: float = 1e12
    var_floor: float = 1e-12
    lambda_init: float = 10.0
    # raw second moment in the Gaussian projection instead of the central one
    paper_literal_variance: bool = False
    # "pair": 2L observations per antenna; "single": slot t only;
    # "fixed": keep the initial precision (known noise level)
    lambda_update: str = "pair"
    damping: float = 0.0

    def __post_init__(self):
        if self.lambda_update not in ("pair", "single", "fixed"):
            raise ParameterError("lambda_update must be 'pair', 'single' or 'fixed', "
                                 f"got {self.lambda_update!r}")


@dataclass
class DataState:
    """Message state of the data detector; slot axis first (0 = t-1, 1 = t)."""

    fm: np.ndarray  # (2, K, N) forward extrinsic means
    fv: np.ndarray
    m_x: np.ndarray  # (2, K, N) projected beliefs
    v_x: np.ndarray
    mz_back: np.ndarray  # (2, L, N)
    vz_back: np.ndarray
    mz_prev: np.ndarray
    vz_prev: np.ndarray
    m_z: np.ndarray
    v_z: np.ndarray
    lam: np.ndarray  # (N,)
    beta: np.ndarray  # (K, Q)
    alpha: np.ndarray  # (K, N, Q)
    rho: np.ndarray  # (K, N, Q)
    log_factors: np.ndarray | None = None  # (K, N, Q)
    iteration: int = 0
    events: Counter = field(default_factory=Counter)

    @classmethod
    def initial(cls, L: int, K: int, N: int, Q: int, lam) -> "DataState":
        zx = np.zeros((2, K, N), dtype=complex)
        zz = np.zeros((2, L, N), dtype=complex)
        return cls(
            fm=zx.copy(), fv=np.ones((2, K, N)),
            m_x=zx.copy(), v_x=np.ones((2, K, N)),
            mz_back=zz.copy(), vz_back=np.ones((2, L, N)),
            mz_prev=zz.copy(), vz_prev=np.ones((2, L, N)),
            m_z=zz.copy(), v_z=np.ones((2, L, N)),
            lam=np.broadcast_to(np.asarray(lam, dtype=float), (N,)).copy(),
            beta=np.full((K, Q), 1.0 / Q),
            alpha=np.full((K, N, Q), 1.0 / Q),
            rho=np.full((K, N, Q), 1.0 / Q),
        )


@dataclass
class SymbolDecision:
    beta: np.ndarray  # (K, Q)
    indices: np.ndarray  # (K,) constellation indices
    symbols: np.ndarray  # (K,)
    bits: np.ndarray  # (K, log2 M)


@dataclass
class DataResult:
    decision: SymbolDecision
    state: DataState | None
    records: list = field(default_factory=list)
    iterations: int = 0


def _normalize_log(logw: np.ndarray, events: Counter | None = None) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    mx = np.max(logw, axis=-1, keepdims=True)
    bad = ~np.isfinite(mx)
    w = np.exp(logw - np.where(bad, 0.0, mx))
    s = np.sum(w, axis=-1, keepdims=True)
    zero = ~(s > 0) | bad
    if np.any(zero):
        if events is not None:
            events["underflow"] += int(np.count_nonzero(zero))
        w = np.where(zero, 1.0, w)
        s = np.sum(w, axis=-1, keepdims=True)
    return w / s


def forward_xbar(state: DataState, Y: np.ndarray, Pbar: np.ndarray, floor: float = 1e-12):
    """Forward extrinsic messages to the signal entries of both intervals."""
    state.fm, state.fv = msg.forward_x(
        Y, Pbar, state.mz_back, state.vz_back, state.lam, state.m_x, floor, state.events
    )
    return state.fm, state.fv


def differential_log_factors(fm, fv, points) -> np.ndarray:
    """``log CN(fm_t; q fm_{t-1}, fv_t + |q|^2 fv_{t-1})`` for every (k, n, q)."""
    q = np.asarray(points)[None, None, :]
    var = fv[CURR][..., None] + np.abs(q) ** 2 * fv[PREV][..., None]
    d = fm[CURR][..., None] - q * fm[PREV][..., None]
    return -np.log(np.pi * var) - np.abs(d) ** 2 / var


def symbol_belief_beta(state: DataState, alphabet: DpskAlphabet):
    """Posterior over each device's ratio symbol under a uniform prior."""
    lf = differential_log_factors(state.fm, state.fv, alphabet.points)
    state.log_factors = lf
    state.beta = _normalize_log(np.sum(lf, axis=1), state.events)
    return state.beta


def extrinsic_alpha(state: DataState, n: int | None = None):
    """Symbol message towards antenna ``n`` built from all other antennas.

    Returns the (K, N, Q) array for every antenna when ``n`` is None.
    """
    lf = state.log_factors
    ext = np.sum(lf, axis=1, keepdims=True) - lf
    alpha = _normalize_log(ext, state.events)
    state.alpha = alpha
    return alpha if n is None else alpha[:, n, :]


def mixture_rho(state: DataState, alphabet: DpskAlphabet):
    """Weights of the Gaussian-mixture belief of each signal entry.

    Uses the antenna-matched extrinsic ``alpha``; the same weights serve both
    intervals.
    """
    q2 = np.abs(alphabet.points) ** 2
    with np.errstate(divide="ignore"):
        logw = np.log(state.alpha) + np.log(q2)[None, None, :] + state.log_factors
    state.rho = _normalize_log(logw, state.events)
    return state.rho


def component_moments(fm, fv, points):
    """Per-symbol Gaussian components of the beliefs of both intervals.

    Returns ``(m_t, v_t, m_p, v_p)``, each (K, N, Q).
    """
    q = np.asarray(points)[None, None, :]
    q2 = np.abs(q) ** 2
    fm_t, fv_t = fm[CURR][..., None], fv[CURR][..., None]
    fm_p, fv_p = fm[PREV][..., None], fv[PREV][..., None]
    v_t = 1.0 / (1.0 / fv_t + 1.0 / (q2 * fv_p))
    m_t = v_t * (fm_t / fv_t + q * fm_p / (q2 * fv_p))
    v_p = 1.0 / (q2 / fv_t + 1.0 / fv_p)
    m_p = v_p * (np.conj(q) * fm_t / fv_t + fm_p / fv_p)
    return m_t, v_t, m_p, v_p


def gaussian_project(weights, means, variances, central: bool = True,
                     floor: float = 1e-12, events=None):
    """Collapse a Gaussian mixture (last axis = component) to one Gaussian."""
    w = np.asarray(weights)
    m = np.sum(w * means, axis=-1)
    second = np.sum(w * (np.abs(means) ** 2 + variances), axis=-1)
    v = second - np.abs(m) ** 2 if central else second
    return m, msg.clamp_var(np.real(v), floor, events)


def backward_z_pair(state: DataState, Y: np.ndarray, Pbar: np.ndarray,
                    floor: float = 1e-12, damping: float = 0.0):
    mz, vz = msg.backward_z(
        Y, Pbar, state.m_x, state.v_x, state.lam, state.mz_back, state.vz_back, floor, state.events
    )
    if damping:
        mz = (1.0 - damping) * mz + damping * state.mz_back
        vz = (1.0 - damping) * vz + damping * state.vz_back
    state.mz_prev, state.vz_prev = state.mz_back, state.vz_back
    state.mz_back, state.vz_back = mz, vz
    return mz, vz


def update_lambda_pair(state: DataState, Y: np.ndarray, mode: str = "pair",
                       floor: float = 1e-12, lambda_max: float = 1e12):
    """z beliefs of both intervals, then the noise precision per antenna."""
    state.m_z, state.v_z = msg.belief_z(Y, state.mz_back, state.vz_back, state.lam, floor,
                                        state.events)
    if mode == "pair":
        state.lam = msg.noise_precision(Y, state.m_z, state.v_z, lambda_max, state.events)
    elif mode == "single":
        state.lam = msg.noise_precision(Y[CURR:], state.m_z[CURR:], state.v_z[CURR:],
                                        lambda_max, state.events)
    return state.lam


def hard_decide(beta, alphabet: DpskAlphabet) -> SymbolDecision:
    """Most probable symbol per device; ties go to the lowest constellation index."""
    beta = np.asarray(beta, dtype=float).reshape(-1, alphabet.Q)
    idx = np.argmax(beta, axis=1)
    sym = alphabet.points[idx]
    bits = dpsk_hard_demap(sym, alphabet).reshape(len(idx), alphabet.bits_per_symbol)
    return SymbolDecision(beta=beta, indices=idx, symbols=sym, bits=bits)


def run_data_detection(Y_prev, Y_curr, Pbar, alphabet: DpskAlphabet | None = None,
                       config: DataConfig | None = None, lambda_init=None,
                       callback=None) -> DataResult:
    """Infer the ratio symbols of the devices whose codes form ``Pbar``.

    ``lambda_init`` overrides ``config.lambda_init`` (e.g. to warm-start from
    the activity-detection stage); scalar or one value per antenna.
    ``callback(state)``, if given, is called after every iteration.
    """
    alphabet = alphabet or DpskAlphabet(4)
    config = config or DataConfig()
    Y_prev = np.asarray(Y_prev, dtype=complex)
    Y_curr = np.asarray(Y_curr, dtype=complex)
    Pbar = np.asarray(Pbar, dtype=complex)
    if Y_prev.shape != Y_curr.shape or Y_prev.ndim != 2:
        raise ParameterError("Y_prev and Y_curr must be L x N matrices of equal shape")
    if Pbar.ndim != 2 or Pbar.shape[0] != Y_prev.shape[0]:
        raise ParameterError("Pbar must have as many rows as the observations")
    L, N = Y_curr.shape
    K = Pbar.shape[1]
    Q = alphabet.Q
    if K == 0:
        empty = SymbolDecision(np.zeros((0, Q)), np.zeros(0, dtype=int),
                               np.zeros(0, dtype=complex),
                               np.zeros((0, alphabet.bits_per_symbol), dtype=np.uint8))
        return DataResult(decision=empty, state=None)
    Y = np.stack([Y_prev, Y_curr])
    lam0 = config.lambda_init if lambda_init is None else lambda_init
    st = DataState.initial(L, K, N, Q, lam0)
    res = DataResult(decision=None, state=st)
    fl = config.var_floor
    pts = alphabet.points
    for it in range(1, config.max_iter + 1):
        beta_old = st.beta
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            forward_xbar(st, Y, Pbar, fl)
            if not (np.all(np.isfinite(st.fm)) and np.all(np.isfinite(st.fv))):
                # messages blew up; keep the last finite symbol beliefs
                st.events["nonfinite"] += 1
                st.beta = beta_old
                break
            symbol_belief_beta(st, alphabet)
            extrinsic_alpha(st)
            mixture_rho(st, alphabet)
            m_t, v_t, m_p, v_p = component_moments(st.fm, st.fv, pts)
            central = not config.paper_literal_variance
            mt, vt = gaussian_project(st.rho, m_t, v_t, central, fl, st.events)
            mp, vp = gaussian_project(st.rho, m_p, v_p, central, fl, st.events)
            st.m_x = np.stack([mp, mt])
            st.v_x = np.stack([vp, vt])
            backward_z_pair(st, Y, Pbar, fl, config.damping)
            update_lambda_pair(st, Y, config.lambda_update, fl, config.lambda_max)
        st.iteration = it
        dbeta = float(np.max(np.abs(st.beta - beta_old)))
        res.records.append({"iteration": it, "max_dbeta": dbeta,
                            "lambda_mean": float(np.mean(st.lam))})
        if callback is not None:
            callback(st)
        if dbeta < config.tol:
            break
    res.iterations = st.iteration
    res.decision = hard_decide(st.beta, alphabet)
    return res

