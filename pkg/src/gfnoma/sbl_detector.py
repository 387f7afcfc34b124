"""
Active-device detection by block sparse Bayesian learning.

Each row ``u`` of the U x N signal matrix gets a zero-mean Gaussian prior
with shared precision ``gamma_u`` (Gamma hyperprior, rate 0, shape learned
from the spread of the gammas).  Belief propagation handles the linear
chip constraints and mean-field handles the likelihood and prior factors,
which gives a GAMP-like recursion with per-antenna noise precision.
Rows with small learned precision are declared active.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import messages as msg
from .errors import ParameterError


@dataclass
class ThresholdPolicy:
    """How the activity threshold on gamma is chosen.

    kind:
        ``"gap"`` splits sorted log-gammas at their widest gap; the split is
        accepted only if that gap spans at least a factor ``min_ratio``.
        ``"fixed"`` uses ``value`` directly.
        ``"two_cluster"`` runs 1-D two-means on log-gammas and cuts halfway
        between the cluster centres.
    single_device_threshold:
        Used by the data-driven policies when there is a single device and
        hence nothing to split.  Signal rows have unit prior power, so a
        precision above 10 means the row carries at most a tenth of it.
    """

    kind: str = "gap"
    value: float | None = None
    min_ratio: float = 1.5
    single_device_threshold: float = 10.0

    def __post_init__(self):
        if self.kind not in ("gap", "fixed", "two_cluster"):
            raise ParameterError(f"unknown threshold policy {self.kind!r}")
        if self.kind == "fixed" and (self.value is None or not self.value > 0):
            raise ParameterError("fixed threshold needs a positive value")


@dataclass
class SblConfig:
    max_iter: int = 50
    tol: float = 1e-4
    gamma_max: float = 1e11
    lambda_max: float = 1e12
    var_floor: float = 1e-12
    joint_slots: bool = True
    damping: float = 0.0
    lambda_init: float = 10.0
    gamma_init: float = 1.0
    policy: ThresholdPolicy = field(default_factory=ThresholdPolicy)


@dataclass
class SblState:
    """Message state; slot axis first (slot 0 = t-1 when both slots are used)."""

    fm_x: np.ndarray
    fv_x: np.ndarray
    m_x: np.ndarray
    v_x: np.ndarray
    mz_back: np.ndarray
    vz_back: np.ndarray
    mz_prev: np.ndarray
    vz_prev: np.ndarray
    m_z: np.ndarray
    v_z: np.ndarray
    gamma: np.ndarray
    epsilon: float
    eta: float
    lam: np.ndarray
    iteration: int = 0
    events: Counter = field(default_factory=Counter)

    @classmethod
    def initial(cls, S: int, L: int, U: int, N: int, config: SblConfig) -> "SblState":
        zx = np.zeros((S, U, N), dtype=complex)
        zz = np.zeros((S, L, N), dtype=complex)
        return cls(
            fm_x=zx.copy(),
            fv_x=np.ones((S, U, N)),
            m_x=zx.copy(),
            v_x=np.ones((S, U, N)),
            mz_back=zz.copy(),
            vz_back=np.ones((S, L, N)),
            mz_prev=zz.copy(),
            vz_prev=np.ones((S, L, N)),
            m_z=zz.copy(),
            v_z=np.ones((S, L, N)),
            gamma=np.full(U, float(config.gamma_init)),
            epsilon=0.0,
            eta=0.0,
            lam=np.full(N, float(config.lambda_init)),
        )

    @property
    def slots(self) -> int:
        return self.m_x.shape[0]


@dataclass
class SupportEstimate:
    active: np.ndarray
    scores: np.ndarray
    threshold: float
    degenerate: bool = False


@dataclass
class SblResult:
    support: SupportEstimate
    state: SblState
    gamma_trace: list = field(default_factory=list)
    lambda_trace: list = field(default_factory=list)
    records: list = field(default_factory=list)
    iterations: int = 0


def forward_x(state: SblState, Y: np.ndarray, P: np.ndarray, floor: float = 1e-12):
    state.fm_x, state.fv_x = msg.forward_x(
        Y, P, state.mz_back, state.vz_back, state.lam, state.m_x, floor, state.events
    )
    return state.fm_x, state.fv_x


def belief_x(state: SblState):
    state.m_x, state.v_x = msg.gaussian_product_prior(
        state.fm_x, state.fv_x, state.gamma[None, :, None]
    )
    return state.m_x, state.v_x


def backward_z(state: SblState, Y: np.ndarray, P: np.ndarray, floor: float = 1e-12,
               damping: float = 0.0):
    """New backward chip messages; the outgoing ones become the previous copies."""
    mz, vz = msg.backward_z(
        Y, P, state.m_x, state.v_x, state.lam, state.mz_back, state.vz_back, floor, state.events
    )
    if damping:
        mz = (1.0 - damping) * mz + damping * state.mz_back
        vz = (1.0 - damping) * vz + damping * state.vz_back
    state.mz_prev, state.vz_prev = state.mz_back, state.vz_back
    state.mz_back, state.vz_back = mz, vz
    return mz, vz


def belief_z_and_lambda(state: SblState, Y: np.ndarray, floor: float = 1e-12,
                        lambda_max: float = 1e12):
    state.m_z, state.v_z = msg.belief_z(Y, state.mz_back, state.vz_back, state.lam, floor,
                                        state.events)
    state.lam = msg.noise_precision(Y, state.m_z, state.v_z, lambda_max, state.events)
    return state.m_z, state.v_z, state.lam


def gamma_update(m_x, v_x, epsilon, eta, gamma_max):
    """Posterior-mean precision per row: (eps + N_eff) / (eta + sum |m|^2 + v)."""
    n_eff = m_x.shape[0] * m_x.shape[2]
    power = np.sum(np.abs(m_x) ** 2 + v_x, axis=(0, 2))
    with np.errstate(divide="ignore"):
        g = (epsilon + n_eff) / (eta + power)
    return np.where(g > gamma_max, gamma_max, g)


def update_gamma(state: SblState, gamma_max: float = 1e11):
    g = gamma_update(state.m_x, state.v_x, state.epsilon, state.eta, gamma_max)
    state.events["gamma_clamp"] += int(np.count_nonzero(g >= gamma_max))
    state.gamma = g
    return g


def epsilon_update(gamma) -> float:
    """Shape of the Gamma hyperprior learned from the spread of the precisions."""
    g = np.asarray(gamma, dtype=float)
    rad = np.log(np.mean(g)) - np.mean(np.log(g))
    return 0.5 * float(np.sqrt(max(rad, 0.0)))


def update_epsilon(state: SblState):
    state.epsilon = epsilon_update(state.gamma)
    return state.epsilon


def threshold_support(gamma, policy: ThresholdPolicy | None = None) -> SupportEstimate:
    """Indices whose precision falls below a policy-chosen threshold."""
    policy = policy or ThresholdPolicy()
    g = np.asarray(gamma, dtype=float)
    if g.size and not np.all(np.isfinite(g) & (g > 0)):
        raise ParameterError("gamma must be finite and positive")
    empty = np.zeros(0, dtype=int)
    if policy.kind == "fixed":
        th = float(policy.value)
        return SupportEstimate(np.flatnonzero(g < th), g, th)
    if g.size == 0:
        return SupportEstimate(empty, g, np.inf, degenerate=True)
    if g.size == 1:
        th = float(policy.single_device_threshold)
        return SupportEstimate(np.flatnonzero(g < th), g, th, degenerate=True)
    lg = np.log(g)
    if lg.max() - lg.min() < 1e-6:
        return SupportEstimate(empty, g, float(g.min()), degenerate=True)
    srt = np.sort(lg)
    if policy.kind == "gap":
        gaps = np.diff(srt)
        i = int(np.argmax(gaps))
        if gaps[i] < np.log(policy.min_ratio):
            return SupportEstimate(empty, g, float(g.min()), degenerate=True)
        th = float(np.exp(0.5 * (srt[i] + srt[i + 1])))
    else:
        th = float(np.exp(_two_means_cut(srt)))
    return SupportEstimate(np.flatnonzero(g < th), g, th)


def _two_means_cut(sorted_vals: np.ndarray) -> float:
    # exhaustive 1-D two-means over all split points of the sorted values
    x = sorted_vals
    n = x.size
    cs = np.cumsum(x)
    cs2 = np.cumsum(x * x)
    best, best_k = np.inf, 1
    for k in range(1, n):
        left = cs2[k - 1] - cs[k - 1] ** 2 / k
        rs, rs2 = cs[-1] - cs[k - 1], cs2[-1] - cs2[k - 1]
        right = rs2 - rs**2 / (n - k)
        if left + right < best:
            best, best_k = left + right, k
    c1 = cs[best_k - 1] / best_k
    c2 = (cs[-1] - cs[best_k - 1]) / (n - best_k)
    return 0.5 * (c1 + c2)


def _check_dims(Y_prev, Y_curr, P):
    if Y_prev.shape != Y_curr.shape or Y_prev.ndim != 2:
        raise ParameterError("Y_prev and Y_curr must be L x N matrices of equal shape")
    if P.ndim != 2 or P.shape[0] != Y_prev.shape[0]:
        raise ParameterError(f"P has {P.shape[0]} rows, observations have {Y_prev.shape[0]}")


def run_active_detection(Y_prev, Y_curr, P, config: SblConfig | None = None,
                         callback=None) -> SblResult:
    """Learn per-device precisions from a pair of observations and threshold them.

    ``callback(state)``, if given, is called after every iteration.
    """
    config = config or SblConfig()
    P = getattr(P, "entries", P)
    Y_prev = np.asarray(Y_prev, dtype=complex)
    Y_curr = np.asarray(Y_curr, dtype=complex)
    _check_dims(Y_prev, Y_curr, P)
    Y = np.stack([Y_prev, Y_curr]) if config.joint_slots else Y_curr[None]
    S, L, N = Y.shape
    U = P.shape[1]
    st = SblState.initial(S, L, U, N, config)
    res = SblResult(support=None, state=st)
    fl = config.var_floor
    for it in range(1, config.max_iter + 1):
        g_old = st.gamma
        forward_x(st, Y, P, fl)
        belief_x(st)
        backward_z(st, Y, P, fl, config.damping)
        update_gamma(st, config.gamma_max)
        update_epsilon(st)
        belief_z_and_lambda(st, Y, fl, config.lambda_max)
        st.iteration = it
        rel = float(np.max(np.abs(st.gamma - g_old) / g_old))
        res.gamma_trace.append(st.gamma.copy())
        res.lambda_trace.append(st.lam.copy())
        res.records.append({"iteration": it, "max_rel_dgamma": rel,
                            "lambda_mean": float(np.mean(st.lam))})
        if callback is not None:
            callback(st)
        if rel < config.tol:
            break
    res.iterations = st.iteration
    res.support = threshold_support(st.gamma, config.policy)
    if res.support.degenerate:
        st.events["degenerate_split"] += 1
    return res


def write_diagnostics(records, path) -> None:
    """Per-iteration records as CSV with a header row."""
    if not records:
        keys = ["iteration"]
    else:
        keys = list(records[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
