"""
Seeded Monte-Carlo experiments: trials, metrics, sweeps and CSV output.

Every trial draws its randomness from a Philox stream keyed by
``(seed, L, N, snr, trial index)``, so a trial's result does not depend on
which other grid points or trials run alongside it.  Detectors requested
together run on the same draw (paired comparison).
"""

from __future__ import annotations

import csv
import itertools
import math
import os
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .baselines import BaselineConfig, conventional_detect, oracle_support
from .channel_sim import draw_activity, draw_channel, snr_to_noise_variance, synthesize_pair
from .errors import ParameterError
from .noncoh_detector import DataConfig, run_data_detection
from .sbl_detector import SblConfig, ThresholdPolicy, run_active_detection, write_diagnostics
from .tx_waveform import alphabet_from_name, build_spreading_matrix, random_frame

DETECTORS = ("bpmf", "conventional", "oracle-aided")


@dataclass
class RunConfig:
    users: int = 100
    antennas: tuple = (100,)
    spread_len: tuple = (13,)
    active_frac: float = 0.1
    active: int | None = None
    mod: str = "dqpsk"
    snr_db: tuple = (8.0,)
    trials: int = 100
    seed: int = 42
    detectors: tuple = ("bpmf",)
    n_aitr: int = 50
    n_ditr: int = 10
    threshold: str = "gap"
    tol: float = 1e-4
    var_floor: float = 1e-12
    gamma_max: float = 1e11
    lambda_max: float = 1e12
    joint_slots: bool = True
    paper_literal_variance: bool = False
    lambda_update: str = "pair"
    warm_lambda: bool = False
    lmmse_noise: str = "true"
    frame_len: int = 3
    workers: int = 1
    out: str | None = None
    diagnostics_dir: str | None = None

    def __post_init__(self):
        self.antennas = tuple(int(n) for n in np.atleast_1d(self.antennas))
        self.spread_len = tuple(int(n) for n in np.atleast_1d(self.spread_len))
        self.snr_db = tuple(float(s) for s in np.atleast_1d(self.snr_db))
        if isinstance(self.detectors, str):
            self.detectors = (self.detectors,)
        self.detectors = tuple(self.detectors)
        self.validate()

    def validate(self):
        if self.trials < 1:
            raise ParameterError("trials must be >= 1")
        if not self.snr_db:
            raise ParameterError("SNR list is empty")
        if not self.detectors or any(d not in DETECTORS for d in self.detectors):
            raise ParameterError(f"detectors must be drawn from {DETECTORS}, got {self.detectors}")
        if self.users < 1 or min(self.antennas) < 1:
            raise ParameterError("users and antennas must be >= 1")
        if not 0 <= self.K <= self.users:
            raise ParameterError(f"active count {self.K} outside [0, {self.users}]")
        if self.lmmse_noise not in ("true", "sbl"):
            raise ParameterError("lmmse_noise must be 'true' or 'sbl'")
        if self.frame_len < 2:
            raise ParameterError("frame_len must be >= 2")
        alphabet_from_name(self.mod)
        self.policy()
        self.data_config()
        for L in self.spread_len:
            build_spreading_matrix(L, self.users)

    @property
    def K(self) -> int:
        if self.active is not None:
            return int(self.active)
        return int(math.floor(self.active_frac * self.users + 1e-9))

    def policy(self) -> ThresholdPolicy:
        kind, _, val = self.threshold.partition(":")
        if kind == "fixed":
            try:
                return ThresholdPolicy("fixed", float(val))
            except ValueError:
                raise ParameterError(f"bad fixed threshold {self.threshold!r}") from None
        return ThresholdPolicy(kind)

    def sbl_config(self) -> SblConfig:
        return SblConfig(max_iter=self.n_aitr, tol=self.tol, gamma_max=self.gamma_max,
                         lambda_max=self.lambda_max, var_floor=self.var_floor,
                         joint_slots=self.joint_slots, policy=self.policy())

    def data_config(self) -> DataConfig:
        return DataConfig(max_iter=self.n_ditr, lambda_max=self.lambda_max,
                          var_floor=self.var_floor,
                          paper_literal_variance=self.paper_literal_variance,
                          lambda_update=self.lambda_update)


@dataclass(frozen=True)
class GridPoint:
    L: int
    N: int
    snr_db: float


@dataclass
class DetectorOutcome:
    misses: int = 0
    false_alarms: int = 0
    bit_errors: int = 0
    bits: int = 0
    bit_errors_detected: int = 0
    bits_detected: int = 0


@dataclass
class TrialResult:
    index: int
    K: int
    U: int
    outcomes: dict
    events: Counter = field(default_factory=Counter)
    sbl_records: list = field(default_factory=list)
    data_records: list = field(default_factory=list)


@dataclass
class MetricsRecord:
    snr_db: float
    L: int
    N: int
    U: int
    K: int
    detector: str
    miss_rate: float
    false_rate: float
    ber: float
    trials: int
    bits: int
    seconds: float
    ber_detected: float = math.nan
    misses: int = 0
    false_alarms: int = 0
    bit_errors: int = 0
    active_total: int = 0
    inactive_total: int = 0
    var_clamps: int = 0
    underflows: int = 0
    degenerate_splits: int = 0


CSV_FIELDS = [f for f in MetricsRecord.__dataclass_fields__]


def _zigzag(x: int) -> int:
    return 2 * x if x >= 0 else -2 * x - 1


def trial_rng(seed: int, point: GridPoint, index: int) -> np.random.Generator:
    key = (point.L, point.N, _zigzag(int(round(point.snr_db * 1000))), index)
    ss = np.random.SeedSequence(seed, spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def _score(outcome: DetectorOutcome, true_active, detected, decided_bits, true_bits,
           shared=None):
    """Bit errors over true active devices; a missed device counts all its bits wrong.

    The conditioned counters cover the true devices in ``shared`` (default:
    this detector's own support), so detectors can be compared on a common
    set of devices.
    """
    pos = {u: i for i, u in enumerate(detected)}
    shared = set(pos) if shared is None else set(shared)
    kb = true_bits.shape[1] if true_bits.ndim == 2 else 0
    for j, u in enumerate(true_active):
        outcome.bits += kb
        if u in pos:
            err = int(np.count_nonzero(decided_bits[pos[u]] != true_bits[j]))
            outcome.bit_errors += err
            if u in shared:
                outcome.bit_errors_detected += err
                outcome.bits_detected += kb
        else:
            outcome.bit_errors += kb


def run_trial(config: RunConfig, point: GridPoint, index: int, P=None) -> TrialResult:
    """One draw of activity, channels and symbols, scored for every requested detector."""
    rng = trial_rng(config.seed, point, index)
    U, K = config.users, config.K
    P = P if P is not None else build_spreading_matrix(point.L, U)
    alphabet = alphabet_from_name(config.mod)
    activity = draw_activity(U, K, rng)
    channel = draw_channel(U, point.N, rng)
    T = config.frame_len
    s_prev = np.zeros(U, dtype=complex)
    s_curr = np.zeros(U, dtype=complex)
    true_bits = np.zeros((U, alphabet.bits_per_symbol), dtype=np.uint8)
    for u in activity.active:
        frame, bits = random_frame(rng, alphabet, T)
        s_prev[u], s_curr[u] = frame.symbols[-2], frame.symbols[-1]
        true_bits[u] = bits[-alphabet.bits_per_symbol:]
    noise_var = snr_to_noise_variance(point.snr_db)
    pair = synthesize_pair(P, channel, activity, s_prev, s_curr, noise_var, rng)

    res = TrialResult(index=index, K=K, U=U, outcomes={})
    truth = activity.active
    tb = true_bits[truth]
    dcfg = config.data_config()

    sbl = None
    if any(d in ("bpmf", "conventional") for d in config.detectors):
        sbl = run_active_detection(pair.Y_prev, pair.Y_curr, P, config.sbl_config())
        res.events.update(sbl.state.events)
        res.sbl_records = sbl.records
        det = sbl.support.active
        miss = len(np.setdiff1d(truth, det))
        fa = len(np.setdiff1d(det, truth))
        lam0 = sbl.state.lam if config.warm_lambda else None

    for name in config.detectors:
        out = DetectorOutcome()
        if name == "oracle-aided":
            det = oracle_support(activity).active
            r = run_data_detection(pair.Y_prev, pair.Y_curr, P.restrict(det), alphabet, dcfg)
            decided = r.decision.bits
            if r.state is not None:
                res.events.update(r.state.events)
        else:
            det = sbl.support.active
            out.misses, out.false_alarms = miss, fa
            if name == "bpmf":
                r = run_data_detection(pair.Y_prev, pair.Y_curr, P.restrict(det), alphabet, dcfg,
                                       lambda_init=lam0)
                decided = r.decision.bits
                res.data_records = r.records
                if r.state is not None:
                    res.events.update(r.state.events)
            elif det.size:
                nv = noise_var if config.lmmse_noise == "true" else float(np.mean(1.0 / sbl.state.lam))
                c = conventional_detect(pair.Y_prev, pair.Y_curr, P.restrict(det), alphabet,
                                        BaselineConfig(noise_var=nv))
                decided = c.decision.bits
                res.events["conventional_fallback"] += int(c.fallback.sum())
            else:
                decided = np.zeros((0, alphabet.bits_per_symbol), dtype=np.uint8)
        # conditioned BER of the oracle is taken over the devices the
        # estimated support also found, pairing it with the other detectors
        shared = sbl.support.active if (name == "oracle-aided" and sbl is not None) else None
        _score(out, truth, list(det), decided, tb, shared)
        res.outcomes[name] = out
    return res


def _rate(num, den):
    return num / den if den > 0 else math.nan


def compute_metrics(results, detector: str, point: GridPoint, seconds: float = 0.0) -> MetricsRecord:
    """Aggregate trial results of one grid point for one detector."""
    if not results:
        raise ParameterError("need at least one trial result")
    outs = [r.outcomes[detector] for r in results]
    act = sum(r.K for r in results)
    inact = sum(r.U - r.K for r in results)
    misses = sum(o.misses for o in outs)
    fas = sum(o.false_alarms for o in outs)
    errs = sum(o.bit_errors for o in outs)
    bits = sum(o.bits for o in outs)
    ev = Counter()
    for r in results:
        ev.update(r.events)
    return MetricsRecord(
        snr_db=point.snr_db, L=point.L, N=point.N, U=results[0].U, K=results[0].K,
        detector=detector,
        miss_rate=_rate(misses, act), false_rate=_rate(fas, inact),
        ber=_rate(errs, bits), trials=len(results), bits=bits, seconds=seconds,
        ber_detected=_rate(sum(o.bit_errors_detected for o in outs),
                           sum(o.bits_detected for o in outs)),
        misses=misses, false_alarms=fas, bit_errors=errs,
        active_total=act, inactive_total=inact,
        var_clamps=ev["var_clamp"] + ev["lambda_clamp"] + ev["gamma_clamp"],
        underflows=ev["underflow"], degenerate_splits=ev["degenerate_split"],
    )


def _run_chunk(args):
    config, point, indices = args
    P = build_spreading_matrix(point.L, config.users)
    return [run_trial(config, point, i, P) for i in indices]


def run_point(config: RunConfig, point: GridPoint, pool=None) -> list[TrialResult]:
    idx = list(range(config.trials))
    if pool is None:
        return _run_chunk((config, point, idx))
    n = max(1, config.workers * 4)
    chunks = [idx[i::n] for i in range(n) if idx[i::n]]
    results = []
    for part in pool.map(_run_chunk, [(config, point, c) for c in chunks]):
        results.extend(part)
    results.sort(key=lambda r: r.index)
    return results


def grid(config: RunConfig) -> list[GridPoint]:
    return [GridPoint(L, N, s) for L, N, s in
            itertools.product(config.spread_len, config.antennas, config.snr_db)]


def sweep(config: RunConfig) -> list[MetricsRecord]:
    """Run the Cartesian product of (L, N, SNR); one record per point and detector."""
    config.validate()
    records = []
    pool = ProcessPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for point in grid(config):
            t0 = time.perf_counter()
            results = run_point(config, point, pool)
            dt = time.perf_counter() - t0
            for d in config.detectors:
                records.append(compute_metrics(results, d, point, dt))
            if config.diagnostics_dir:
                write_trial_diagnostics(results, point, config.diagnostics_dir)
    finally:
        if pool is not None:
            pool.shutdown()
    return records


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_csv(records, path) -> None:
    """Write records with a fixed header; floats use shortest round-trip repr."""
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_FIELDS)
            for r in records:
                row = asdict(r)
                row["seconds"] = round(row["seconds"], 3)
                w.writerow([_fmt(row[f]) for f in CSV_FIELDS])
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc.strerror or exc}") from exc


def read_csv(path) -> list[MetricsRecord]:
    types = {f.name: f.type for f in MetricsRecord.__dataclass_fields__.values()}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k, v in row.items():
                t = types[k]
                if t == "int":
                    kw[k] = int(v)
                elif t == "str":
                    kw[k] = v
                else:
                    kw[k] = float(v)
            out.append(MetricsRecord(**kw))
    return out


def write_trial_diagnostics(results, point: GridPoint, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    tag = f"L{point.L}_N{point.N}_snr{point.snr_db:g}"
    for stage, attr in (("sbl", "sbl_records"), ("data", "data_records")):
        rows = [dict(trial=r.index, **rec) for r in results for rec in getattr(r, attr)]
        if not rows:
            continue
        write_diagnostics(rows, os.path.join(directory, f"{stage}_{tag}.csv"))


def with_overrides(config: RunConfig, **kw) -> RunConfig:
    return replace(config, **kw)


def wilson_interval(successes: int, n: int, z: float) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n == 0:
        return (0.0, 1.0)
    p = successes / n
    d = 1 + z * z / n
    c = (p + z * z / (2 * n)) / d
    h = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / d
    return (max(0.0, c - h), min(1.0, c + h))
