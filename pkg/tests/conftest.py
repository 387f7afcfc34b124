import sys
from pathlib import Path

import numpy as np
import pytest

from gfnoma.channel_sim import draw_activity, draw_channel, synthesize_pair
from gfnoma.tx_waveform import DpskAlphabet, build_spreading_matrix, random_frame

sys.path.insert(0, str(Path(__file__).parent))


def make_pair(rng, L, U, K, N, noise_var, M=4, active=None, P=None):
    """Seeded scene: codes, activity, channels, a DPSK symbol pair and observations."""
    P = P if P is not None else build_spreading_matrix(L, U)
    alphabet = DpskAlphabet(M)
    act = draw_activity(U, K, rng) if active is None else active
    ch = draw_channel(U, N, rng)
    s_prev = np.ones(U, dtype=complex)
    s_curr = np.ones(U, dtype=complex)
    for u in act.active:
        frame, _ = random_frame(rng, alphabet, 3)
        s_prev[u], s_curr[u] = frame.symbols[-2], frame.symbols[-1]
    pair = synthesize_pair(P, ch, act, s_prev, s_curr, noise_var, rng)
    return P, pair


@pytest.fixture
def scene():
    return make_pair
