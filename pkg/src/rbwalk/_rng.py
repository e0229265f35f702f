"""Counter-based random numbers shared by every numba kernel.

Environment draws are pure functions of a 64-bit vertex key, so a tree
realization does not depend on the order in which vertices are touched.
Walk and offspring randomness use a SplitMix64 stream whose state lives in
a one-element ``uint64`` array, which lets kernels pause and resume.
"""

import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_SALT_U1 = np.uint64(0x243F6A8885A308D3)
_SALT_U2 = np.uint64(0x13198A2E03707344)
_S11 = np.uint64(11)
_S27 = np.uint64(27)
_S30 = np.uint64(30)
_S31 = np.uint64(31)
_ONE = np.uint64(1)
_TWO_POW_M53 = 1.0 / 9007199254740992.0

# stream tags used to split one user seed into independent families of keys
TAG_ENV = 0
TAG_WALK = 1
TAG_GW = 2
TAG_PAIR = 3


@njit(cache=True, nogil=True)
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, nogil=True)
def replica_key(base, replica):
    return mix64(base ^ mix64(np.uint64(replica) * GOLDEN + _ONE))


@njit(cache=True, nogil=True)
def child_key(parent_key, i):
    return mix64(parent_key + (np.uint64(i) + _ONE) * GOLDEN)


@njit(cache=True, nogil=True)
def normal_from_key(key):
    """Standard normal via Box-Muller from two hashed uniforms."""
    u1 = ((mix64(key ^ _SALT_U1) >> _S11) + _ONE) * _TWO_POW_M53
    u2 = (mix64(key ^ _SALT_U2) >> _S11) * _TWO_POW_M53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@njit(cache=True, nogil=True)
def next_uniform(state):
    """Uniform on [0, 1) from a SplitMix64 stream held in ``state[0]``."""
    state[0] += GOLDEN
    return (mix64(state[0]) >> _S11) * _TWO_POW_M53


def base_key(seed: int, tag: int) -> np.uint64:
    """Derive the 64-bit base key for one stream family from a user seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(tag),))
    return ss.generate_state(1, dtype=np.uint64)[0]


def new_stream(seed: int, replica: int, tag: int) -> np.ndarray:
    """State array for the per-replica stream ``(seed, replica, tag)``."""
    return np.array([replica_key(base_key(seed, tag), replica)], dtype=np.uint64)
