"""Counter-based random streams.

Environments are generated from SplitMix64 outputs keyed by a per-vertex
64-bit label, so the marks of a vertex never depend on the order in which
the walk discovers the tree.  Walk steps use the same generator with a
per-walk key and the step index as counter.

Branching samplers draw from numba's thread-local Mersenne Twister, seeded
once per job from a ``numpy.random.SeedSequence`` child.
"""
from __future__ import annotations

import numpy as np
from numba import njit

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0

_MASK = (1 << 64) - 1


@njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def uniform_at(key, counter):
    """Uniform on [0, 1) from position ``counter`` of stream ``key``."""
    z = mix64(key + (np.uint64(counter) + _ONE) * GAMMA)
    return np.float64(z >> _S11) * _INV53


@njit(cache=True, inline="always")
def child_key(key, index):
    return mix64(key ^ mix64(np.uint64(index) + _ONE + GAMMA))


@njit(cache=True, inline="always")
def root_key(key, index):
    return mix64(mix64(key) + np.uint64(index) * GAMMA)


# Pure-Python references, used as oracles in tests.

def mix64_py(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def uniform_at_py(key: int, counter: int) -> float:
    z = mix64_py(key + (counter + 1) * 0x9E3779B97F4A7C15)
    return (z >> 11) * _INV53


def child_key_py(key: int, index: int) -> int:
    return mix64_py(key ^ mix64_py(index + 1 + 0x9E3779B97F4A7C15))


def root_key_py(key: int, index: int) -> int:
    return mix64_py(mix64_py(key) + index * 0x9E3779B97F4A7C15)


# Seed derivation.

def as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        return np.random.SeedSequence(int(seed.integers(0, 2**63)))
    if seed is None:
        raise ValueError("an explicit seed is required")
    return np.random.SeedSequence(int(seed))


def key64(seed) -> np.uint64:
    """A 64-bit stream key derived from a seed or SeedSequence."""
    return np.uint64(as_seed_sequence(seed).generate_state(1, np.uint64)[0])


def job_seeds(seed, n_jobs: int) -> list[np.random.SeedSequence]:
    """Children of ``seed`` indexed by job number.

    Unlike ``SeedSequence.spawn`` this does not mutate the parent, so the
    same call always yields the same children.
    """
    parent = as_seed_sequence(seed)
    return [
        np.random.SeedSequence(parent.entropy, spawn_key=parent.spawn_key + (i,))
        for i in range(n_jobs)
    ]


def mt_seed(seed) -> int:
    """A 32-bit seed for numba's per-thread generator."""
    return int(as_seed_sequence(seed).generate_state(1, np.uint32)[0])


@njit(cache=True)
def seed_numba(s):
    np.random.seed(s)
