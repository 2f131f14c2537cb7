"""
Counter-based random streams.

Every draw is a pure function of (seed, chain index, purpose, step): the Philox
key is built from the seed, chain index and purpose, and the step index is
placed in the high word of the 256-bit counter. Chains therefore never share
draws, and the noise used at step i does not depend on how many draws other
steps consumed.
"""

import logging
from enum import IntEnum

import numpy as np

logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1


class Purpose(IntEnum):
    """Independent stream families derived from one seed."""

    LANGEVIN = 0
    INIT = 1
    MEASUREMENT = 2
    TWO_STEP = 3
    PARAMETERS = 4
    ORACLE = 5


class CounterStream:
    """
    Stateless stream of standard normal / uniform draws indexed by step.

    Args:
        seed: 64-bit seed (negative values are reduced modulo 2**64)
        chain_index: index of the chain owning the stream
        purpose: which stream family to draw from
    """

    def __init__(self, seed: int, chain_index: int = 0, purpose: Purpose = Purpose.LANGEVIN):
        if chain_index < 0:
            raise ValueError(f"chain_index must be non-negative, got {chain_index}")
        self.seed = int(seed)
        self.chain_index = int(chain_index)
        self.purpose = Purpose(purpose)
        # 128-bit key: low word = seed, high word = (chain, purpose)
        high = (self.chain_index << 3) | int(self.purpose)
        self._key = (self.seed & _MASK64) | ((high & _MASK64) << 64)

    def generator(self, step: int) -> np.random.Generator:
        """Return a fresh generator positioned at the start of ``step``."""
        if step < 0:
            raise ValueError(f"step must be non-negative, got {step}")
        counter = np.array([0, 0, 0, step], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=self._key, counter=counter))

    def normal(self, step: int, size) -> np.ndarray:
        """Standard normal draws for ``step``."""
        return self.generator(step).standard_normal(size)

    def uniform(self, step: int, size) -> np.ndarray:
        """Uniform [0, 1) draws for ``step``."""
        return self.generator(step).random(size)

    def __repr__(self) -> str:
        return (
            f"CounterStream(seed={self.seed}, chain_index={self.chain_index}, "
            f"purpose={self.purpose.name})"
        )
