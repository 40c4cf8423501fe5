"""
Counter-based random streams.

Every normal draw is addressed by (seed, stream tag, particle, step). A
Philox generator is keyed by (seed, stream tag, particle) and its counter is
positioned at the start of a block of STEP_BLOCK steps, so any block of any
particle can be regenerated on its own, in any order and on any thread.
"""
import numpy as np

from kinetic.constants import STEP_BLOCK
from kinetic.exceptions import ArgumentError


_MASK64 = (1 << 64) - 1


def _key(seed, stream, particle):
    if not 0 <= particle < (1 << 32):
        raise ArgumentError(f'Particle index {particle} out of range.')
    return np.array([seed & _MASK64, ((stream & 0xFFFFFFFF) << 32) | particle], dtype=np.uint64)


def block_generator(seed, stream, particle, block):
    # Counter word 1 carries the block index; a block never draws the
    # 2**64 words needed to carry into it from word 0.
    counter = np.array([0, block, 0, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=_key(seed, stream, particle), counter=counter))


def normal_block(seed, stream, particle, block, size=STEP_BLOCK):
    return block_generator(seed, stream, particle, block).standard_normal(size)


class NormalStream:
    """
    Standard normals for `n_particles` particles over `n_steps` steps, served
    one step at a time (a vector over particles) from cached blocks.

    :param seed [int]: 64-bit seed.
    :param stream [int]: stream tag (see constants.STREAM).
    :param n_particles [int]: number of particles.
    :param n_steps [int]: number of steps.
    :param pool [Executor]: optional executor used to fill blocks in parallel.
    """

    def __init__(self, seed, stream, n_particles, n_steps, pool=None):
        self.seed = int(seed)
        self.stream = int(stream)
        self.n_particles = int(n_particles)
        self.n_steps = int(n_steps)
        self.pool = pool
        self._block = -1
        self._cache = None

    def _fill(self, block):
        size = min(STEP_BLOCK, self.n_steps - block * STEP_BLOCK)
        make = lambda i: normal_block(self.seed, self.stream, i, block, STEP_BLOCK)[:size]
        if self.pool is not None:
            rows = list(self.pool.map(make, range(self.n_particles)))
        else:
            rows = [make(i) for i in range(self.n_particles)]
        self._cache = np.array(rows).reshape(self.n_particles, size)
        self._block = block

    def step(self, k):
        if not 0 <= k < self.n_steps:
            raise ArgumentError(f'Step {k} outside [0, {self.n_steps}).')
        block, offset = divmod(k, STEP_BLOCK)
        if block != self._block:
            self._fill(block)
        return self._cache[:, offset]

    def all_steps(self):
        out = np.empty((self.n_particles, self.n_steps))
        for k in range(self.n_steps):
            out[:, k] = self.step(k)
        return out


def initial_normals(seed, stream, n_particles, dim=2):
    """dim standard normals per particle, drawn from block 0 of each particle key."""
    return np.array([normal_block(seed, stream, i, 0, dim) for i in range(n_particles)]).reshape(n_particles, dim)


def derive_seed(*words):
    """A 64-bit seed derived from integer words (seed, cell, replicate, ...)."""
    return int(np.random.SeedSequence([int(w) & _MASK64 for w in words]).generate_state(1, dtype=np.uint64)[0])
