"""Named counter-based RNG streams.

Every stochastic component draws from its own Philox stream so that, e.g.,
turning source masking on or off never shifts the target-mask draws.  A
zero-sized request must not consume state; callers guard those paths.
"""

import hashlib

import numpy as np

# Canonical stream names used across the package.
MASK_Y = "mask-y"
MASK_X = "mask-x"
DROPOUT = "dropout"
INIT = "init"
DATA_ORDER = "data-order"


def _stream_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Fresh generator for (seed, name, index); deterministic, independent."""
    ss = np.random.SeedSequence([int(seed), _stream_key(name), int(index)])
    return np.random.Generator(np.random.Philox(ss))


class RngStreams:
    """Lazily created, stateful named streams rooted at one seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = make_stream(self.seed, name)
        return self._streams[name]

    def substream(self, name: str, index: int) -> np.random.Generator:
        """Independent child stream; not cached, for parallel consumers."""
        return make_stream(self.seed, name, index)
