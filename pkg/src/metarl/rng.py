"""Deterministic, hierarchically derived random streams.

Every source of randomness in a run is a `Stream` addressed by a path of
integers under the run's root seed. Streams are derived by key, not by
consuming a shared generator, so the result of a run does not depend on the
order in which its parts execute: epoch 7 / task 3 / trajectory 5 draws the
same numbers whether rollouts run serially, interleaved, or in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Stream:
    """Address of a deterministic random stream: a root seed plus a path."""

    root: int
    path: tuple[int, ...] = ()

    def child(self, *indices: int) -> "Stream":
        """Derive a sub-stream; children with distinct paths are independent."""
        return Stream(self.root, self.path + tuple(int(i) for i in indices))

    def generator(self) -> np.random.Generator:
        """Fresh generator for this address. Repeated calls restart the stream."""
        seq = np.random.SeedSequence(entropy=self.root, spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(seq))
