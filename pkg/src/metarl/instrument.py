"""Call counters for cost-structure assertions.

The benchmark claims about per-epoch cost (one extra first-order gradient and
K extra rollouts for the directed variants, identical Hessian-vector-product
counts) are asserted structurally in tests via these counters rather than
inferred from wall time.
"""

from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass
class Counters:
    grad_calls: int = 0
    hvp_calls: int = 0
    rollouts: int = 0

    def snapshot(self) -> "Counters":
        return replace(self)

    def delta(self, since: "Counters") -> "Counters":
        return Counters(
            grad_calls=self.grad_calls - since.grad_calls,
            hvp_calls=self.hvp_calls - since.hvp_calls,
            rollouts=self.rollouts - since.rollouts,
        )


COUNTERS = Counters()


def reset() -> None:
    COUNTERS.grad_calls = 0
    COUNTERS.hvp_calls = 0
    COUNTERS.rollouts = 0
