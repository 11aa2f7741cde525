"""Adam optimizer with explicit, copyable state.

Training updates a list of weight arrays; the attacks update the spectral
perturbation and the mix metric. Both keep their moments in an AdamState so a
run can be paused between phases and resumed bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np

DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8


@dataclass(frozen=True, eq=False)
class AdamState:
    """First and second moments plus the number of completed steps."""

    first: Tuple[np.ndarray, ...] = field(default_factory=tuple)
    second: Tuple[np.ndarray, ...] = field(default_factory=tuple)
    step: int = 0


@dataclass(frozen=True)
class Adam:
    """Bias-corrected Adam: θ ← θ − lr·m̂/(√v̂ + eps)."""

    lr: float
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_EPS

    def init(self, params: Sequence[np.ndarray]) -> AdamState:
        return AdamState(
            first=tuple(np.zeros_like(param, dtype=np.float64) for param in params),
            second=tuple(np.zeros_like(param, dtype=np.float64) for param in params),
            step=0,
        )

    def update(
        self,
        params: Sequence[np.ndarray],
        grads: Sequence[np.ndarray],
        state: AdamState,
    ) -> Tuple[Tuple[np.ndarray, ...], AdamState]:
        """Return updated parameters and state; inputs are left untouched."""

        if len(params) != len(grads) or len(params) != len(state.first):
            raise ValueError("params, grads and optimizer state must have the same length")

        step = state.step + 1
        first = tuple(
            self.beta1 * moment + (1.0 - self.beta1) * grad
            for moment, grad in zip(state.first, grads)
        )
        second = tuple(
            self.beta2 * moment + (1.0 - self.beta2) * grad * grad
            for moment, grad in zip(state.second, grads)
        )
        first_correction = 1.0 - self.beta1 ** step
        second_correction = 1.0 - self.beta2 ** step
        updated = tuple(
            param - self.lr * (m / first_correction) / (np.sqrt(v / second_correction) + self.eps)
            for param, m, v in zip(params, first, second)
        )
        return updated, AdamState(first=first, second=second, step=step)
