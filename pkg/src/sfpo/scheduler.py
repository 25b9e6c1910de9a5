"""Online alpha scheduling from policy entropy.

A rolling buffer of recent per-step entropies drives a z-score trigger: the
first excursion past the threshold permanently arms the trigger, after which
the interpolation coefficient drops to zero (directly, or via a linear decay
for ablations) and training reverts to plain one-shot updates.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .core import ConfigError, DataError

STRATEGIES = ("hard_reset", "linear_decay")


class EntropyBuffer:
    """Rolling window of the most recent entropy readings.

    Mean and standard deviation (population) are recomputed from the live
    contents on every access, so they are exact by construction.
    """

    def __init__(self, window: int):
        if window < 1:
            raise ConfigError(f"window must be >= 1, got {window}")
        self.window = window
        self._values: deque[float] = deque(maxlen=window)

    def push(self, value: float) -> None:
        self._values.append(float(value))

    def __len__(self) -> int:
        return len(self._values)

    @property
    def full(self) -> bool:
        return len(self._values) == self.window

    @property
    def values(self) -> tuple[float, ...]:
        return tuple(self._values)

    @property
    def mean(self) -> float:
        if not self._values:
            raise DataError("empty entropy buffer has no mean")
        return float(np.mean(self._values))

    @property
    def std(self) -> float:
        if not self._values:
            raise DataError("empty entropy buffer has no std")
        return float(np.std(self._values))


class AlphaScheduler:
    """Entropy-triggered schedule with a one-way downgrade to alpha = 0.

    The z-score of each new entropy reading is computed against the buffer
    contents from strictly earlier steps, and the trigger arms at step s+1,
    so the alpha used at any step never depends on that step's own entropy.
    No trigger can fire until the buffer is full.  ``one_sided=True``
    restricts the trigger to downward entropy excursions.
    """

    def __init__(
        self,
        alpha0: float,
        window: int = 20,
        threshold: float = 3.0,
        eps: float = 1e-8,
        strategy: str = "hard_reset",
        decay_steps: int = 10,
        one_sided: bool = False,
        enabled: bool = True,
    ):
        if not 0.0 <= alpha0 <= 1.0:
            raise ConfigError(f"alpha0 must be in [0, 1], got {alpha0}")
        if threshold <= 0:
            raise ConfigError(f"threshold must be positive, got {threshold}")
        if eps <= 0:
            raise ConfigError(f"eps must be positive, got {eps}")
        if strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
        if decay_steps < 1:
            raise ConfigError(f"decay_steps must be >= 1, got {decay_steps}")
        self.alpha0 = float(alpha0)
        self.threshold = float(threshold)
        self.eps = float(eps)
        self.strategy = strategy
        self.decay_steps = int(decay_steps)
        self.one_sided = bool(one_sided)
        self.enabled = bool(enabled)
        self.trigger_step: int | None = None  # None means untriggered (+inf)
        self.buffer = EntropyBuffer(window)

    def alpha_for_step(self, step: int) -> float:
        """Alpha for the given step, from triggers recorded at earlier steps."""
        if self.trigger_step is None or step < self.trigger_step:
            return self.alpha0
        if self.strategy == "hard_reset":
            return 0.0
        elapsed = step - self.trigger_step
        if elapsed >= self.decay_steps:
            return 0.0
        return self.alpha0 * (1.0 - elapsed / self.decay_steps)

    def observe_entropy(self, entropy: float, step: int) -> float:
        """Record one entropy reading; returns its z-score.

        The z-score is taken against the buffer state before insertion
        (an empty buffer scores against mean 0, std 1).  If the buffer is
        full, the trigger is untripped, and the excursion reaches the
        threshold, the trigger step is set to ``step + 1``.
        """
        if not np.isfinite(entropy):
            raise DataError(f"entropy must be finite, got {entropy}")
        if len(self.buffer) == 0:
            mu, sigma = 0.0, 1.0
        else:
            mu, sigma = self.buffer.mean, self.buffer.std
        zscore = (float(entropy) - mu) / (sigma + self.eps)
        if self.enabled and self.trigger_step is None and self.buffer.full:
            excursion = -zscore if self.one_sided else abs(zscore)
            if excursion >= self.threshold:
                self.trigger_step = step + 1
        self.buffer.push(entropy)
        return zscore

    def state(self) -> dict:
        """Serializable snapshot (trigger step and buffer contents)."""
        return {
            "trigger_step": self.trigger_step,
            "buffer": list(self.buffer.values),
            "alpha0": self.alpha0,
            "strategy": self.strategy,
        }
