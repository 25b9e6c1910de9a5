"""Three-stage slow-fast update engine for policy-gradient training.

Each optimization step decomposes into a fast trajectory (several gradient
steps reusing one rollout batch), a reposition (affine interpolation back
toward the step's starting point, damping off-policy drift), and a slow
correction (one extra gradient step at the interpolated point).  With plain
gradient steps and no clipping, the composition collapses to a single
closed-form update, which the test suite uses as an exact oracle.

The engine is generic over a gradient oracle and an optimizer rule, so the
same code drives both the GRPO toy tasks and the quadratic validation
problems.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

# A parameter vector is a flat 1-D float64 array; every stage consumes and
# produces arrays of the same fixed dimension.
ParameterVector = np.ndarray


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class DataError(ValueError):
    """Malformed rollout or task data."""


class NonFiniteGradientError(FloatingPointError):
    """A gradient or iterate stopped being finite."""

    def __init__(self, message: str, inner_index: int | None = None):
        super().__init__(message)
        self.inner_index = inner_index


class TrainingAborted(RuntimeError):
    """A training run stopped early; completed step traces are attached."""

    def __init__(self, message: str, traces: list, step_index: int):
        super().__init__(message)
        self.traces = traces
        self.step_index = step_index


@dataclass(frozen=True)
class GradientOracle:
    """Loss and analytic-gradient callables over (parameters, batch).

    Both callables must be deterministic given identical inputs;
    ``check_gradient_oracle`` verifies that ``grad_fn`` matches central
    finite differences of ``loss_fn``.
    """

    loss_fn: Callable[[np.ndarray, Any], float]
    grad_fn: Callable[[np.ndarray, Any], np.ndarray]


class OptimizerRule:
    """Applies one gradient step: plain SGD or adaptive-moment updates.

    ``plain_sgd`` with no clipping maps ``(theta, g)`` to exactly
    ``theta - step_size * g``.  ``adaptive_moment`` keeps one continuously
    evolving first/second-moment state across every step it applies;
    repositioning interpolates parameters only and never touches this state.
    Gradient clipping, when enabled, rescales each step's gradient to the
    given global norm before the update.
    """

    KINDS = ("plain_sgd", "adaptive_moment")

    def __init__(
        self,
        kind: str = "plain_sgd",
        step_size: float = 0.05,
        grad_clip_norm: float | None = None,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if kind not in self.KINDS:
            raise ConfigError(f"optimizer kind must be one of {self.KINDS}, got {kind!r}")
        if step_size <= 0:
            raise ConfigError(f"step_size must be positive, got {step_size}")
        if grad_clip_norm is not None and grad_clip_norm <= 0:
            raise ConfigError(f"grad_clip_norm must be positive, got {grad_clip_norm}")
        self.kind = kind
        self.step_size = float(step_size)
        self.grad_clip_norm = None if grad_clip_norm is None else float(grad_clip_norm)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self._m: np.ndarray | None = None
        self._v: np.ndarray | None = None
        self._t = 0

    def reset(self) -> None:
        """Drop accumulated moment state (adaptive_moment only)."""
        self._m = None
        self._v = None
        self._t = 0

    @property
    def step_count(self) -> int:
        return self._t

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        grad = np.asarray(grad, dtype=float)
        if grad.shape != theta.shape:
            raise DataError(f"gradient shape {grad.shape} != parameter shape {theta.shape}")
        if self.grad_clip_norm is not None:
            norm = float(np.linalg.norm(grad))
            if norm > self.grad_clip_norm:
                grad = grad * (self.grad_clip_norm / norm)
        if self.kind == "plain_sgd":
            return theta - self.step_size * grad
        if self._m is None:
            self._m = np.zeros_like(theta)
            self._v = np.zeros_like(theta)
        elif self._m.shape != theta.shape:
            raise DataError("optimizer state dimension does not match parameters")
        self._t += 1
        self._m = self.beta1 * self._m + (1.0 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1.0 - self.beta2) * grad * grad
        m_hat = self._m / (1.0 - self.beta1 ** self._t)
        v_hat = self._v / (1.0 - self.beta2 ** self._t)
        update = m_hat / (np.sqrt(v_hat) + self.eps)
        if self.weight_decay:
            update = update + self.weight_decay * theta
        return theta - self.step_size * update


@dataclass
class SfpoConfig:
    """Hyperparameters of one training run.

    ``alpha0`` is the interpolation coefficient applied before the trigger,
    ``inner_steps`` the fast-trajectory length, ``window``/``threshold`` the
    entropy-trigger knobs, and ``eps_num`` the advantage-normalization guard.
    ``clip_range``/``kl_coeff``/``group_size`` parameterize the GRPO loss.
    """

    total_steps: int = 200
    inner_steps: int = 3
    alpha0: float = 0.8
    step_size: float = 0.05
    window: int = 20
    threshold: float = 3.0
    eps_num: float = 1e-12
    clip_range: float = 0.2
    kl_coeff: float = 0.0
    group_size: int = 8
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "plain_sgd"
    grad_clip_norm: float | None = None
    temperature: float = 1.0
    top_p: float = 0.7
    stage3: bool = True
    split_minibatches: int = 1

    def validate(self) -> None:
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.inner_steps < 0:
            raise ConfigError(f"inner_steps must be >= 0, got {self.inner_steps}")
        if not 0.0 <= self.alpha0 <= 1.0:
            raise ConfigError(f"alpha0 must be in [0, 1], got {self.alpha0}")
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be positive, got {self.step_size}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.threshold <= 0:
            raise ConfigError(f"threshold must be positive, got {self.threshold}")
        if self.eps_num <= 0:
            raise ConfigError(f"eps_num must be positive, got {self.eps_num}")
        if self.clip_range <= 0:
            raise ConfigError(f"clip_range must be positive, got {self.clip_range}")
        if self.kl_coeff < 0:
            raise ConfigError(f"kl_coeff must be >= 0, got {self.kl_coeff}")
        if self.group_size < 2:
            raise ConfigError(f"group_size must be >= 2, got {self.group_size}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.optimizer not in OptimizerRule.KINDS:
            raise ConfigError(f"optimizer must be one of {OptimizerRule.KINDS}, got {self.optimizer!r}")
        if self.split_minibatches < 1:
            raise ConfigError(f"split_minibatches must be >= 1, got {self.split_minibatches}")
        if self.split_minibatches > 1 and self.batch_size % self.split_minibatches != 0:
            raise ConfigError(
                f"batch_size {self.batch_size} not divisible by split_minibatches {self.split_minibatches}"
            )

    def make_rule(self) -> OptimizerRule:
        return OptimizerRule(
            kind=self.optimizer,
            step_size=self.step_size,
            grad_clip_norm=self.grad_clip_norm,
        )


@dataclass
class StepTrace:
    """Record of one step: the parameter trajectory plus rollout metrics.

    ``fast_iterates`` holds the full inner trajectory (a single entry when
    the fast stage is skipped).  Metric fields are filled by the training
    loop; a bare three-stage step leaves them ``None``.
    """

    step_index: int
    fast_iterates: list[np.ndarray]
    repositioned: np.ndarray
    next_slow: np.ndarray
    alpha_used: float
    rollout_count: int = 0
    entropy: float | None = None
    zscore: float | None = None
    mean_reward: float | None = None
    mean_response_length: float | None = None
    loss: float | None = None
    trigger_fired: bool = False
    wall_ms: float | None = None

    @property
    def start(self) -> np.ndarray:
        return self.fast_iterates[0]


def _check_grad_finite(grad: np.ndarray, where: str, inner_index: int | None = None) -> None:
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(f"non-finite gradient at {where}", inner_index)


def fast_trajectory(
    start: np.ndarray,
    batch: Any,
    oracle: GradientOracle,
    rule: OptimizerRule,
    inner_steps: int,
    inner_batches: list | None = None,
) -> list[np.ndarray]:
    """Run ``inner_steps`` successive gradient steps on one batch.

    Returns all ``inner_steps + 1`` iterates, starting point included.  The
    batch (and any frozen log-probabilities inside it) is read-only: every
    inner gradient reuses the same data.  ``inner_batches``, when given,
    cycles sub-batches through the inner steps instead (the mini-batch split
    mode); by default every inner step sees the whole batch.
    """
    if inner_steps < 1:
        raise ConfigError(f"fast trajectory needs inner_steps >= 1, got {inner_steps}")
    theta = np.asarray(start, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise NonFiniteGradientError("non-finite start parameters", None)
    iterates = [theta]
    for k in range(inner_steps):
        step_batch = batch if inner_batches is None else inner_batches[k % len(inner_batches)]
        grad = oracle.grad_fn(iterates[-1], step_batch)
        _check_grad_finite(grad, f"inner step k={k}", k)
        iterates.append(rule.step(iterates[-1], grad))
    return iterates


def reposition(start: np.ndarray, endpoint: np.ndarray, alpha: float) -> np.ndarray:
    """Interpolate from the step start toward the trajectory endpoint.

    Returns ``start + alpha * (endpoint - start)``, a point on the segment
    between the two inputs.  ``alpha`` outside [0, 1] is a configuration
    error.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    start = np.asarray(start, dtype=float)
    endpoint = np.asarray(endpoint, dtype=float)
    if start.shape != endpoint.shape:
        raise ConfigError(f"shape mismatch: start {start.shape} vs endpoint {endpoint.shape}")
    return start + alpha * (endpoint - start)


def slow_correction(
    repositioned: np.ndarray,
    batch: Any,
    oracle: GradientOracle,
    rule: OptimizerRule,
) -> np.ndarray:
    """One extra gradient step at the repositioned point, on the same batch."""
    theta = np.asarray(repositioned, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise NonFiniteGradientError("non-finite repositioned parameters", None)
    grad = oracle.grad_fn(theta, batch)
    _check_grad_finite(grad, "slow correction")
    return rule.step(theta, grad)


def sfpo_step(
    start: np.ndarray,
    batch: Any,
    oracle: GradientOracle,
    rule: OptimizerRule,
    alpha: float,
    inner_steps: int,
    step_index: int = 0,
    stage3: bool = True,
    inner_batches: list | None = None,
) -> StepTrace:
    """One full three-stage update.

    With ``alpha == 0`` (or ``inner_steps == 0``) the fast trajectory and
    reposition are skipped and the step reduces to the plain one-shot update
    at ``start``: a single gradient evaluation.  ``stage3=False`` drops the
    slow correction (ablation only).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    if inner_steps < 0:
        raise ConfigError(f"inner_steps must be >= 0, got {inner_steps}")
    start = np.asarray(start, dtype=float)
    if alpha > 0.0 and inner_steps >= 1:
        iterates = fast_trajectory(start, batch, oracle, rule, inner_steps, inner_batches)
        repositioned = reposition(start, iterates[-1], alpha)
    else:
        iterates = [start]
        repositioned = start
    next_slow = slow_correction(repositioned, batch, oracle, rule) if stage3 else repositioned
    return StepTrace(
        step_index=step_index,
        fast_iterates=iterates,
        repositioned=repositioned,
        next_slow=next_slow,
        alpha_used=float(alpha),
        rollout_count=int(getattr(batch, "num_responses", 0)),
    )


def unified_update(
    start: np.ndarray,
    batch: Any,
    oracle: GradientOracle,
    step_size: float,
    alpha: float,
    inner_steps: int,
) -> np.ndarray:
    """Single-formula form of the three-stage step for plain gradient steps.

    Computes ``start - step_size * (alpha * sum_of_inner_gradients +
    gradient_at_repositioned_point)``.  Equivalent to the staged composition
    only for plain SGD without clipping; the staged path is the normative
    definition for adaptive rules.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    start = np.asarray(start, dtype=float)
    if alpha > 0.0 and inner_steps >= 1:
        theta = start
        grad_sum = np.zeros_like(start)
        for _ in range(inner_steps):
            grad = oracle.grad_fn(theta, batch)
            grad_sum = grad_sum + grad
            theta = theta - step_size * grad
        repositioned = start + alpha * (theta - start)
    else:
        grad_sum = np.zeros_like(start)
        repositioned = start
    return start - step_size * (alpha * grad_sum + oracle.grad_fn(repositioned, batch))


def central_difference_gradient(
    loss_fn: Callable[[np.ndarray], float],
    theta: np.ndarray,
    h: float = 1e-6,
) -> np.ndarray:
    """Central finite-difference gradient of a scalar function, one
    coordinate at a time.  Independent numerical oracle for gradient checks."""
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        up[i] += h
        down = theta.copy()
        down[i] -= h
        grad[i] = (loss_fn(up) - loss_fn(down)) / (2.0 * h)
    return grad


def check_gradient_oracle(
    oracle: GradientOracle,
    theta: np.ndarray,
    batch: Any,
    h: float = 1e-6,
) -> float:
    """Relative error between the oracle's analytic gradient and central
    finite differences of its loss at ``theta``."""
    analytic = oracle.grad_fn(np.asarray(theta, dtype=float), batch)
    numeric = central_difference_gradient(lambda x: oracle.loss_fn(x, batch), theta, h=h)
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / scale
