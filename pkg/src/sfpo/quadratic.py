"""Closed-form validation of the fast trajectory on quadratic objectives.

On a quadratic loss the fast trajectory has an exact closed form: along an
eigendirection with curvature lam the endpoint displacement scales the local
gradient by the gain (1 - (1 - eta*lam)^K) / lam, which tends to K*eta as
lam -> 0 and saturates for stiff directions.  These utilities evaluate that
closed form via eigendecomposition and cross-check it against the simulated
trajectory, and verify that the reposition point solves the associated
proximal subproblem.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, GradientOracle, OptimizerRule, fast_trajectory, reposition

# Eigenvalues below this fraction of the spectral norm are treated as the
# null space and handled by the lam -> 0 continuity rule.
NULL_SPACE_RTOL = 1e-10


@dataclass
class QuadraticProblem:
    """Quadratic loss L(x) = offset + g0.x + x.H.x / 2 with H symmetric PSD.

    The gradient field is g0 + H x, so the closed-form displacement is exact
    everywhere, not just locally.  Dimension is capped at 16: these are desk
    checks, not production objectives.
    """

    hessian: np.ndarray
    gradient_at_origin: np.ndarray
    offset: float = 0.0
    eigenvalues: np.ndarray = field(init=False, repr=False)
    eigenvectors: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.hessian = np.asarray(self.hessian, dtype=float)
        self.gradient_at_origin = np.asarray(self.gradient_at_origin, dtype=float)
        dim = self.gradient_at_origin.size
        if self.hessian.shape != (dim, dim):
            raise ConfigError(f"hessian shape {self.hessian.shape} != ({dim}, {dim})")
        if dim > 16:
            raise ConfigError(f"quadratic problems are capped at dim 16, got {dim}")
        scale = max(float(np.abs(self.hessian).max()), 1.0)
        if float(np.abs(self.hessian - self.hessian.T).max()) > 1e-12 * scale:
            raise ConfigError("hessian must be symmetric")
        self.eigenvalues, self.eigenvectors = np.linalg.eigh(self.hessian)
        if self.eigenvalues.min() < -1e-10 * max(self.spectral_norm, 1.0):
            raise ConfigError("hessian must be positive semi-definite")

    @property
    def dim(self) -> int:
        return self.gradient_at_origin.size

    @property
    def spectral_norm(self) -> float:
        return float(np.abs(self.eigenvalues).max()) if self.eigenvalues.size else 0.0

    def loss(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float)
        return float(self.offset + self.gradient_at_origin @ theta + 0.5 * theta @ self.hessian @ theta)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.gradient_at_origin + self.hessian @ np.asarray(theta, dtype=float)

    def oracle(self) -> GradientOracle:
        """Gradient oracle adapter (the batch argument is ignored)."""
        return GradientOracle(
            loss_fn=lambda theta, batch: self.loss(theta),
            grad_fn=lambda theta, batch: self.grad(theta),
        )


def spectral_gain(lam: float, eta: float, num_steps: int) -> float:
    """Endpoint gain of ``num_steps`` plain gradient steps along a curvature-
    ``lam`` eigendirection: (1 - (1 - eta*lam)^K) / lam, with the continuous
    extension K*eta at lam = 0.

    Evaluated through expm1/log1p so the small-lam regime keeps full
    precision instead of cancelling.
    """
    if lam < 0:
        raise ConfigError(f"lam must be >= 0, got {lam}")
    if eta <= 0:
        raise ConfigError(f"eta must be positive, got {eta}")
    if num_steps < 1:
        raise ConfigError(f"num_steps must be >= 1, got {num_steps}")
    if lam == 0.0:
        return num_steps * eta
    x = eta * lam
    if x < 1.0:
        return float(-np.expm1(num_steps * np.log1p(-x)) / lam)
    return float((1.0 - (1.0 - x) ** num_steps) / lam)


def _displacement_for_gradient(
    prob: QuadraticProblem, grad_at_start: np.ndarray, eta: float, num_steps: int
) -> np.ndarray:
    null_cut = NULL_SPACE_RTOL * prob.spectral_norm
    gains = np.array(
        [
            spectral_gain(0.0 if lam <= null_cut else float(lam), eta, num_steps)
            for lam in prob.eigenvalues
        ]
    )
    coords = prob.eigenvectors.T @ grad_at_start
    return -prob.eigenvectors @ (gains * coords)


def closed_form_displacement(prob: QuadraticProblem, eta: float, num_steps: int) -> np.ndarray:
    """Endpoint displacement of the fast trajectory started at the origin,
    evaluated in closed form via eigendecomposition.

    Warns (but still evaluates) when eta is too large for the iteration to be
    contractive on the stiffest eigendirection.
    """
    if num_steps < 1:
        raise ConfigError(f"num_steps must be >= 1, got {num_steps}")
    if eta <= 0:
        raise ConfigError(f"eta must be positive, got {eta}")
    if prob.spectral_norm > 0 and eta >= 1.0 / prob.spectral_norm:
        warnings.warn(
            f"eta={eta} is not below 1/spectral_norm={1.0 / prob.spectral_norm:.6g}; "
            "the iteration is non-contractive on the stiffest direction",
            RuntimeWarning,
            stacklevel=2,
        )
    return _displacement_for_gradient(prob, prob.gradient_at_origin, eta, num_steps)


@dataclass
class TrajectoryReport:
    """Comparison of the simulated fast-trajectory endpoint against the
    closed form, with a per-eigendirection error breakdown."""

    ok: bool
    max_abs_error: float
    tolerance: float
    eigenvalues: np.ndarray
    per_direction_error: np.ndarray
    non_contractive: bool

    def summary(self) -> str:
        status = "ok" if self.ok else "FAIL"
        lines = [f"fast-trajectory closed form: {status} (max |err| = {self.max_abs_error:.3e})"]
        if not self.ok:
            for lam, err in zip(self.eigenvalues, self.per_direction_error):
                lines.append(f"  eigenvalue {lam: .6g}: |err| = {err:.3e}")
        return "\n".join(lines)


def verify_fast_trajectory(
    prob: QuadraticProblem,
    eta: float,
    num_steps: int,
    theta0: np.ndarray,
    tolerance: float = 1e-10,
) -> TrajectoryReport:
    """Run the fast trajectory with plain gradient steps on the exact
    quadratic and compare its endpoint displacement to the closed form.

    On a quadratic the linearization is exact, so agreement is expected to
    machine-level accuracy.
    """
    theta0 = np.asarray(theta0, dtype=float)
    non_contractive = prob.spectral_norm > 0 and eta >= 1.0 / prob.spectral_norm
    rule = OptimizerRule(kind="plain_sgd", step_size=eta)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        iterates = fast_trajectory(theta0, None, prob.oracle(), rule, num_steps)
        predicted = _displacement_for_gradient(prob, prob.grad(theta0), eta, num_steps)
    simulated = iterates[-1] - theta0
    error = simulated - predicted
    per_direction = np.abs(prob.eigenvectors.T @ error)
    max_err = float(np.abs(error).max())
    return TrajectoryReport(
        ok=max_err <= tolerance,
        max_abs_error=max_err,
        tolerance=tolerance,
        eigenvalues=prob.eigenvalues.copy(),
        per_direction_error=per_direction,
        non_contractive=non_contractive,
    )


@dataclass
class ProximalReport:
    """Check that the reposition point solves the linearized proximal
    subproblem with weight 1/(alpha*eta)."""

    ok: bool
    minimizer: np.ndarray
    reposition_point: np.ndarray
    max_mismatch: float
    foc_residual: float
    averaged_variant_mismatch: float
    tolerance: float

    def summary(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return (
            f"proximal equivalence: {status} (mismatch {self.max_mismatch:.3e}, "
            f"first-order residual {self.foc_residual:.3e})"
        )


def verify_proximal_equivalence(
    start: np.ndarray,
    inner_grad_sum: np.ndarray,
    eta: float,
    alpha: float,
    inner_step_count: int = 1,
    candidate: np.ndarray | None = None,
    tolerance: float = 1e-12,
) -> ProximalReport:
    """Confirm the reposition point minimizes the proximal subproblem.

    The subproblem minimizes <inner_grad_sum, theta - start> plus
    (lam/2) * ||theta - start||^2 with lam = 1/(alpha*eta); its unique
    minimizer is start - alpha*eta*inner_grad_sum, which must coincide with
    repositioning the plain-gradient endpoint.  Also checks the
    averaged-gradient variant with weight 1/(alpha*eta*K), which selects the
    same point.  ``candidate`` overrides the reposition point (used to
    exercise the failure path).
    """
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must be in (0, 1] for the proximal check, got {alpha}")
    if eta <= 0:
        raise ConfigError(f"eta must be positive, got {eta}")
    if inner_step_count < 1:
        raise ConfigError(f"inner_step_count must be >= 1, got {inner_step_count}")
    start = np.asarray(start, dtype=float)
    grad_sum = np.asarray(inner_grad_sum, dtype=float)
    if start.shape != grad_sum.shape:
        raise ConfigError("start and inner_grad_sum must share a shape")

    minimizer = start - (alpha * eta) * grad_sum
    if candidate is None:
        endpoint = start - eta * grad_sum
        candidate = reposition(start, endpoint, alpha)
    else:
        candidate = np.asarray(candidate, dtype=float)

    lam = 1.0 / (alpha * eta)
    foc = grad_sum + lam * (candidate - start)
    averaged = grad_sum / inner_step_count
    minimizer_avg = start - (alpha * eta * inner_step_count) * averaged

    max_mismatch = float(np.abs(candidate - minimizer).max())
    foc_residual = float(np.abs(foc).max())
    variant_mismatch = float(np.abs(minimizer_avg - minimizer).max())
    ok = max_mismatch <= tolerance and foc_residual <= tolerance and variant_mismatch <= tolerance
    return ProximalReport(
        ok=ok,
        minimizer=minimizer,
        reposition_point=candidate,
        max_mismatch=max_mismatch,
        foc_residual=foc_residual,
        averaged_variant_mismatch=variant_mismatch,
        tolerance=tolerance,
    )


def random_psd_problem(rng: np.random.Generator, dim: int, rank: int | None = None) -> QuadraticProblem:
    """Random symmetric PSD quadratic (optionally rank-deficient) with an
    O(1) gradient at the origin."""
    rank = dim if rank is None else rank
    basis = np.linalg.qr(rng.normal(size=(dim, dim)))[0]
    eigenvalues = np.zeros(dim)
    eigenvalues[:rank] = rng.uniform(0.1, 3.0, size=rank)
    hessian = (basis * eigenvalues) @ basis.T
    hessian = 0.5 * (hessian + hessian.T)
    return QuadraticProblem(hessian=hessian, gradient_at_origin=rng.normal(size=dim))


def run_verification_suite(
    seed: int = 0,
    n_problems: int = 50,
    step_counts: tuple[int, ...] = (1, 3, 7),
) -> tuple[bool, list[dict]]:
    """Full desk-scale validation sweep; returns (all_ok, records).

    Covers the closed-form displacement on random PSD problems (including
    rank-deficient ones), the spectral-gain limits, and the proximal
    equivalence of the reposition point over an alpha grid.
    """
    rng = np.random.default_rng(seed)
    records: list[dict] = []
    all_ok = True

    for i in range(n_problems):
        dim = int(rng.integers(2, 9))
        rank = dim if i % 3 else int(rng.integers(1, dim + 1))
        prob = random_psd_problem(rng, dim, rank)
        eta = 0.5 / max(prob.spectral_norm, 1e-6)
        num_steps = int(step_counts[i % len(step_counts)])
        report = verify_fast_trajectory(prob, eta, num_steps, rng.normal(size=dim))
        records.append(
            {
                "check": "fast_trajectory_closed_form",
                "problem": i,
                "dim": dim,
                "rank": rank,
                "num_steps": num_steps,
                "ok": report.ok,
                "max_abs_error": report.max_abs_error,
            }
        )
        all_ok &= report.ok

    for alpha in (0.25, 0.5, 0.8, 1.0):
        report = verify_proximal_equivalence(
            start=rng.normal(size=6),
            inner_grad_sum=rng.normal(size=6),
            eta=0.1,
            alpha=alpha,
            inner_step_count=3,
        )
        records.append(
            {
                "check": "proximal_equivalence",
                "alpha": alpha,
                "ok": report.ok,
                "max_mismatch": report.max_mismatch,
                "foc_residual": report.foc_residual,
            }
        )
        all_ok &= report.ok

    for num_steps in step_counts:
        eta = 0.1
        zero_gain_ok = spectral_gain(0.0, eta, num_steps) == num_steps * eta
        tiny = spectral_gain(1e-12, eta, num_steps)
        continuity_ok = abs(tiny - num_steps * eta) <= 1e-6 * num_steps * eta
        records.append(
            {
                "check": "spectral_gain_limits",
                "num_steps": int(num_steps),
                "ok": bool(zero_gain_ok and continuity_ok),
                "gain_at_zero": spectral_gain(0.0, eta, num_steps),
                "gain_near_zero": tiny,
            }
        )
        all_ok &= zero_gain_ok and continuity_ok

    return bool(all_ok), records
