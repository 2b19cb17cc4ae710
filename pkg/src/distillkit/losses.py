"""Training losses and their gradient verification harness.

All losses sum over the batch (no division by B), so the effective learning
rate couples to the batch size; that is deliberate and documented. The L2
regularizer (lambda/2)*||theta||^2 is taken over unfrozen parameters only.

Inside logarithms, exactly-zero predicted probabilities are replaced by
``epsilon``; positive entries are left untouched so that KL(y, y) is exactly
zero and the entropy-minus-KL decomposition holds to rounding error. Both
classification losses share the same guarded term, which makes the
decomposition an identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NumericalError


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters; all of these enter the config fingerprint."""

    lambda_reg: float = 1e-4
    distill_ratio: float = 0.5
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise InvalidArgumentError("lambda_reg must be >= 0")
        if not 0.0 <= self.distill_ratio <= 1.0:
            raise InvalidArgumentError("distill_ratio must lie in [0, 1]")
        if self.epsilon <= 0:
            raise InvalidArgumentError("epsilon must be positive")


def _check_probability_pair(y: np.ndarray, y_hat: np.ndarray) -> None:
    if y.ndim != 2 or y.shape != y_hat.shape:
        raise InvalidArgumentError(
            f"expected matching [B, C] arrays, got {y.shape} and {y_hat.shape}"
        )
    if np.any(y < 0) or np.any(y_hat < 0):
        raise InvalidArgumentError("probabilities must be non-negative")


def _guarded(y_hat: np.ndarray, epsilon: float) -> np.ndarray:
    return np.where(y_hat > 0, y_hat, epsilon)


def kl_loss(y: np.ndarray, y_hat: np.ndarray, theta_sq_norm: float, cfg: LossConfig) -> float:
    """Batch-summed KL divergence plus the L2 regularizer.

    Terms with y == 0 contribute exactly 0.
    """
    _check_probability_pair(y, y_hat)
    safe_pred = _guarded(y_hat, cfg.epsilon)
    log_y = np.log(np.where(y > 0, y, 1.0))
    terms = np.where(y > 0, y * (log_y - np.log(safe_pred)), 0.0)
    return float(terms.sum() + 0.5 * cfg.lambda_reg * theta_sq_norm)


def entropy_loss(y: np.ndarray, y_hat: np.ndarray, theta_sq_norm: float, cfg: LossConfig) -> float:
    """Batch-summed cross entropy -sum(y log y_hat) plus the L2 regularizer."""
    _check_probability_pair(y, y_hat)
    safe_pred = _guarded(y_hat, cfg.epsilon)
    return float(-(y * np.log(safe_pred)).sum() + 0.5 * cfg.lambda_reg * theta_sq_norm)


def classification_grad(y: np.ndarray, probabilities: np.ndarray) -> np.ndarray:
    """d(loss)/d(logits) for both KL and entropy through a softmax.

    With batch-summed losses and label rows summing to 1 this is simply
    probabilities - y (no 1/B factor).
    """
    return probabilities - y


def feature_distance_loss(
    e_student: np.ndarray, e_teacher: np.ndarray, squared: bool = False
) -> float:
    """Mean over the batch of the per-row Euclidean distance.

    ``squared`` switches to the mean squared norm (kept as an option; the
    unsquared distance is the default).
    """
    if e_student.shape != e_teacher.shape or e_student.ndim != 2:
        raise InvalidArgumentError(
            f"expected matching [B, D] arrays, got {e_student.shape} and {e_teacher.shape}"
        )
    if e_student.shape[0] == 0:
        return 0.0
    sq = ((e_student - e_teacher) ** 2).sum(axis=1)
    if squared:
        return float(sq.mean())
    return float(np.sqrt(sq).mean())


def feature_distance_grad(
    e_student: np.ndarray, e_teacher: np.ndarray, squared: bool = False
) -> np.ndarray:
    """d(feature_distance_loss)/d(e_student); rows at zero distance get 0."""
    batch = e_student.shape[0]
    diff = e_student - e_teacher
    if squared:
        return 2.0 * diff / batch
    norms = np.sqrt((diff**2).sum(axis=1, keepdims=True))
    scale = np.where(norms > 0, 1.0 / np.maximum(norms, np.finfo(np.float64).tiny), 0.0)
    return diff * scale / batch


def distill_loss(ce: float, dist: float, cfg: LossConfig) -> float:
    """Weighted combination of the two student losses; 0.5/0.5 by default."""
    return cfg.distill_ratio * ce + (1.0 - cfg.distill_ratio) * dist


# --------------------------------------------------------------------------
# Gradient verification
# --------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    rel_tol: float
    step: float
    entries: list[GradCheckEntry]

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.rel_tol

    def as_text(self) -> str:
        lines = [
            f"gradient check (central differences, h={self.step:g}, "
            f"rel_tol={self.rel_tol:g})"
        ]
        for e in self.entries:
            lines.append(
                f"  {e.name}: max rel err {e.max_rel_err:.3e} at {e.worst_index} "
                f"(analytic {e.analytic:.6e}, numeric {e.numeric:.6e})"
            )
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def grad_check(
    loss_fn,
    inputs: dict[str, np.ndarray],
    rel_tol: float = 1e-4,
    step: float = 1e-5,
    sample: int | None = None,
    sample_seed: int = 0,
) -> GradCheckReport:
    """Compare ``loss_fn``'s analytic gradients against central differences.

    ``loss_fn(inputs) -> (value, grads)`` where ``grads`` has one array per
    differentiable input. Inputs must be float64. ``sample`` limits the
    number of coordinates probed per input (seeded choice) for large tensors;
    by default every coordinate is checked.
    """
    for name, arr in inputs.items():
        if arr.dtype != np.float64:
            raise InvalidArgumentError(f"input {name!r} must be float64 for grad_check")
    value, grads = loss_fn(inputs)
    if not np.isfinite(value):
        raise NumericalError(f"loss value is not finite: {value}")
    entries = []
    rng = np.random.default_rng(sample_seed)
    for name in sorted(grads):
        analytic = np.asarray(grads[name], dtype=np.float64)
        if not np.all(np.isfinite(analytic)):
            raise NumericalError(f"analytic gradient for {name!r} is not finite")
        base = inputs[name]
        indices = list(np.ndindex(base.shape))
        if sample is not None and sample < len(indices):
            chosen = rng.choice(len(indices), size=sample, replace=False)
            indices = [indices[i] for i in sorted(chosen)]
        worst = GradCheckEntry(name, 0.0, (), 0.0, 0.0)
        for idx in indices:
            original = base[idx]
            base[idx] = original + step
            f_plus, _ = loss_fn(inputs)
            base[idx] = original - step
            f_minus, _ = loss_fn(inputs)
            base[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            if not np.isfinite(numeric):
                raise NumericalError(f"finite difference for {name!r}{idx} is not finite")
            a = float(analytic[idx])
            denom = max(abs(a) + abs(numeric), 1e-8)
            rel = abs(a - numeric) / denom
            if rel > worst.max_rel_err:
                worst = GradCheckEntry(name, rel, idx, a, numeric)
        entries.append(worst)
    return GradCheckReport(rel_tol=rel_tol, step=step, entries=entries)


def kl_check_fn(y: np.ndarray, cfg: LossConfig):
    """Adapter for grad_check over inputs {"y_hat", "theta"}."""

    def fn(inputs):
        y_hat = inputs["y_hat"]
        theta = inputs.get("theta")
        norm = float((theta**2).sum()) if theta is not None else 0.0
        value = kl_loss(y, y_hat, norm, cfg)
        grads = {"y_hat": np.where(y > 0, -y / _guarded(y_hat, cfg.epsilon), 0.0)}
        if theta is not None:
            grads["theta"] = cfg.lambda_reg * theta
        return value, grads

    return fn


def entropy_check_fn(y: np.ndarray, cfg: LossConfig):
    """Adapter for grad_check over inputs {"y_hat", "theta"}."""

    def fn(inputs):
        y_hat = inputs["y_hat"]
        theta = inputs.get("theta")
        norm = float((theta**2).sum()) if theta is not None else 0.0
        value = entropy_loss(y, y_hat, norm, cfg)
        grads = {"y_hat": -y / _guarded(y_hat, cfg.epsilon)}
        if theta is not None:
            grads["theta"] = cfg.lambda_reg * theta
        return value, grads

    return fn


def feature_distance_check_fn(squared: bool = False):
    """Adapter for grad_check over inputs {"e_student", "e_teacher"}."""

    def fn(inputs):
        e_s = inputs["e_student"]
        e_t = inputs["e_teacher"]
        value = feature_distance_loss(e_s, e_t, squared=squared)
        g = feature_distance_grad(e_s, e_t, squared=squared)
        return value, {"e_student": g, "e_teacher": -g}

    return fn
