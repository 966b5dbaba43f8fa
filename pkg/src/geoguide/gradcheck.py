"""Central finite-difference verification of analytic gradients."""

from dataclasses import dataclass

import numpy as np

from .autograd import backward, zero_grad


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float
    passed: bool


@dataclass
class GradCheckReport:
    params: list
    tolerance: float
    floor: float = 1e-12

    @property
    def max_rel_error(self):
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def passed(self):
        return all(p.passed for p in self.params)

    def lines(self):
        for p in self.params:
            flag = "PASS" if p.passed else "FAIL"
            yield (f"{flag} {p.name:<32s} max_rel_err={p.max_rel_error:.3e} "
                   f"(idx {p.worst_index}: analytic={p.analytic:.6e} fd={p.numeric:.6e})")


def relative_error(analytic, numeric, floor=1e-12):
    return np.abs(analytic - numeric) / np.maximum(floor, np.abs(analytic) + np.abs(numeric))


def noise_floor(value, epsilon, resolution=1e-5):
    """Gradient scale at which round-off alone produces a relative error of ``resolution``.

    A central difference of a float64 value ``f`` carries round-off of a few
    ulps of ``f`` divided by ``2 * epsilon``; we take ``8 * eps * |f| / epsilon``.
    Entries smaller than the returned scale are in effect compared by
    absolute error against that round-off level.
    """
    eps = np.finfo(np.float64).eps
    return max(1e-12, 8.0 * eps * abs(value) / epsilon / resolution)


def finite_difference_check(f, params, epsilon=1e-5, tolerance=1e-6, names=None):
    """Compare ``backward`` gradients of ``f()`` with central differences.

    ``f`` takes no arguments and returns a scalar DiffTensor built from
    ``params``; each parameter's ``data`` is perturbed in place and restored.
    Relative error is ``|a - n| / max(|a| + |n|, floor)`` with the floor from
    :func:`noise_floor`.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = list(params)
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]

    zero_grad(params)
    loss = f()
    base = loss.item()
    if f().item() != base:
        raise NonDeterministicError("two baseline evaluations of f differ")
    backward(loss)
    floor = noise_floor(base, epsilon)

    checks = []
    for name, p in zip(names, params):
        analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).copy()
        flat = p.data.reshape(-1)
        numeric = np.empty(p.size)
        for i in range(p.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = f().item()
            flat[i] = orig - epsilon
            down = f().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * epsilon)
        rel = relative_error(analytic, numeric, floor)
        worst = int(np.argmax(rel)) if rel.size else 0
        err = float(rel[worst]) if rel.size else 0.0
        checks.append(ParamCheck(name, err, worst, float(analytic[worst]), float(numeric[worst]),
                                 err <= tolerance))
    zero_grad(params)
    return GradCheckReport(checks, tolerance, floor)
