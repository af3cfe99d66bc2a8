"""Central-difference gradient checking for tape-differentiated functions."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, backward


@dataclass
class GradCheckReport:
    max_rel_error: list = field(default_factory=list)
    tol: float = 1e-4
    evaluations: int = 0

    @property
    def worst(self):
        return max(self.max_rel_error, default=0.0)

    @property
    def passed(self):
        return self.worst <= self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        errs = ", ".join(f"{e:.2e}" for e in self.max_rel_error)
        return f"{status} max rel err {self.worst:.3e} (tol {self.tol:g}) per input: [{errs}]"


def relative_error(analytic, numeric, floor=1e-3):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from
    turning round-off into huge ratios."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numerical_gradient(f, inputs, t, h=1e-5):
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(*inputs).data)
        flat[i] = orig - h
        fm = float(f(*inputs).data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def grad_check(f, inputs, h=1e-5, tol=1e-4, floor=1e-3):
    """Compare backprop gradients of scalar ``f(*inputs)`` with central
    differences for every element of every input that requires a gradient.

    ``f`` must be deterministic. Failures are reported, never raised.
    """
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = f(*inputs)
    backward(loss, tape)
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]

    report = GradCheckReport(tol=tol)
    for t, a in zip(inputs, analytic):
        if not t.requires_grad:
            report.max_rel_error.append(0.0)
            continue
        if a is None:
            a = np.zeros_like(t.data)
        num = numerical_gradient(f, inputs, t, h)
        report.evaluations += 2 * t.size
        err = relative_error(a, num, floor) if t.size else np.zeros(1)
        report.max_rel_error.append(float(err.max()))
    return report

