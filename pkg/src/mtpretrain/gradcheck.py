"""Central finite-difference check of reverse-mode gradients."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .tensor import no_grad


@dataclass
class GradCheckReport:
    tol: float
    errors: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    nonfinite: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures and not self.nonfinite

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    def summary(self):
        lines = []
        for name, err in self.errors.items():
            flag = "FAIL" if name in self.failures else "ok"
            lines.append(f"{name:40s} {self.checked[name]:6d}  {err:.3e}  {flag}")
        for name in self.nonfinite:
            lines.append(f"{name:40s} non-finite probe")
        return "\n".join(lines)


def relative_error(a, b):
    return abs(a - b) / max(1.0, abs(a), abs(b))


def _scalar(f):
    try:
        with no_grad():
            value = f().item()
    except (DomainError, FloatingPointError):
        return float("nan")
    return value


def grad_check(f, params, h=1e-5, tol=1e-4, max_entries=None, rng=None):
    """Compare ``backward`` gradients of ``f()`` to central differences.

    ``f`` takes no arguments and returns a scalar Tensor built from the
    tensors in ``params`` (a name -> Tensor mapping or a sequence).  Each
    probed element is perturbed in place and restored afterwards.  With
    ``max_entries`` set, at most that many elements per tensor are probed,
    chosen by ``rng`` (a ``numpy.random.Generator``).
    """
    if not isinstance(params, dict):
        params = {f"param{i}": p for i, p in enumerate(params)}
    report = GradCheckReport(tol=tol)

    for p in params.values():
        p.zero_grad()
    try:
        loss = f()
    except (DomainError, FloatingPointError):
        report.nonfinite.append("<base point>")
        return report
    if not np.isfinite(loss.item()):
        report.nonfinite.append("<base point>")
        return report
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in params.items()}

    for name, p in params.items():
        flat = p.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            rng = rng if rng is not None else np.random.default_rng(0)
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        else:
            indices = np.arange(flat.size)
        worst = 0.0
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f)
            flat[i] = orig - h
            fm = _scalar(f)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                if name not in report.nonfinite:
                    report.nonfinite.append(name)
                continue
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, relative_error(analytic[name].reshape(-1)[i], numeric))
        report.errors[name] = worst
        report.checked[name] = len(indices)
        if worst > tol:
            report.failures.append(name)
    return report
