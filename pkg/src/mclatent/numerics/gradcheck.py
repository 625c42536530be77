from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad, zero_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict} max_rel_error={self.max_rel_error:.3e} (tol {self.tol:.0e}) "
            f"worst={self.worst_param}{list(self.worst_index)} checked={self.n_checked}"
        )


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_per_param: int | None = 8,
    seed: int = 0,
    floor: float = 1e-6,
    corrupt: float = 1.0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    Up to ``max_per_param`` entries of each parameter are sampled (``None``
    checks every entry). The per-entry error is
    ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps entries whose true
    gradient is ~0 from turning roundoff into huge ratios. ``corrupt`` scales
    the analytic gradient and exists for negative-control tests.
    """
    rng = np.random.default_rng(seed)
    zero_grad(params.values())
    loss = f()
    backward(loss, params.values())
    analytic = {k: p.grad.copy() * corrupt for k, p in params.items()}

    worst = (0.0, "", ())
    n = 0
    with no_grad():
        for name, p in params.items():
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            if max_per_param is None or flat.size <= max_per_param:
                picks = np.arange(flat.size)
            else:
                picks = rng.choice(flat.size, size=max_per_param, replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                a = analytic[name].reshape(-1)[i]
                err = abs(a - num) / max(abs(a), abs(num), floor)
                n += 1
                if err > worst[0] or not worst[1]:
                    worst = (err, name, np.unravel_index(i, p.shape))
    zero_grad(params.values())
    idx = tuple(int(j) for j in worst[2])
    return GradCheckReport(float(worst[0]), worst[1], idx, n, tol)
