"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, frozen_relu_masks, no_grad, record_relu_masks


class NonDeterministicError(RuntimeError):
    pass


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-8)


@dataclass
class GradCheckReport:
    max_rel_error: float
    rel_tol: float
    per_param: dict[str, float] = field(default_factory=dict)
    coords_checked: int = 0
    # coordinates whose +-h stencil flipped a relu and were redone with the base pattern held
    coords_frozen: int = 0
    coords_per_param: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.rel_tol

    def lines(self) -> list[str]:
        out = [f"{name}: max rel err {err:.3e} ({self.coords_per_param.get(name, 0)} coords)"
               for name, err in self.per_param.items()]
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"{verdict} max rel err {self.max_rel_error:.3e} (tol {self.rel_tol:g}, "
                   f"{self.coords_checked} coords, {self.coords_frozen} across relu kinks)")
        return out


def _name(p: Tensor, i: int) -> str:
    return getattr(p, "name", "") or f"param{i}"


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
                      rel_tol: float = 1e-4, max_coords: int | None = 20,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``f`` must rebuild its graph from ``params`` on every call. At most
    ``max_coords`` coordinates per parameter are sampled (all when None).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("finite-difference checks need 64-bit parameters")
        p.zero_grad()
    with record_relu_masks() as base_masks:
        loss = f()
    with no_grad():
        again = f()
    if loss.data.tobytes() != again.data.tobytes():
        raise NonDeterministicError(f"f is not deterministic: {loss.item()!r} vs {again.item()!r}")
    backward(loss)

    def probe(flat, j, value, freeze):
        flat[j] = value
        if freeze:
            with frozen_relu_masks(base_masks):
                return f().item(), True
        with record_relu_masks() as masks:
            out = f().item()
        same = len(masks) == len(base_masks) and all(np.array_equal(a, b) for a, b in zip(masks, base_masks))
        return out, same

    report = GradCheckReport(max_rel_error=0.0, rel_tol=rel_tol)
    for i, p in enumerate(params):
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        worst = 0.0
        for j in idx:
            orig = flat[j]
            with no_grad():
                up, smooth_up = probe(flat, j, orig + h, False)
                down, smooth_down = probe(flat, j, orig - h, False)
                if not (smooth_up and smooth_down):
                    # the stencil crossed a kink: stay on the base point's linear piece
                    report.coords_frozen += 1
                    up, _ = probe(flat, j, orig + h, True)
                    down, _ = probe(flat, j, orig - h, True)
            flat[j] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, float(relative_error(analytic[j], numeric)))
        report.per_param[_name(p, i)] = worst
        report.coords_per_param[_name(p, i)] = len(idx)
        report.coords_checked += len(idx)
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
