"""Finite-difference verification of analytic gradients.

``check_gradients`` evaluates a scalar-valued callable, backpropagates once,
then perturbs every parameter coordinate by +/-h and compares the central
difference against the recorded gradient at relative tolerance
|analytic - numeric| / max(1, |analytic|).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import NonFiniteError
from .nn import Module, Parameter


@dataclass
class GradCheckFailure:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    checked: int = 0
    failures: list[GradCheckFailure] = field(default_factory=list)
    max_rel_error: float = 0.0
    elapsed_seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        state = "PASS" if self.passed else f"FAIL ({len(self.failures)} coords)"
        return (
            f"gradcheck {state}: {self.checked} coordinates, "
            f"max rel err {self.max_rel_error:.3e}, {self.elapsed_seconds:.1f}s"
        )


def _resolve_params(params) -> list[tuple[str, Parameter]]:
    if isinstance(params, Module):
        return params.named_parameters()
    out = []
    for i, p in enumerate(params):
        if isinstance(p, tuple):
            out.append(p)
        else:
            out.append((p.name or f"param{i}", p))
    return out


def jitter_parameters(params, rng, scale: float = 0.01) -> None:
    """Add small seeded noise to every parameter.

    Zero-initialized output transforms make several gradient paths exactly
    zero at a fresh initialization; jittering first makes a finite-difference
    sweep exercise them.
    """
    for _, p in _resolve_params(params):
        p.data += rng.fill_normal(p.data.shape, 0.0, scale)


def check_gradients(
    f: Callable[[], ad.Tensor],
    params: Module | Sequence,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords_per_param: int | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must close over the parameters and return a scalar Tensor.
    ``max_coords_per_param`` caps the checked coordinates per parameter
    (evenly strided) for quick smoke runs; None checks every coordinate.
    """
    named = _resolve_params(params)
    start = time.perf_counter()

    for _, p in named:
        p.grad[...] = 0.0
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("gradcheck objective is not finite")
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in named}

    report = GradCheckReport()
    for name, p in named:
        flat = p.data.reshape(-1)
        count = flat.size
        if max_coords_per_param is not None and count > max_coords_per_param:
            picks = np.linspace(0, count - 1, max_coords_per_param).astype(int)
        else:
            picks = range(count)
        for k in picks:
            original = flat[k]
            with ad.no_grad(), ad.finite_checks(False):
                flat[k] = original + h
                f_plus = f().item()
                flat[k] = original - h
                f_minus = f().item()
            flat[k] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"gradcheck objective not finite near {name}[{k}]")
            numeric = (f_plus - f_minus) / (2.0 * h)
            exact = analytic[name].reshape(-1)[k]
            rel = abs(exact - numeric) / max(1.0, abs(exact))
            report.checked += 1
            report.max_rel_error = max(report.max_rel_error, rel)
            if rel > tol:
                idx = np.unravel_index(k, p.data.shape)
                report.failures.append(
                    GradCheckFailure(name, tuple(int(i) for i in idx), float(exact), float(numeric), float(rel))
                )
    report.elapsed_seconds = time.perf_counter() - start
    return report
