"""Finite-difference gradient oracle.

Compares the tape's analytic gradients against central differences
``(f(p + h) - f(p - h)) / 2h`` element by element. With ``order=4`` the
central differences at steps h and 2h are combined by Richardson
extrapolation, which cancels the O(h²) truncation term.
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from src.lib.errors import ContractError
from src.lib.rng import stream
from src.lib.tensor import Parameter, Tape, Tensor, no_grad

logger = logging.getLogger(__name__)

ScalarFn = Callable[[Sequence[Parameter]], Tensor]


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error of analytic vs numeric gradients."""

    h: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst(self) -> str | None:
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.__getitem__)

    def passed(self, tolerance: float) -> bool:
        return self.max_error <= tolerance


@dataclass
class NumericReference:
    """Function and parameters that the finite differences evaluate instead of the checked ones.

    Parameters are matched to the checked ones by name; a float64 copy of a float32 model
    gives numeric gradients that are not limited by float32 rounding.
    """

    f: ScalarFn
    params: Sequence[Parameter]


def _evaluate(f: ScalarFn, params: Sequence[Parameter]) -> float:
    with no_grad():
        out = f(params)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def relative_error(analytic: float, numeric: float, floor: float = 1e-8, atol: float = 0.0) -> float:
    """|a - n| / max(|a|, |n|, floor); differences within ``atol`` count as exact agreement."""
    diff = abs(analytic - numeric)
    if diff <= atol:
        return 0.0
    return diff / max(abs(analytic), abs(numeric), floor)


def _central(f: ScalarFn, params: Sequence[Parameter], p: Parameter, original: np.ndarray, i: int, h: float) -> float:
    plus = original.copy()
    plus.flat[i] += h
    minus = original.copy()
    minus.flat[i] -= h
    # float32 rounding changes the effective step; divide by the step actually taken
    step = float(plus.flat[i]) - float(minus.flat[i])
    p.assign(plus)
    f_plus = _evaluate(f, params)
    p.assign(minus)
    f_minus = _evaluate(f, params)
    return (f_plus - f_minus) / step


def numeric_derivative(
    f: ScalarFn, params: Sequence[Parameter], p: Parameter, i: int, h: float, order: int = 2
) -> float:
    """Derivative of ``f`` along entry ``i`` of ``p``; ``p`` holds its original value afterwards."""
    original = p.value.data.copy()
    try:
        d_h = _central(f, params, p, original, i, h)
        if order == 2:
            return d_h
        d_2h = _central(f, params, p, original, i, 2 * h)
        return (4.0 * d_h - d_2h) / 3.0
    finally:
        p.assign(original)


def grad_check(
    f: ScalarFn,
    params: Sequence[Parameter],
    h: float = 1e-3,
    *,
    floor: float = 1e-8,
    atol: float = 0.0,
    order: int = 2,
    max_elements: int | None = None,
    seed: int = 0,
    reference: NumericReference | None = None,
) -> GradCheckReport:
    """
    Check backward() gradients of ``f`` against central differences.

    Args:
        f: Deterministic function of the parameters returning a scalar Tensor
        params: Parameters to check; frozen ones are skipped and left out of the report
        h: Finite-difference step
        floor: Lower bound of the relative-error denominator
        atol: Absolute differences at or below this are reported as zero error
        order: 2 for plain central differences, 4 for the Richardson-extrapolated form
        max_elements: Check at most this many randomly chosen entries per parameter
        seed: Seed of the entry-sampling stream
        reference: Evaluate the finite differences on this function and parameters instead

    Returns:
        GradCheckReport with the worst relative error per trainable parameter

    Raises:
        ContractError: If h <= 0, the order is unsupported, f is not scalar or not deterministic,
            or the reference lacks a checked parameter
    """
    if h <= 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")
    if order not in (2, 4):
        raise ContractError(f"finite-difference order must be 2 or 4, got {order}")
    trainable = [p for p in params if p.trainable]
    for p in trainable:
        p.zero_grad()

    with Tape() as tape:
        loss = f(params)
    if loss.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {loss.shape}")
    if loss.requires_grad:
        tape.backward(loss)
    analytic = {
        p.name: (p.grad.data.astype(np.float64) if p.grad is not None else np.zeros(p.shape)) for p in trainable
    }

    num_f, num_params = (f, params) if reference is None else (reference.f, reference.params)
    by_name = {p.name: p for p in num_params}
    missing = [p.name for p in trainable if p.name not in by_name or by_name[p.name].shape != p.shape]
    if missing:
        raise ContractError(f"numeric reference lacks matching parameters: {missing}")

    baseline = _evaluate(num_f, num_params)
    if _evaluate(num_f, num_params) != baseline:
        raise ContractError("function under grad_check is not deterministic (two baseline evaluations differ)")

    picker = stream(seed, "gradcheck")
    report = GradCheckReport(h=h)
    for p in trainable:
        target = by_name[p.name]
        if max_elements is None or max_elements >= p.size:
            indices = np.arange(p.size)
        else:
            indices = np.sort(picker.choice(p.size, size=max_elements, replace=False))
        worst = 0.0
        for i in indices:
            numeric = numeric_derivative(num_f, num_params, target, int(i), h, order)
            worst = max(worst, relative_error(float(analytic[p.name].flat[i]), numeric, floor, atol))
        report.errors[p.name] = worst
        report.checked[p.name] = len(indices)
        logger.debug(f"grad_check {p.name}: {len(indices)} entries, max relative error {worst:.3e}")
    return report
