"""Laplacian-kernel center and bandwidth estimation from residual samples.

The kernel ``(1/(2 sigma)) exp(-|delta - c| / sigma)`` is fitted to a residual
sample by minimizing the integrated squared error between the single-kernel
density and the empirical one.  The two parameters are estimated separately:

* bandwidth: substituting ``r = 1/sigma`` turns the problem into minimizing
  ``h(r) = r/4 - (r/N) sum_i exp(-a_i r)`` with ``a_i = |delta_i - c|``.
  ``h`` is approximated around an expansion point ``r0`` by a strictly convex
  quartic whose unique stationary point has a closed form (a cubic root);
  re-expanding at the minimizer and repeating yields a fixed point of the
  exact objective.
* center: the l1 solution (sample median) seeds a bisection search of the
  exact kernel objective ``J(c) = -sum_i exp(-|delta_i - c| / sigma)`` over
  the interval between the median and the sample with the smallest objective.

All operations are pure functions of their arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceFailureError, DegenerateSampleError, InvalidInputError

# sigma is clamped from below to keep downstream 1/sigma weights finite.
SIGMA_FLOOR = 1e-12

# Relative spread under which the distances |delta_i - c| are treated as all
# equal; such a sample fixes no bandwidth scale.
_EQUAL_SPREAD_TOL = 1e-12

_FIXED_POINT_TOL = 1e-8
_FIXED_POINT_CAP = 200
_BISECT_TOL = 1e-8
_BISECT_CAP = 200


@dataclass(frozen=True)
class KernelParams:
    """Laplacian kernel location ``c`` and bandwidth ``sigma`` (> 0)."""

    c: float
    sigma: float
    clamped: bool = False  # True when sigma hit SIGMA_FLOOR

    def __post_init__(self):
        if not (self.sigma > 0.0):
            raise InvalidInputError(f"sigma must be positive, got {self.sigma}")

    @property
    def r(self) -> float:
        """Reciprocal bandwidth ``r = 1/sigma``."""
        return 1.0 / self.sigma


@dataclass(frozen=True)
class BandwidthExpansion:
    """Exponential sample moments of the quartic model built at ``r0``.

    ``b_k = (1/N) sum_i a_i^(k-1) exp(-a_i r0)`` for ``k = 1..4``.
    """

    r0: float
    a_hat: np.ndarray = field(repr=False)
    b1: float
    b2: float
    b3: float
    b4: float


@dataclass(frozen=True)
class CardanoSolve:
    """Closed-form minimization record of the quartic bandwidth model.

    ``d1..d4`` are the cubic coefficients of the model derivative in
    ``t = r - r0``; ``p``/``q_card`` the depressed-cubic coefficients;
    ``delta`` its discriminant (positive: exactly one real root);
    ``t_root``/``r_root`` the stationary point in ``t`` and ``r``.
    """

    d1: float
    d2: float
    d3: float
    d4: float
    p: float
    q_card: float
    delta: float
    e1: float
    e2: float
    e3: float
    k1: float
    k2: float
    t_root: float
    r_root: float


def objective_g(residuals: np.ndarray, kp: KernelParams) -> float:
    """Correntropy-type objective ``-(1/sigma) sum_i exp(-|delta_i - c|/sigma)``."""
    return mcc_loss(residuals, kp) / kp.sigma


def mcc_loss(residuals: np.ndarray, kp: KernelParams) -> float:
    """Unscaled kernel loss ``-sum_i exp(-|delta_i - c|/sigma)``."""
    d = np.asarray(residuals, dtype=float)
    return float(-np.sum(np.exp(-np.abs(d - kp.c) / kp.sigma)))


def ise_objective(residuals: np.ndarray, kp: KernelParams) -> float:
    """Integrated-squared-error criterion of the single-kernel density fit.

    ``1/(4 sigma) - (1/(N sigma)) sum_i exp(-|delta_i - c|/sigma)``.
    """
    d = np.asarray(residuals, dtype=float)
    if d.size == 0:
        raise InvalidInputError("empty residual sample")
    s = kp.sigma
    return float(1.0 / (4.0 * s) + mcc_loss(d, kp) / (d.size * s))


def bandwidth_objective(a_hat: np.ndarray, r) -> np.ndarray | float:
    """Exact reciprocal-bandwidth objective ``h(r) = r/4 - (r/N) sum exp(-a_i r)``."""
    a = np.asarray(a_hat, dtype=float)
    r_arr = np.asarray(r, dtype=float)
    mean_exp = np.mean(np.exp(-np.outer(r_arr.ravel(), a)), axis=1).reshape(r_arr.shape)
    out = r_arr / 4.0 - r_arr * mean_exp
    return float(out) if np.isscalar(r) or r_arr.ndim == 0 else out


def bandwidth_objective_derivative(a_hat: np.ndarray, r: float) -> float:
    """``h'(r) = 1/4 - (1/N) sum (1 - a_i r) exp(-a_i r)``."""
    a = np.asarray(a_hat, dtype=float)
    e = np.exp(-a * r)
    return float(0.25 - np.mean(e) + r * np.mean(a * e))


def bandwidth_expansion(a_hat: np.ndarray, r0: float) -> BandwidthExpansion:
    """Sample-weighted exponential moments ``b1..b4`` at expansion point ``r0``."""
    a = np.asarray(a_hat, dtype=float)
    if a.size == 0:
        raise InvalidInputError("empty distance sample")
    if np.any(a < 0.0) or not np.all(np.isfinite(a)):
        raise InvalidInputError("distances must be finite and nonnegative")
    if r0 < 0.0:
        raise InvalidInputError(f"expansion point must be nonnegative, got {r0}")
    e = np.exp(-a * r0)
    return BandwidthExpansion(
        r0=float(r0),
        a_hat=a,
        b1=float(np.mean(e)),
        b2=float(np.mean(a * e)),
        b3=float(np.mean(a * a * e)),
        b4=float(np.mean(a * a * a * e)),
    )


def quartic_f(exp: BandwidthExpansion, r) -> np.ndarray | float:
    """Quartic model of ``h`` around ``exp.r0``.

    ``f(r) = (b4/6) t^4 - (b3/2) t^3 + b2 t^2 + (b2 r0 - b1 + 1/4) t
    + (r0/4 - b1 r0)`` with ``t = r - r0``.
    """
    t = np.asarray(r, dtype=float) - exp.r0
    out = (
        exp.b4 / 6.0 * t**4
        - exp.b3 / 2.0 * t**3
        + exp.b2 * t**2
        + (exp.b2 * exp.r0 - exp.b1 + 0.25) * t
        + (0.25 * exp.r0 - exp.b1 * exp.r0)
    )
    return float(out) if np.isscalar(r) else out


def _all_equal(a: np.ndarray) -> bool:
    return float(np.ptp(a)) <= _EQUAL_SPREAD_TOL * max(1.0, float(np.max(np.abs(a), initial=0.0)))


def minimize_quartic(exp: BandwidthExpansion) -> CardanoSolve:
    """Closed-form unique stationary point of the quartic bandwidth model.

    Solves the cubic ``f'(t) = d1 t^3 + d2 t^2 + d3 t + d4 = 0`` by the
    factored closed form (real, sign-preserving cube roots), then applies a
    guarded Newton cleanup: the closed form can leave an O(1e-8) residual
    when the moments span many decades.
    """
    if _all_equal(exp.a_hat):
        raise DegenerateSampleError("all kernel distances equal: bandwidth scale undetermined")
    if not exp.b4 > 0.0:
        raise InvalidInputError(
            "exponential moments underflowed: expansion point far beyond the sample scale")

    d1 = 2.0 * exp.b4 / 3.0
    d2 = -1.5 * exp.b3
    d3 = 2.0 * exp.b2
    d4 = exp.b2 * exp.r0 - exp.b1 + 0.25

    # The closed form is applied to the monic cubic rebalanced by gamma so
    # the moments' dynamic range (which can span hundreds of decades when
    # the distances do) never under- or overflows the intermediates.
    c2 = d2 / d1
    c1 = d3 / d1
    c0 = d4 / d1
    gamma = max(1.0, abs(c2), abs(c1) ** 0.5, abs(c0) ** (1.0 / 3.0))
    b_ = c2 / gamma
    c_ = c1 / gamma**2
    d_ = c0 / gamma**3
    e1n = b_ * b_ - 3.0 * c_
    e2n = b_ * c_ - 9.0 * d_
    e3n = c_ * c_ - 3.0 * b_ * d_
    sq = np.sqrt(max(e2n * e2n - 4.0 * e1n * e3n, 0.0))
    k1n = e1n * b_ + 3.0 * (-e2n + sq) / 2.0
    k2n = e1n * b_ + 3.0 * (-e2n - sq) / 2.0
    t = gamma * (-b_ - (np.cbrt(k1n) + np.cbrt(k2n))) / 3.0

    # Depressed-cubic view, kept for the discriminant invariant delta > 0.
    # Record fields may overflow to inf for extreme moment ratios; the root
    # itself comes from the rebalanced formula above.
    with np.errstate(over="ignore", invalid="ignore"):
        c1_, c2_, c0_ = np.float64(c1), np.float64(c2), np.float64(c0)
        p = float(c1_ - c2_ * c2_ / 3.0)
        q_card = float((27.0 * c0_ - 9.0 * c2_ * c1_ + 2.0 * c2_**3) / 27.0)
        delta = float(np.float64(q_card / 2.0) ** 2 + np.float64(p / 3.0) ** 3)

    # Newton cleanup of the root on the monic cubic (strictly increasing).
    def fp(t_):
        return ((t_ + c2) * t_ + c1) * t_ + c0

    scale = max(1.0, abs(c0))
    for _ in range(8):
        r_cur = fp(t)
        if abs(r_cur) <= 1e-14 * scale:
            break
        curv = (3.0 * t + 2.0 * c2) * t + c1
        if curv <= 0.0 or not np.isfinite(curv):
            break
        step = r_cur / curv
        if not np.isfinite(step) or abs(fp(t - step)) >= abs(r_cur):
            break
        t -= step

    with np.errstate(over="ignore", invalid="ignore"):
        d1_, d2_, d3_, d4_ = (np.float64(v) for v in (d1, d2, d3, d4))
        e1 = float(d2_ * d2_ - 3.0 * d1_ * d3_)
        e2 = float(d2_ * d3_ - 9.0 * d1_ * d4_)
        e3 = float(d3_ * d3_ - 3.0 * d2_ * d4_)
    return CardanoSolve(
        d1=d1, d2=d2, d3=d3, d4=d4,
        p=p, q_card=q_card, delta=delta,
        e1=e1, e2=e2, e3=e3,
        k1=float(k1n), k2=float(k2n),
        t_root=float(t), r_root=float(t + exp.r0),
    )


def estimate_bandwidth(residuals: np.ndarray, c_hat: float, r_init: float = 0.0) -> KernelParams:
    """Fixed-point bandwidth estimate: re-expand the quartic at each minimizer.

    Starting from ``r0 = r_init``, minimize the quartic model, move ``r0`` to
    the minimizer, and repeat until the iterates agree to relative 1e-8.
    Returns ``sigma = 1/r`` (clamped at :data:`SIGMA_FLOOR`).

    Raises :class:`DegenerateSampleError` when all ``|delta_i - c_hat|``
    coincide and :class:`ConvergenceFailureError` (carrying the last iterate)
    past 200 sweeps.
    """
    d = np.asarray(residuals, dtype=float)
    if d.size == 0:
        raise InvalidInputError("empty residual sample")
    if r_init < 0.0:
        raise InvalidInputError(f"r_init must be nonnegative, got {r_init}")
    a_hat = np.abs(d - float(c_hat))
    if _all_equal(a_hat):
        raise DegenerateSampleError("residuals are all equidistant from the center")

    # The iteration is exactly scale-equivariant; running it on distances
    # normalized to unit maximum keeps every exponential moment in a safe
    # floating-point range regardless of the residual scale.
    scale = float(np.max(a_hat))
    a_hat = a_hat / scale
    r0 = float(r_init) * scale
    for _ in range(_FIXED_POINT_CAP):
        exp_ = bandwidth_expansion(a_hat, r0)
        if not exp_.b4 > 0.0:
            # Every exponential underflowed: the expansion point overshot the
            # sample scale by hundreds of decades; retreat.
            r_new = 0.5 * r0
        else:
            r_new = minimize_quartic(exp_).r_root
            if r_new <= 0.0:
                # The model overshot below the domain; retreat toward the origin.
                r_new = 0.5 * r0
        if abs(r_new - r0) < _FIXED_POINT_TOL * max(1.0, r0):
            r0 = r_new
            break
        r0 = r_new
    else:
        raise ConvergenceFailureError(
            f"bandwidth fixed point did not settle in {_FIXED_POINT_CAP} sweeps",
            last_iterate=r0,
        )

    sigma = scale / r0
    clamped = sigma < SIGMA_FLOOR
    return KernelParams(c=float(c_hat), sigma=max(sigma, SIGMA_FLOOR), clamped=clamped)


def estimate_center_lp(residuals: np.ndarray) -> float:
    """l1-optimal kernel center: the sample median (lower median for even N)."""
    d = np.asarray(residuals, dtype=float)
    if d.size == 0:
        raise InvalidInputError("empty residual sample")
    return float(np.sort(d)[(d.size - 1) // 2])


class _KernelObjective:
    """Stable evaluation of ``J(c) = -sum_i exp(-|d_i - c|/sigma)`` and ``J'``.

    Uses log-space prefix sums over the sorted sample so huge ``|d|/sigma``
    ratios never overflow: within any inter-sample gap,
    ``J(c) = -(exp(L_k - c/s) + exp(R_{k+1} + c/s))`` with both exponents
    bounded by ``log N``.
    """

    def __init__(self, deltas: np.ndarray, sigma: float):
        self.d = np.sort(np.asarray(deltas, dtype=float))
        self.s = float(sigma)
        with np.errstate(over="ignore"):
            self._L = np.logaddexp.accumulate(self.d / self.s)
            self._R = np.logaddexp.accumulate((-self.d / self.s)[::-1])[::-1]

    def _parts(self, c: np.ndarray, k: np.ndarray):
        left = np.where(k > 0, np.exp(self._L[np.maximum(k - 1, 0)] - c / self.s), 0.0)
        right = np.where(k < self.d.size, np.exp(self._R[np.minimum(k, self.d.size - 1)] + c / self.s), 0.0)
        return left, right

    def value(self, c) -> np.ndarray:
        c = np.atleast_1d(np.asarray(c, dtype=float))
        k = np.searchsorted(self.d, c, side="right")
        left, right = self._parts(c, k)
        return -(left + right)

    def derivative(self, c, side: str = "mid") -> np.ndarray:
        """``J'`` at ``c``; ``side`` picks the one-sided limit at sample points."""
        c = np.atleast_1d(np.asarray(c, dtype=float))
        k = np.searchsorted(self.d, c, side="right" if side == "plus" else "left")
        left, right = self._parts(c, k)
        return (left - right) / self.s


def estimate_center(residuals: np.ndarray, sigma: float) -> float:
    """Kernel center minimizing the exact objective ``J(c)``.

    The search interval spans the median and the sample with the smallest
    objective value; within each inter-sample gap of that interval ``J`` is
    smooth, and a bisection on the sign of ``J'`` refines any interior
    stationary point.  The best candidate (gap endpoints, interval samples,
    bisection points) is returned, so the result never loses to the median.
    """
    d = np.asarray(residuals, dtype=float)
    if d.size == 0:
        raise InvalidInputError("empty residual sample")
    if not sigma > 0.0:
        raise InvalidInputError(f"sigma must be positive, got {sigma}")
    d_sorted = np.sort(d)
    if d_sorted[0] == d_sorted[-1]:
        return float(d_sorted[0])

    obj = _KernelObjective(d_sorted, sigma)
    median = float(d_sorted[(d.size - 1) // 2])
    uniq = np.unique(d_sorted)
    j_uniq = obj.value(uniq)
    best_sample = float(uniq[np.argmin(j_uniq)])

    lo, hi = min(median, best_sample), max(median, best_sample)
    inside = uniq[(uniq >= lo) & (uniq <= hi)]
    candidates = [inside]

    # Bisection on J' inside each gap that brackets a sign change.
    if inside.size >= 2:
        a = inside[:-1].copy()
        b = inside[1:].copy()
        da = obj.derivative(a, side="plus")
        db = obj.derivative(b, side="mid")  # left limit at the right kink
        mask = (da > 0.0) != (db > 0.0)
        a, b, da = a[mask], b[mask], da[mask]
        if a.size:
            tol = _BISECT_TOL * max(1.0, float(np.max(np.abs(d_sorted))))
            for _ in range(_BISECT_CAP):
                mid = 0.5 * (a + b)
                dm = obj.derivative(mid)
                up = (dm > 0.0) == (da > 0.0)
                a = np.where(up, mid, a)
                b = np.where(up, b, mid)
                if float(np.max(b - a)) < tol:
                    break
            candidates.append(0.5 * (a + b))

    cand = np.concatenate(candidates)
    values = obj.value(cand)
    order = np.lexsort((cand, values))  # best objective, ties to the smaller c
    return float(cand[order[0]])
