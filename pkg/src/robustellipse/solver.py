"""Dense log-barrier solver for weighted-L1 fitting with an ellipse cone.

Problem family::

    minimize    sum_i w_i * zeta_i
    subject to  |rows_i . x (+ p_i) - offsets_i| <= zeta_i,   i = 1..N
                lo <= p_i <= hi                  (optional per-row auxiliary)
                ||(x[j2], eps, x[j1] - x[j3])|| <= x[j1] + x[j3]

with nonnegative costs ``w_i`` and cone slots ``(j1, j2, j3)`` given by
``soc_index_map``.  The cone constraint squares to
``x[j2]^2 + eps^2 <= 4 x[j1] x[j3]``, so any feasible ``x`` satisfies the
strict ellipse condition on those three coefficients.

The solver follows the central path of the log barrier

    t * sum w_i zeta_i - sum log(zeta_i - rho_i) - sum log(zeta_i + rho_i)
      - [sum log(p_i - lo) + log(hi - p_i)] - log(4 x1 x3 - x2^2 - eps^2)

with damped Newton steps.  The slack and auxiliary blocks are eliminated
row by row, so each step factors only an (m x m) system (m = len(x)).
Everything is deterministic: no pivot randomization, no shuffling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear

from .errors import ConvergenceFailureError, InfeasibleProblemError, InvalidInputError

_MU = 10.0            # barrier multiplier per outer stage
_ARMIJO = 0.01
_BACKTRACK = 0.5
_MAX_OUTER = 200
_MAX_NEWTON = 60      # per centering stage
_NEWTON_TOL = 1e-16   # on half squared Newton decrement; stall-break guards the floor
_GAP_REL = 1e-8       # duality-gap target relative to max(1, |objective|)
# Exactly interpolatable data leaves the conic scale free upward (the cone
# barrier alone then pushes it to infinity); a generous bound on the cone
# trace x[j1] + x[j3] pins that ray.  Its barrier pressure enters the
# reported KKT residuals only as O(1/t).  Data-pinned optima sit at trace
# ~ eps * (a/b + b/a) / 2, so 100x the start leaves two orders of headroom
# while keeping the pinned scale small enough that float noise in the
# residuals stays far below the central-path slacks.
_TRACE_CAP = 100.0


@dataclass(frozen=True)
class WeightedL1Problem:
    """One instance of the weighted-L1 cone program.

    ``box`` switches on one auxiliary variable per row, bounded to the given
    interval and added to that row's residual (used by the data-association
    relaxation, where the auxiliary is the membership probability).
    """

    rows: np.ndarray                     # (N, m)
    offsets: np.ndarray                  # (N,)
    weights: np.ndarray                  # (N,) nonnegative costs
    epsilon: float = 1.0
    box: tuple[float, float] | None = None
    soc_index_map: tuple[int, int, int] = (0, 1, 2)

    def validated(self) -> "WeightedL1Problem":
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2 or rows.shape[0] < 6:
            raise InvalidInputError("need at least 6 design rows")
        off = np.array(np.broadcast_to(np.asarray(self.offsets, dtype=float), rows.shape[0]))
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (rows.shape[0],) or np.any(w < 0.0) or not np.all(np.isfinite(w)):
            raise InvalidInputError("weights must be finite and nonnegative, one per row")
        if not np.all(np.isfinite(rows)) or not np.all(np.isfinite(off)):
            raise InvalidInputError("rows and offsets must be finite")
        if not self.epsilon > 0.0:
            raise InvalidInputError(f"epsilon must be positive, got {self.epsilon}")
        j = self.soc_index_map
        if len(set(j)) != 3 or max(j) >= rows.shape[1] or min(j) < 0:
            raise InvalidInputError(f"bad soc_index_map {j} for {rows.shape[1]} variables")
        if self.box is not None and not self.box[0] < self.box[1]:
            raise InvalidInputError(f"empty box {self.box}")
        if self.box is not None and np.any(w <= 0.0):
            # A zero cost with an auxiliary leaves that slack unbounded below
            # in the barrier subproblem.
            raise InvalidInputError("auxiliary-variable problems need strictly positive weights")
        return WeightedL1Problem(rows, off, w, float(self.epsilon), self.box, tuple(j))


@dataclass
class ConicSolution:
    """Primal/dual solution returned by :func:`solve`."""

    v: np.ndarray                      # (m,) coefficient vector
    zeta: np.ndarray                   # (N,) slack values
    objective: float
    aux: np.ndarray | None = None      # (N,) auxiliary box variables
    lam_up: np.ndarray | None = None   # duals of rho_i <= zeta_i
    lam_dn: np.ndarray | None = None   # duals of -zeta_i <= rho_i
    soc_dual: np.ndarray | None = None  # (4,) cone dual (u, w1, w_eps, w3)
    box_lo_dual: np.ndarray | None = None
    box_hi_dual: np.ndarray | None = None
    kkt_residuals: dict = field(default_factory=dict)
    iterations: int = 0


def soc_margin(x: np.ndarray, epsilon: float, idx=(0, 1, 2)) -> float:
    """Cone slack ``4 x1 x3 - x2^2 - eps^2`` (positive strictly inside)."""
    x1, x2, x3 = (float(x[idx[0]]), float(x[idx[1]]), float(x[idx[2]]))
    return 4.0 * x1 * x3 - x2 * x2 - epsilon * epsilon


def default_start(problem: WeightedL1Problem) -> np.ndarray:
    """Strictly cone-interior start: a wide circle at the data scale.

    ``x = [k, 0, k, 0, 0, -k * mean radius^2]`` on the conic slots with
    ``k = 1`` for eps <= 1.8 and ``k = eps`` otherwise, which keeps
    ``4 k^2 - eps^2 > 0`` for every eps.
    """
    rows = np.asarray(problem.rows, dtype=float)
    j1, j2, j3 = problem.soc_index_map
    k = 1.0 if problem.epsilon <= 1.8 else float(problem.epsilon)
    x = np.zeros(rows.shape[1])
    x[j1] = k
    x[j3] = k
    if rows.shape[1] >= 6:
        mean_r2 = float(np.mean(rows[:, j1] + rows[:, j3]))
        x[5] = -k * mean_r2
    return x


class _Barrier:
    """Scaled barrier problem state; all row arrays refer to active rows."""

    def __init__(self, problem: WeightedL1Problem, trace_cap: float):
        self.eps = problem.epsilon
        self.idx = problem.soc_index_map
        self.box = problem.box
        self.m = problem.rows.shape[1]
        self.trace_cap = trace_cap

        # Row equilibration: unit sup-norm rows keep the reduced Hessian
        # well-conditioned; costs pick up the same factor so the objective
        # value is unchanged.  The auxiliary keeps its original meaning, so
        # its coefficient in the scaled residual is 1/scale.
        self.scale = np.maximum(np.max(np.abs(problem.rows), axis=1), 1e-300)
        self.A = problem.rows / self.scale[:, None]
        self.off = problem.offsets / self.scale
        self.w = problem.weights * self.scale
        self.c_aux = 1.0 / self.scale if self.box is not None else None
        self.nu = 2.0 * self.A.shape[0] + 3.0 + (2.0 * self.A.shape[0] if self.box else 0.0)

    def rho(self, x, p):
        r = self.A @ x - self.off
        return r + self.c_aux * p if p is not None else r

    def in_domain(self, x, p, zeta) -> bool:
        j1, j2, j3 = self.idx
        if not (x[j1] > 0.0 and x[j3] > 0.0 and x[j1] + x[j3] < self.trace_cap):
            return False
        if soc_margin(x, self.eps, self.idx) <= 0.0:
            return False
        rho = self.rho(x, p)
        if np.any(zeta - rho <= 0.0) or np.any(zeta + rho <= 0.0):
            return False
        if p is not None:
            lo, hi = self.box
            if np.any(p <= lo) or np.any(p >= hi):
                return False
        return True

    def value(self, t, x, p, zeta) -> float:
        rho = self.rho(x, p)
        val = t * float(self.w @ zeta)
        val -= float(np.sum(np.log(zeta - rho)) + np.sum(np.log(zeta + rho)))
        if p is not None:
            lo, hi = self.box
            val -= float(np.sum(np.log(p - lo)) + np.sum(np.log(hi - p)))
        val -= np.log(soc_margin(x, self.eps, self.idx))
        val -= np.log(self.trace_cap - (x[self.idx[0]] + x[self.idx[2]]))
        return val

    def _soc_derivs(self, x):
        j1, j2, j3 = self.idx
        s = soc_margin(x, self.eps, self.idx)
        grad3 = np.array([4.0 * x[j3], -2.0 * x[j2], 4.0 * x[j1]])
        hess3 = np.array([[0.0, 0.0, 4.0], [0.0, -2.0, 0.0], [4.0, 0.0, 0.0]])
        g = np.zeros(self.m)
        g[[j1, j2, j3]] = -grad3 / s
        H = np.zeros((self.m, self.m))
        H[np.ix_([j1, j2, j3], [j1, j2, j3])] = np.outer(grad3, grad3) / (s * s) - hess3 / s
        gap = self.trace_cap - (x[j1] + x[j3])
        g[j1] += 1.0 / gap
        g[j3] += 1.0 / gap
        H[np.ix_([j1, j3], [j1, j3])] += 1.0 / (gap * gap)
        return g, H

    def newton_step(self, t, x, p, zeta):
        """Reduced Newton direction and half squared decrement."""
        rho = self.rho(x, p)
        a1 = 1.0 / (zeta - rho)
        a2 = 1.0 / (zeta + rho)
        g_rho = a1 - a2
        g_zeta = t * self.w - (a1 + a2)
        h_diag = a1 * a1 + a2 * a2          # = h_rho_rho = h_zeta_zeta
        h_cross = a2 * a2 - a1 * a1
        stable = 4.0 * (a1 * a1) * (a2 * a2)  # h_diag^2 - h_cross^2 without cancellation

        g_soc, H_soc = self._soc_derivs(x)
        g_x = self.A.T @ g_rho + g_soc

        if p is None:
            g_p = None
            coef = stable / h_diag
            shift = h_cross * g_zeta / h_diag
        else:
            lo, hi = self.box
            c = self.c_aux
            B = 1.0 / (p - lo) ** 2 + 1.0 / (hi - p) ** 2
            g_p = c * g_rho + (-1.0 / (p - lo) + 1.0 / (hi - p))
            det = c * c * stable + B * h_diag
            u1 = (h_diag * g_p - c * h_cross * g_zeta) / det
            u2 = ((c * c * h_diag + B) * g_zeta - c * h_cross * g_p) / det
            w1 = c * stable / det
            w2 = h_cross * B / det
            coef = stable * B / det
            shift = c * h_diag * u1 + h_cross * u2

        H_red = (self.A * coef[:, None]).T @ self.A + H_soc
        rhs = -g_x + self.A.T @ shift
        reg = 1e-12 * max(float(np.max(np.abs(np.diag(H_red)))), 1.0)
        for _ in range(6):
            try:
                dx = np.linalg.solve(H_red + reg * np.eye(self.m), rhs)
                break
            except np.linalg.LinAlgError:
                reg *= 1e3
        else:
            raise ConvergenceFailureError("singular reduced Newton system")

        adx = self.A @ dx
        if p is None:
            dp = None
            dz = -(g_zeta + h_cross * adx) / h_diag
            decrement = -(g_x @ dx + g_zeta @ dz)
        else:
            dp = -u1 - w1 * adx
            dz = -u2 - w2 * adx
            decrement = -(g_x @ dx + g_p @ dp + g_zeta @ dz)
        return dx, dp, dz, 0.5 * max(decrement, 0.0)

    def max_linear_step(self, x, p, zeta, dx, dp, dz) -> float:
        """Largest step keeping every *linear* barrier argument positive."""
        rho = self.rho(x, p)
        adx = self.A @ dx + (self.c_aux * dp if p is not None else 0.0)
        caps = [np.inf]
        for q, dq in ((zeta - rho, dz - adx), (zeta + rho, dz + adx)):
            neg = dq < 0.0
            if np.any(neg):
                caps.append(float(np.min(q[neg] / -dq[neg])))
        if p is not None:
            lo, hi = self.box
            for q, dq in ((p - lo, dp), (hi - p, -dp)):
                neg = dq < 0.0
                if np.any(neg):
                    caps.append(float(np.min(q[neg] / -dq[neg])))
        j1, j3 = self.idx[0], self.idx[2]
        for q, dq in ((x[j1], dx[j1]), (x[j3], dx[j3]),
                      (self.trace_cap - x[j1] - x[j3], -dx[j1] - dx[j3])):
            if dq < 0.0:
                caps.append(float(q / -dq))
        return min(caps)


def _bounded_ls(M, rhs, lb, ub, pin):
    """Bounded least squares with a tie-break pull toward ``pin``.

    The stationarity system is usually underdetermined; the tiny quadratic
    pull selects, among its solutions, the one closest to the pinned
    multiplier pattern (which carries the complementarity structure).  A
    support polish then removes the solver's iteration tolerance: variables
    strictly inside their bounds are re-solved exactly against the
    unaugmented system.
    """
    span = np.where(np.isfinite(ub - lb), ub - lb, np.maximum(np.abs(pin), 1.0))
    span = np.maximum(span, 1e-300)
    pull = 1e-6 / span  # residual contribution ~1e-6 per unit normalized deviation
    M_aug = np.concatenate([M, np.diag(pull)], axis=0)
    rhs_aug = np.concatenate([rhs, pull * pin])
    fit = lsq_linear(M_aug, rhs_aug, bounds=(lb, ub))
    z = np.clip(fit.x, lb, ub)
    for _ in range(2):
        inner = (z > lb + 1e-12 * span) & (z < ub - 1e-12 * span)
        if not np.any(inner):
            break
        resid = rhs - M[:, ~inner] @ z[~inner]
        z_in, *_ = np.linalg.lstsq(M[:, inner], resid, rcond=None)
        z_new = z.copy()
        z_new[inner] = z_in
        z_new = np.clip(z_new, lb, ub)
        if np.max(np.abs(M @ z_new - rhs)) <= np.max(np.abs(M @ z - rhs)):
            z = z_new
        else:
            break
    return z


def _tri_solve(R, b, lower=False):
    n = b.size
    x = np.zeros(n, dtype=R.dtype)
    order = range(n) if lower else range(n - 1, -1, -1)
    for k in order:
        done = x[:k] if lower else x[k + 1:]
        row = R[k, :k] if lower else R[k, k + 1:]
        x[k] = (b[k] - row @ done) / R[k, k]
    return x


def _qr_r_factor(B):
    """Upper-triangular R of a tall Householder QR (dtype-preserving)."""
    R = B.copy()
    k, m = R.shape
    for j in range(m):
        col = R[j:, j].copy()
        norm = np.sqrt(col @ col)
        if norm == 0.0:
            continue
        col[0] += np.copysign(norm, col[0])
        col /= np.sqrt(col @ col)
        R[j:, j:] -= 2.0 * np.outer(col, col @ R[j:, j:])
    return np.triu(R[:m])


def _sqrt_psd_small(S, jitter=1e-30):
    """Cholesky factor of a tiny PSD block, with escalating jitter."""
    for _ in range(8):
        try:
            L = np.zeros_like(S)
            for i in range(S.shape[0]):
                for j in range(i + 1):
                    acc = S[i, j] - L[i, :j] @ L[j, :j]
                    if i == j:
                        if acc <= 0.0:
                            raise np.linalg.LinAlgError
                        L[i, i] = np.sqrt(acc)
                    else:
                        L[i, j] = acc / L[j, j]
            return L
        except np.linalg.LinAlgError:
            S = S + jitter * max(1.0, float(np.max(np.abs(S)))) * np.eye(S.shape[0], dtype=S.dtype)
            jitter *= 1e4
    raise np.linalg.LinAlgError("PSD factorization failed")


def _elim_solve(H, b):
    n = b.size
    A = np.concatenate([H, b[:, None]], axis=1)
    for k in range(n):
        piv = k + int(np.argmax(np.abs(A[k:, k])))
        if A[piv, k] == 0.0:
            raise np.linalg.LinAlgError("singular refine system")
        if piv != k:
            A[[k, piv]] = A[[piv, k]]
        A[k + 1:, k:] -= np.outer(A[k + 1:, k] / A[k, k], A[k, k:])
    x = np.zeros(n, dtype=A.dtype)
    for k in range(n - 1, -1, -1):
        x[k] = (A[k, n] - A[k, k + 1:n] @ x[k + 1:]) / A[k, k]
    return x


def _lu_solve_ld(H, b):
    """Jacobi-scaled elimination with one refinement round (long double).

    The reduced Newton matrix mixes curvatures spanning ~20 decades; the
    symmetric diagonal scaling plus iterative refinement keeps the solve
    within long-double reach.
    """
    d = 1.0 / np.sqrt(np.maximum(np.diag(H), 1e-300))
    Hs = H * d[:, None] * d[None, :]
    bs = b * d
    x = _elim_solve(Hs, bs)
    x = x + _elim_solve(Hs, bs - Hs @ x)
    return x * d


def _refine_ld(bar: _Barrier, t, x, p, zeta, steps=40):
    """Extended-precision Newton centering at barrier parameter ``t``.

    Double-precision centering floors out at a decrement that grows with
    ``t``; long-double steps center reliably several decades further along
    the path, which the dual construction needs.  Newton with a
    fraction-to-boundary cap; an Armijo check guards the damped phase after
    a ``t`` jump.  Returns ``(x, p, zeta, centered)``; ``centered`` is False
    when the iteration could not bring the decrement down, in which case the
    caller must not trust this ``t``.
    """
    ld = np.longdouble
    A = bar.A.astype(ld)
    off = bar.off.astype(ld)
    w = bar.w.astype(ld)
    t = ld(t)
    x = x.astype(ld)
    zeta = zeta.astype(ld)
    p = None if p is None else p.astype(ld)
    j1, j2, j3 = bar.idx
    eps2 = ld(bar.eps) ** 2
    cap = ld(bar.trace_cap)
    if bar.box is not None:
        lo, hi = ld(bar.box[0]), ld(bar.box[1])
        c_aux = (1.0 / bar.scale).astype(ld)

    prev_dec = np.inf
    last_dec = np.inf
    best = (np.inf, x, p, zeta)
    for _ in range(steps):
        rho = A @ x - off + (c_aux * p if p is not None else 0.0)
        a1 = 1.0 / (zeta - rho)
        a2 = 1.0 / (zeta + rho)
        g_rho = a1 - a2
        g_zeta = t * w - (a1 + a2)
        h_diag = a1 * a1 + a2 * a2
        h_cross = a2 * a2 - a1 * a1
        stable = 4.0 * (a1 * a1) * (a2 * a2)

        s = 4.0 * x[j1] * x[j3] - x[j2] * x[j2] - eps2
        gap = cap - x[j1] - x[j3]
        if not (s > 0.0 and gap > 0.0):
            break  # incoming point at the cone boundary within this precision
        grad3 = np.array([4.0 * x[j3], -2.0 * x[j2], 4.0 * x[j1]], dtype=ld)
        hess3 = np.array([[0, 0, 4], [0, -2, 0], [4, 0, 0]], dtype=ld)
        g_x = A.T @ g_rho
        g_x[[j1, j2, j3]] -= grad3 / s
        g_x[j1] += 1.0 / gap
        g_x[j3] += 1.0 / gap
        H_soc = np.zeros((bar.m, bar.m), dtype=ld)
        H_soc[np.ix_([j1, j2, j3], [j1, j2, j3])] = np.outer(grad3, grad3) / (s * s) - hess3 / s
        H_soc[np.ix_([j1, j3], [j1, j3])] += 1.0 / (gap * gap)

        if p is None:
            coef = stable / h_diag
            shift = h_cross * g_zeta / h_diag
        else:
            B = 1.0 / (p - lo) ** 2 + 1.0 / (hi - p) ** 2
            g_p = c_aux * g_rho + (-1.0 / (p - lo) + 1.0 / (hi - p))
            det = c_aux * c_aux * stable + B * h_diag
            u1 = (h_diag * g_p - c_aux * h_cross * g_zeta) / det
            u2 = ((c_aux * c_aux * h_diag + B) * g_zeta - c_aux * h_cross * g_p) / det
            w1 = c_aux * stable / det
            w2 = h_cross * B / det
            coef = stable * B / det
            shift = c_aux * h_diag * u1 + h_cross * u2

        # Solve through the square-root factor: the normal matrix spans the
        # squared condition number and is beyond long double near the end of
        # the path, while QR of the factor stays solvable.
        rhs_n = -g_x + A.T @ shift
        jj = [j1, j2, j3]
        rows_soc = np.zeros((3, bar.m), dtype=ld)
        try:
            rows_soc[:, jj] = _sqrt_psd_small(H_soc[np.ix_(jj, jj)]).T
        except np.linalg.LinAlgError:
            break
        reg_rows = np.sqrt(ld(1e-24) * max(float(np.max(coef)), 1.0)) * np.eye(bar.m, dtype=ld)
        B = np.concatenate([A * np.sqrt(coef)[:, None], rows_soc, reg_rows], axis=0)
        R = _qr_r_factor(B)
        if np.any(np.diag(R) == 0.0):
            break
        dx = _tri_solve(R, _tri_solve(R.T, rhs_n, lower=True))
        resid = rhs_n - B.T @ (B @ dx)
        dx = dx + _tri_solve(R, _tri_solve(R.T, resid, lower=True))
        adx = A @ dx
        if p is None:
            dp = None
            dz = -(g_zeta + h_cross * adx) / h_diag
            half_dec = -0.5 * (g_x @ dx + g_zeta @ dz)
        else:
            dp = -u1 - w1 * adx
            dz = -u2 - w2 * adx
            half_dec = -0.5 * (g_x @ dx + g_p @ dp + g_zeta @ dz)
        if not (half_dec > 0.0):
            break
        last_dec = half_dec
        if half_dec < best[0]:
            best = (half_dec, x, p, zeta)
        if half_dec <= 1e-4 and half_dec >= prev_dec:
            break  # extended-precision noise floor
        prev_dec = half_dec
        alpha = min(1.0, 0.99 * float(bar.max_linear_step(x, p, zeta, dx, dp, dz)))
        armijo = half_dec > 0.08
        val = bar.value(t, x, p, zeta) if armijo else 0.0
        accepted = False
        for _ in range(60):
            x_n = x + alpha * dx
            p_n = p + alpha * dp if p is not None else None
            z_n = zeta + alpha * dz
            if bar.in_domain(x_n, p_n, z_n):
                if not armijo or (bar.value(t, x_n, p_n, z_n)
                                  <= val - _ARMIJO * alpha * 2.0 * float(half_dec)):
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            break
        x, p, zeta = x_n, p_n, z_n
        if half_dec <= 1e-24:
            break
    if last_dec > best[0]:
        _, x, p, zeta = best
        last_dec = best[0]
    return x, p, zeta, bool(last_dec <= 1e-4)


def _center(bar: _Barrier, t, x, p, zeta, newton_cap=_MAX_NEWTON, tol=_NEWTON_TOL):
    """Damped Newton to the central point of parameter ``t``.

    Inside the quadratic-convergence region of the self-concordant barrier
    (Newton decrement below ~0.4) the full step is taken on a domain check
    alone: at large ``t`` the barrier value is dominated by ``t * objective``
    and an Armijo comparison would drown in float rounding.
    """
    val = bar.value(t, x, p, zeta)
    steps = 0
    prev_dec = np.inf
    prev_full_newton = False
    for _ in range(newton_cap):
        dx, dp, dz, half_dec = bar.newton_step(t, x, p, zeta)
        if half_dec <= tol:
            break
        if prev_full_newton and half_dec > 0.25 * prev_dec:
            break  # quadratic phase hit the float noise floor: centered
        prev_dec = half_dec
        alpha = min(1.0, 0.99 * bar.max_linear_step(x, p, zeta, dx, dp, dz))
        pure_newton = half_dec <= 0.08
        slope = -2.0 * half_dec  # directional derivative of the barrier value
        accepted = False
        for _ in range(60):
            x_n = x + alpha * dx
            p_n = p + alpha * dp if p is not None else None
            z_n = zeta + alpha * dz
            if bar.in_domain(x_n, p_n, z_n):
                if pure_newton:
                    val_n = val
                    accepted = True
                    break
                val_n = bar.value(t, x_n, p_n, z_n)
                if val_n <= val + _ARMIJO * alpha * slope:
                    accepted = True
                    break
            alpha *= _BACKTRACK
        if not accepted:
            break  # step stalled at numerical precision
        prev_full_newton = pure_newton and alpha >= 0.9
        x, p, zeta, val = x_n, p_n, z_n, val_n
        steps += 1
    return x, p, zeta, steps


def _polished_duals(bar: _Barrier, prob: WeightedL1Problem, t, x, p, zeta):
    """Dual recovery at the final (extended-precision) interior point.

    Three constructions are scored on their full KKT residual against the
    current primal point, and the best one wins:

    * active-set duals with the cone dual on the boundary ray anti-aligned
      with the cone point (exact cone complementarity);
    * active-set duals with a free 3-slot cone dual (exact cone-slot
      stationarity; the epsilon slot, which only enters the dual objective,
      is clipped into the cone);
    * the central-path barrier duals themselves (exact complementarity up
      to 1/t, stationarity as good as the final centering).

    The active-set variants pin every row with a clearly nonzero residual
    at ``+-w_i`` (tight on one side) and solve a bounded least-squares
    problem for the near-interpolated rows, escalating the free set when
    the fit is poor.  Degenerate optimal faces defeat any fixed
    classification, which is what the scored selection is for.
    Returns ``(lam_up, lam_dn, y, mu_lo, mu_hi)`` with multipliers in the
    scaled row units and box duals in original units.
    """
    rho = bar.rho(x, p)
    w = bar.w
    j1, j2, j3 = bar.idx
    w_floor = np.maximum(w, 1e-300)

    interior = np.zeros(w.size, dtype=bool)
    at_lo = np.zeros(w.size, dtype=bool)
    if p is not None:
        lo, hi = bar.box
        # A strictly interior auxiliary forces a zero net multiplier on its
        # row (its bound duals vanish and absorb nothing); an auxiliary at a
        # bound restricts the multiplier sign through its bound dual.  The
        # bound-hugging distance at the end of the path is many orders below
        # the box width, so the split is scale-free in p units.
        interior = np.asarray(np.minimum(p - lo, hi - p) > 1e-4 * (hi - lo))
        at_lo = np.asarray((p - lo) <= (hi - p))

    # Anti-aligned boundary ray of the cone dual: y = kappa * ray.
    u = float(x[j1] + x[j3])
    wv = np.array([float(x[j2]), prob.epsilon, float(x[j1]) - float(x[j3])])
    ray = np.array([1.0, -wv[0] / u, -wv[1] / u, -wv[2] / u])
    ray_col = np.zeros(bar.m)
    ray_col[j1] = ray[0] + ray[3]
    ray_col[j2] = ray[1]
    ray_col[j3] = ray[0] - ray[3]
    # Free 3-slot cone dual (y0, y1, y3) scatter columns.
    S3 = np.zeros((bar.m, 3))
    S3[j1, 0] = S3[j3, 0] = 1.0
    S3[j2, 1] = 1.0
    S3[j1, 2] = 1.0
    S3[j3, 2] = -1.0

    rho_f = np.asarray(rho, dtype=float)
    zeta_f = np.asarray(zeta, dtype=float)
    obj = float(w @ zeta_f)
    obj_scale = max(1.0, abs(obj))
    G = np.array([u, wv[0], wv[1], wv[2]])
    p_f = None if p is None else np.asarray(p, dtype=float)

    def _score(cand):
        """Worst normalized KKT residual of a candidate dual (scaled data)."""
        lam_up, lam_dn, y, mu_lo, mu_hi = cand
        lam_diff = lam_up - lam_dn
        stat = bar.A.T @ lam_diff
        stat[j1] -= y[0] + y[3]
        stat[j2] -= y[1]
        stat[j3] -= y[0] - y[3]
        stat_scale = max(1.0, float(np.max(np.abs(bar.A).T @ (lam_up + lam_dn))))
        worst = float(np.max(np.abs(stat))) / stat_scale
        worst = max(worst, float(np.max(np.abs(w - lam_up - lam_dn))) / max(1.0, float(np.max(w))))
        comp = max(float(np.max(np.abs(lam_up * (zeta_f - rho_f)))),
                   float(np.max(np.abs(lam_dn * (zeta_f + rho_f)))),
                   abs(float(y @ G)))
        dual_obj = -float(lam_diff @ bar.off) - prob.epsilon * float(y[2])
        if p is not None:
            lo, hi = bar.box
            comp = max(comp, float(np.max(np.abs(mu_lo * (p_f - lo)))),
                       float(np.max(np.abs(mu_hi * (hi - p_f)))))
            dual_obj += float(mu_lo.sum() * lo - mu_hi.sum() * hi)
            pstat = np.abs(lam_diff * bar.c_aux - mu_lo + mu_hi)
            worst = max(worst, float(np.max(pstat)) / max(1.0, float(np.max(np.abs(lam_diff * bar.c_aux)))))
        cone_infeas = max(float(np.sqrt(y[1] ** 2 + y[2] ** 2 + y[3] ** 2) - y[0]), 0.0)
        return max(worst, comp / obj_scale, abs(obj - dual_obj) / obj_scale, cone_infeas)

    def _box_split(lam_diff):
        if p is None:
            return None, None
        mu = lam_diff * bar.c_aux  # original-unit multiplier difference
        return np.maximum(mu, 0.0), np.maximum(-mu, 0.0)

    candidates = []

    # Central-path barrier duals (extended precision).
    ld = np.longdouble
    a1 = 1.0 / (np.asarray(zeta, dtype=ld) - np.asarray(rho, dtype=ld))
    a2 = 1.0 / (np.asarray(zeta, dtype=ld) + np.asarray(rho, dtype=ld))
    s_ld = (4.0 * ld(x[j1]) * ld(x[j3]) - ld(x[j2]) ** 2 - ld(prob.epsilon) ** 2)
    y_c = np.array([2.0 * (ld(x[j1]) + ld(x[j3])), -2.0 * ld(x[j2]),
                    -2.0 * ld(prob.epsilon), -2.0 * (ld(x[j1]) - ld(x[j3]))]) / (ld(t) * s_ld)
    mu_lo_c = mu_hi_c = None
    if p is not None:
        lo, hi = bar.box
        mu_lo_c = np.asarray(1.0 / (ld(t) * (np.asarray(p, ld) - lo)), dtype=float)
        mu_hi_c = np.asarray(1.0 / (ld(t) * (hi - np.asarray(p, ld))), dtype=float)
    candidates.append((np.asarray(a1 / ld(t), dtype=float),
                       np.asarray(a2 / ld(t), dtype=float),
                       np.asarray(y_c, dtype=float), mu_lo_c, mu_hi_c))

    # Escalating active-set candidates.
    crit = zeta_f * t * w_floor
    for threshold in (1e2, 1e3, 1e4, 1e6, 1e9, np.inf):
        free = (crit <= threshold) & ~interior
        lam_pin = w * np.sign(rho_f)
        lam_pin[interior] = 0.0
        fixed = ~free
        rhs = -(bar.A[fixed].T @ lam_pin[fixed]) if np.any(fixed) else np.zeros(bar.m)
        n_free = int(np.count_nonzero(free))
        lb_lam = -w[free]
        ub_lam = w[free].copy()
        if p is not None:
            lb_lam = np.where(at_lo[free], 0.0, lb_lam)
            ub_lam = np.where(at_lo[free], ub_lam, 0.0)

        for cols, lb_y, ub_y, pin_y in (
                (-ray_col[:, None], [0.0], [np.inf], [0.0]),
                (-S3, [0.0, -np.inf, -np.inf], [np.inf] * 3, [0.0] * 3)):
            M = np.concatenate([bar.A[free].T, cols], axis=1)
            lb = np.concatenate([lb_lam, lb_y])
            ub = np.concatenate([ub_lam, ub_y])
            pin = np.concatenate([lam_pin[free], pin_y])
            z = _bounded_ls(M, np.asarray(rhs, dtype=float), lb, ub, pin)
            lam_diff = lam_pin.copy()
            lam_diff[free] = z[:n_free]
            if len(lb_y) == 1:
                y = float(z[n_free]) * ray
            else:
                y0, y1, y3 = z[n_free:]
                room = y0 * y0 - y1 * y1 - y3 * y3
                if y0 <= 0.0 or room < 0.0:
                    continue
                y2 = float(np.clip(-(y0 * u + y1 * wv[0] + y3 * wv[2]) / prob.epsilon,
                                   -np.sqrt(room), np.sqrt(room)))
                y = np.array([y0, y1, y2, y3])
            mu_lo, mu_hi = _box_split(lam_diff)
            candidates.append((0.5 * (w + lam_diff), 0.5 * (w - lam_diff), y, mu_lo, mu_hi))
        if candidates and min(_score(c) for c in candidates) <= 1e-9:
            break

    return min(candidates, key=_score)


def solve(problem: WeightedL1Problem, warm_start: np.ndarray | None = None,
          full_certificate: bool = True) -> ConicSolution:
    """Solve a :class:`WeightedL1Problem` by barrier path following.

    ``warm_start`` supplies an initial coefficient vector (used when it is
    strictly inside the cone, otherwise the default start takes over).
    With ``full_certificate=False`` the solve stops at fitting accuracy and
    skips dual recovery and certification (used by the inner loops of the
    fitting pipeline, which only consume the coefficient vector).
    Raises :class:`InfeasibleProblemError` if no strictly interior start
    exists and :class:`ConvergenceFailureError` past the stage cap.
    """
    prob = problem.validated()
    n_rows, m = prob.rows.shape

    # Rows whose cost underflows a 1e-14 band contribute less than the
    # certification noise; carrying them would force their slacks on a long
    # log-domain march.  Their constraints stay reportable with tight slack
    # and zero duals.
    active = prob.weights > 1e-14 * float(np.max(prob.weights, initial=0.0))
    if prob.box is not None:
        active = np.ones(n_rows, dtype=bool)  # auxiliaries keep every row in play

    j1, j3 = prob.soc_index_map[0], prob.soc_index_map[2]
    x_def = default_start(prob)
    trace_cap = _TRACE_CAP * max(1.0, prob.epsilon, x_def[j1] + x_def[j3])

    if not np.any(active):
        # Objective is identically zero: any strictly feasible point is optimal.
        x = x_def
        aux = np.full(n_rows, 0.5 * (prob.box[0] + prob.box[1])) if prob.box else None
        rho = prob.rows @ x - prob.offsets + (aux if aux is not None else 0.0)
        zeta = np.abs(rho) + 1.0
        sol = ConicSolution(v=x, zeta=zeta, objective=0.0, aux=aux,
                            lam_up=np.zeros(n_rows), lam_dn=np.zeros(n_rows),
                            soc_dual=np.zeros(4), iterations=0)
        if prob.box is not None:
            sol.box_lo_dual = np.zeros(n_rows)
            sol.box_hi_dual = np.zeros(n_rows)
        sol.kkt_residuals = certify(sol, prob)
        return sol

    sub = prob if bool(np.all(active)) else WeightedL1Problem(
        prob.rows[active], prob.offsets[active], prob.weights[active],
        prob.epsilon, prob.box, prob.soc_index_map).validated()

    ws = None
    if warm_start is not None:
        cand = np.asarray(warm_start, dtype=float)
        if (cand.shape == (m,) and np.all(np.isfinite(cand))
                and cand[j1] > 0.0 and cand[j3] > 0.0
                and soc_margin(cand, prob.epsilon, prob.soc_index_map)
                > 1e-10 * prob.epsilon ** 2):
            ws = cand

    total_steps = 0
    sol = None
    # A solution pressed against the internal trace bound is suboptimal for
    # the original problem; retry with the ray pinned further out.
    for _ in range(3):
        bar = _Barrier(sub, trace_cap)
        x = x_def.copy()
        if ws is not None and ws[j1] + ws[j3] < 0.5 * trace_cap:
            x = ws.copy()
        if not (x[j1] > 0.0 and soc_margin(x, prob.epsilon, prob.soc_index_map) > 0.0):
            raise InfeasibleProblemError(
                "no strictly interior starting point for the cone block",
                diagnostics={"soc_margin": soc_margin(x, prob.epsilon, prob.soc_index_map)})

        p = np.full(bar.A.shape[0], 0.5 * (prob.box[0] + prob.box[1])) if prob.box else None
        zeta = np.abs(bar.rho(x, p)) + 1.0
        t = bar.nu / max(float(bar.w @ zeta), 1e-8)

        gap_rel = _GAP_REL if full_certificate else 1e-7
        s_floor_dbl = 1e-12 * max(1.0, prob.epsilon ** 2)
        s_floor_ld = 1e-16 * max(1.0, prob.epsilon ** 2)
        prev_state = None
        for _ in range(_MAX_OUTER):
            x, p, zeta, steps = _center(bar, t, x, p, zeta)
            total_steps += steps
            obj = float(bar.w @ zeta)
            if bar.nu / t <= gap_rel * max(1.0, abs(obj)):
                break
            if soc_margin(x, prob.epsilon, prob.soc_index_map) < s_floor_dbl:
                # Cone slack below double resolution: back off to the last
                # healthy stage and hand over to the extended-precision tail.
                if prev_state is not None:
                    t, x, p, zeta = prev_state
                break
            prev_state = (t, x.copy(), None if p is None else p.copy(), zeta.copy())
            t *= _MU
        else:
            raise ConvergenceFailureError(
                f"barrier stages exceeded {_MAX_OUTER}", last_iterate=x)

        if not full_certificate:
            lam_up_a = lam_dn_a = soc_dual = mu_lo_a = mu_hi_a = None
        else:
            # Extended-precision tail of the path: double-precision centering
            # is exhausted, but the dual construction wants the basis resolved
            # a few decades further.  Only verified re-centerings advance t,
            # and the cone slack must stay above long-double resolution.
            x, p, zeta, _ = _refine_ld(bar, t, x, p, zeta)
            for _ in range(6):
                obj = float(bar.w @ zeta)
                if bar.nu / t <= 1e-12 * max(1.0, abs(obj)):
                    break
                x_n, p_n, z_n, centered = _refine_ld(bar, t * _MU, x, p, zeta)
                s_new = (4.0 * x_n[j1] * x_n[prob.soc_index_map[2]]
                         - x_n[prob.soc_index_map[1]] ** 2 - prob.epsilon ** 2)
                if not centered or s_new < s_floor_ld:
                    break
                t *= _MU
                x, p, zeta = x_n, p_n, z_n
            lam_up_a, lam_dn_a, soc_dual, mu_lo_a, mu_hi_a = _polished_duals(bar, prob, t, x, p, zeta)
        x = np.asarray(x, dtype=float)
        zeta = np.asarray(zeta, dtype=float)
        p = None if p is None else np.asarray(p, dtype=float)

        # Scatter the active-row results back and unscale.
        zeta_full = np.abs(prob.rows @ x - prob.offsets)  # inactive rows: tight slack
        zeta_full[active] = zeta * bar.scale
        aux_full = None
        if p is not None:
            aux_full = np.zeros(n_rows)
            aux_full[active] = p
        lam_up = lam_dn = None
        if lam_up_a is not None:
            lam_up = np.zeros(n_rows)
            lam_dn = np.zeros(n_rows)
            lam_up[active] = lam_up_a / bar.scale
            lam_dn[active] = lam_dn_a / bar.scale

        sol = ConicSolution(
            v=x, zeta=zeta_full, objective=float(prob.weights @ zeta_full),
            aux=aux_full, lam_up=lam_up, lam_dn=lam_dn, soc_dual=soc_dual,
            iterations=total_steps)
        if prob.box is not None and mu_lo_a is not None:
            sol.box_lo_dual = mu_lo_a
            sol.box_hi_dual = mu_hi_a
        if not full_certificate:
            return sol
        sol.kkt_residuals = certify(sol, prob)
        worst = max(abs(v) for k, v in sol.kkt_residuals.items()
                    if k not in ("objective", "dual_objective"))
        cap_tight = (trace_cap - (x[j1] + x[j3])) < 1e-3 * trace_cap
        if worst <= 1e-8 or not cap_tight:
            break
        trace_cap *= 100.0
    return sol


def certify(solution: ConicSolution, problem: WeightedL1Problem) -> dict:
    """Recompute every KKT residual of a solution from scratch.

    Runs in extended precision (long double) and uses only the problem data
    and the fields stored on the solution; missing duals count as zero, so a
    hand-built primal point reports its full duality gap.
    """
    ld = np.longdouble
    prob = problem.validated()
    A = prob.rows.astype(ld)
    off = prob.offsets.astype(ld)
    w = prob.weights.astype(ld)
    eps = ld(prob.epsilon)
    j1, j2, j3 = prob.soc_index_map
    n_rows = A.shape[0]

    x = np.asarray(solution.v, dtype=ld)
    zeta = np.asarray(solution.zeta, dtype=ld)
    p = None if solution.aux is None else np.asarray(solution.aux, dtype=ld)
    rho = A @ x - off + (p if p is not None else 0.0)

    def _dual(attr):
        val = getattr(solution, attr)
        return np.zeros(n_rows, dtype=ld) if val is None else np.asarray(val, dtype=ld)

    lam_up, lam_dn = _dual("lam_up"), _dual("lam_dn")
    y = (np.zeros(4, dtype=ld) if solution.soc_dual is None
         else np.asarray(solution.soc_dual, dtype=ld))

    res_scale = max(1.0, float(np.max(np.abs(off))), float(np.max(np.abs(rho))))
    obj = float(w @ zeta)
    obj_scale = max(1.0, abs(obj))

    # Primal feasibility.
    slack_viol = float(np.max(np.abs(rho) - zeta)) / res_scale
    cone_norm = np.sqrt(x[j2] ** 2 + eps ** 2 + (x[j1] - x[j3]) ** 2)
    soc_viol = float(cone_norm - (x[j1] + x[j3])) / max(1.0, float(x[j1] + x[j3]))
    box_viol = 0.0
    if prob.box is not None and p is not None:
        lo, hi = prob.box
        box_viol = float(max(np.max(lo - p), np.max(p - hi), 0.0))

    # Dual feasibility.
    dual_neg = float(max(-np.min(lam_up), -np.min(lam_dn), 0.0))
    soc_dual_viol = float(np.sqrt(y[1] ** 2 + y[2] ** 2 + y[3] ** 2) - y[0])
    mu_lo = _dual("box_lo_dual")
    mu_hi = _dual("box_hi_dual")
    if prob.box is not None:
        dual_neg = max(dual_neg, float(max(-np.min(mu_lo), -np.min(mu_hi), 0.0)))

    # Stationarity.  Cone jacobian transpose scatters (y0 +/- y3, y1).
    lam_diff = lam_up - lam_dn
    stat_x = A.T @ lam_diff
    stat_x[j1] -= y[0] + y[3]
    stat_x[j2] -= y[1]
    stat_x[j3] -= y[0] - y[3]
    stat_scale = max(1.0, float(np.max(np.abs(A).T @ (lam_up + lam_dn))),
                     float(np.max(np.abs(y))))
    stat_x_res = float(np.max(np.abs(stat_x))) / stat_scale
    stat_zeta_res = float(np.max(np.abs(w - lam_up - lam_dn))) / max(1.0, float(np.max(w)))
    stat_p_res = 0.0
    if prob.box is not None:
        stat_p_res = float(np.max(np.abs(lam_diff - mu_lo + mu_hi))) / max(
            1.0, float(np.max(lam_up + lam_dn)))

    # Complementarity and duality gap.
    comp = max(
        float(np.max(np.abs(lam_up * (zeta - rho)))),
        float(np.max(np.abs(lam_dn * (zeta + rho)))),
        abs(float(y[0] * (x[j1] + x[j3]) + y[1] * x[j2] + y[2] * eps
                  + y[3] * (x[j1] - x[j3]))),
    )
    dual_obj = -float(lam_diff @ off) - float(eps * y[2])
    if prob.box is not None:
        lo, hi = prob.box
        comp = max(comp, float(np.max(np.abs(mu_lo * (p - lo)))),
                   float(np.max(np.abs(mu_hi * (hi - p)))))
        dual_obj += float(mu_lo.sum() * lo - mu_hi.sum() * hi)

    return {
        "primal_slack": max(slack_viol, 0.0),
        "primal_soc": max(soc_viol, 0.0),
        "primal_box": box_viol,
        "dual_nonneg": dual_neg,
        "dual_soc": max(soc_dual_viol, 0.0),
        "stationarity_x": stat_x_res,
        "stationarity_zeta": stat_zeta_res,
        "stationarity_aux": stat_p_res,
        "complementarity": comp / obj_scale,
        "duality_gap": (obj - dual_obj) / obj_scale,
        "objective": obj,
        "dual_objective": dual_obj,
    }
