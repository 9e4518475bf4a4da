"""Complex-analytic engine for the rectangular R-transform with ratio lambda.

The transform chain for a symmetric probability measure mu is

    G_mu(z)  = int d mu(t) / (z - t)                (Cauchy transform)
    H_mu(z)  = z * (lam * g(z)^2 + (1 - lam) * g(z)),  g(z) = w G_mu(w),
               w = 1 / sqrt(z)  with the square root cut along [0, inf)
    C_mu(z)  = U(z / H_mu^{-1}(z) - 1)              (rectangular R-transform)

with U(z) = (-lam - 1 + ((lam+1)^2 + 4 lam z)^(1/2)) / (2 lam) (U = id when
lam = 0).  H_mu^{-1} exists on a sector around the negative real axis whose
radius is only known to exist, so it is found adaptively: damped Newton seeded
from the asymptote H(z) ~ z, with two continuation fallbacks that pin the
analytic branch -- a geometric walk along the ray through the target, and a
vertical descent that first lifts near-axis targets far off the real axis.

Branch conventions (fixed throughout the package):

* ``sqrt_cut_negative`` is the principal square root, cut (-inf, 0],
  1^(1/2) = 1; it commutes with conjugation.
* ``sqrt_cut_positive`` has its cut on [0, inf) and sqrt(-1) = +i; for
  z in the upper half plane near (0, inf) it agrees with the positive root,
  so 1/sqrt(z) approaches the real axis from below, which is where Cauchy
  transforms are read off for Stieltjes inversion.

Measure recovery inverts the chain: z / H^{-1}(z) = T(C(z)) with
T(X) = (lam X + 1)(X + 1) gives H^{-1} explicitly, a Newton solve turns it
back into H, V(h) = U(h - 1) + 1 solves lam g^2 + (1 - lam) g = h for the
root near 1, and the density is the Stieltjes limit of Im G / pi with a
two-point Richardson extrapolation in the offset; atoms are located where
eps * |G| refuses to vanish.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .measures import (
    FiniteMeasure,
    SymmetricMeasure,
    sine_spaced,
    symmetric_grid_from_half,
)

__all__ = [
    "BranchCutError",
    "DomainTooLargeError",
    "InversionError",
    "RecoveryError",
    "ContourConfig",
    "TransformGrid",
    "sqrt_cut_negative",
    "sqrt_cut_positive",
    "auxiliary_map",
    "cauchy_transform",
    "cauchy_transform_deriv",
    "h_transform",
    "invert_h",
    "rect_r_transform",
    "RectRTransform",
    "recover_measure",
    "stieltjes_density",
    "stieltjes_density_detail",
    "f_transform",
    "voiculescu_transform",
    "transform_grid",
    "taylor_cumulants",
]


class BranchCutError(ValueError):
    """Evaluation requested on (or across) a square-root branch cut."""


class DomainTooLargeError(ValueError):
    """Argument outside the region where the transform is trustworthy."""


class InversionError(RuntimeError):
    """Functional inversion did not converge; shrink the working radius beta."""


class RecoveryError(RuntimeError):
    """Measure recovery failed; carries a diagnostics dict."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class ContourConfig:
    """Numerical domain/effort knobs for the transform engine.

    alpha/beta describe the working sector around the negative real axis
    (|arg z - pi| < alpha, |z| < beta); epsilon_schedule is the decreasing
    list of Stieltjes offsets used for density recovery.
    """

    alpha: float = 2.8
    beta: float = 0.25
    n_points: int = 700
    epsilon_schedule: tuple[float, ...] = (1e-2, 5e-3, 2.5e-3, 1.25e-3)
    max_newton: int = 60
    homotopy_steps: int = 16
    coarse_points: int = 241
    residual_rtol: float = 1e-12
    atom_floor: float = 5e-3
    density_floor: float = 1e-5

    def __post_init__(self):
        if not 0 < self.alpha < np.pi:
            raise ValueError("alpha must lie in (0, pi)")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        eps = self.epsilon_schedule
        if len(eps) < 2 or any(e <= 0 for e in eps) or any(
                b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilon_schedule must be strictly decreasing and positive")


@dataclass(frozen=True)
class TransformGrid:
    """Sampled values of one transform on a contour inside the sector."""

    points: np.ndarray
    values: np.ndarray
    kind: str  # one of {"G", "H", "Hinv", "C"}

    def __post_init__(self):
        if self.kind not in {"G", "H", "Hinv", "C"}:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("transform values must be finite")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["re_z", "im_z", "re_value", "im_value", "kind"])
            for z, v in zip(self.points, self.values):
                writer.writerow([repr(z.real), repr(z.imag), repr(v.real), repr(v.imag), self.kind])


# ---------------------------------------------------------------------------
# branch-correct square roots and the auxiliary maps U, T, V
# ---------------------------------------------------------------------------

def sqrt_cut_negative(z):
    """Principal square root (cut on (-inf, 0], 1^(1/2) = 1)."""
    z = np.asarray(z, dtype=complex)
    if np.any((z.imag == 0) & (z.real < 0)):
        raise BranchCutError("argument on the cut (-inf, 0)")
    out = np.sqrt(z)
    return out[()] if out.ndim == 0 else out


def sqrt_cut_positive(z):
    """Square root with cut on [0, inf) and sqrt(-1) = +i."""
    z = np.asarray(z, dtype=complex)
    if np.any((z.imag == 0) & (z.real >= 0)):
        raise BranchCutError("argument on the cut [0, inf)")
    out = 1j * np.sqrt(-z)
    return out[()] if out.ndim == 0 else out


def _sqrt_pos_unchecked(z):
    # boundary values taken from above the cut; used only by batch internals
    return 1j * np.sqrt(-np.asarray(z, dtype=complex))


def auxiliary_map(kind: str, lam: float, z):
    """Evaluate U, T or V at z for ratio lam.

    U inverts T - 1 near 0 (T(U(z)) = z + 1, T(X) = (lam X + 1)(X + 1)) and
    V(z) = U(z - 1) + 1 solves lam g^2 + (1 - lam) g = h for the root near 1.
    When lam = 0 they degenerate to U = id, T = X + 1, V = id.
    """
    if not 0 <= lam <= 1:
        raise ValueError("lambda must lie in [0, 1]")
    z = np.asarray(z, dtype=complex)
    if kind == "T":
        out = (lam * z + 1.0) * (z + 1.0)
    elif kind == "U":
        if lam == 0:
            out = z + 0j
        else:
            bracket = (lam + 1.0) ** 2 + 4.0 * lam * z
            _reject_cut(bracket)
            out = (-lam - 1.0 + np.sqrt(bracket)) / (2.0 * lam)
    elif kind == "V":
        if lam == 0:
            out = z + 0j
        else:
            bracket = (lam - 1.0) ** 2 + 4.0 * lam * z
            _reject_cut(bracket)
            out = (lam - 1.0 + np.sqrt(bracket)) / (2.0 * lam)
    else:
        raise ValueError("kind must be one of 'U', 'T', 'V'")
    return out[()] if out.ndim == 0 else out


def _reject_cut(bracket):
    bad = (bracket.imag == 0) & (bracket.real < 0)
    if np.any(bad):
        raise BranchCutError("square-root bracket fell on the cut (-inf, 0)")


def _u_map(lam, z):
    if lam == 0:
        return z
    return (-lam - 1.0 + np.sqrt((lam + 1.0) ** 2 + 4.0 * lam * z)) / (2.0 * lam)


def _u_map_deriv(lam, z):
    if lam == 0:
        return np.ones_like(np.asarray(z, dtype=complex))
    return 1.0 / np.sqrt((lam + 1.0) ** 2 + 4.0 * lam * z)


def _t_map(lam, z):
    return (lam * z + 1.0) * (z + 1.0)


def _t_map_deriv(lam, z):
    return 2.0 * lam * z + lam + 1.0


def _v_map(lam, z):
    if lam == 0:
        return z
    return (lam - 1.0 + np.sqrt((lam - 1.0) ** 2 + 4.0 * lam * z)) / (2.0 * lam)


# ---------------------------------------------------------------------------
# Cauchy transform of the grid representation (exact per cell)
# ---------------------------------------------------------------------------

def _clog1p(r):
    """log(1 + r) for complex arrays, accurate for small |r|."""
    u = 1.0 + r
    out = np.log(u)
    d = u - 1.0
    safe = d != 0
    np.divide(out * r, d, out=out, where=safe)
    return np.where(safe, out, r)


_CHUNK = 262144  # cap on cells x points per broadcast block


def _cauchy_sums(mu: FiniteMeasure, z: np.ndarray, want_deriv: bool):
    """G(z) (and G'(z)) of the representation: atoms exactly, density by the
    closed-form integral of the linear interpolant against 1/(z - t)."""
    z = np.asarray(z, dtype=complex)
    G = np.zeros(z.shape, dtype=complex)
    Gp = np.zeros(z.shape, dtype=complex) if want_deriv else None
    if mu.atom_masses.size:
        for x, m in zip(mu.atom_locations, mu.atom_masses):
            d = z - x
            G += m / d
            if want_deriv:
                Gp -= m / d**2
    if mu.grid is not None:
        t = mu.grid
        f = mu.values
        t0, t1 = t[:-1], t[1:]
        f0, f1 = f[:-1], f[1:]
        h = t1 - t0
        df = f1 - f0
        zflat = z.reshape(-1)
        Gflat = G.reshape(-1)
        Gpflat = Gp.reshape(-1) if want_deriv else None
        block = max(1, _CHUNK // max(1, t0.size))
        for lo in range(0, zflat.size, block):
            zz = zflat[lo:lo + block][:, None]
            W0 = zz - t0[None, :]
            L = _clog1p(-h[None, :] / W0)
            A = f0[None, :] + df[None, :] * W0 / h[None, :]  # f0 + b (z - t0)
            cell = -A * L - df[None, :]
            Gflat[lo:lo + block] += cell.sum(axis=1)
            if want_deriv:
                W1 = zz - t1[None, :]
                dcell = A * (h[None, :] / (W0 * W1)) + (df[None, :] / h[None, :]) * L
                Gpflat[lo:lo + block] -= dcell.sum(axis=1)
    return (G, Gp) if want_deriv else G


def _check_off_support(mu: FiniteMeasure, z: np.ndarray):
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    real = z.imag == 0
    if not np.any(real):
        return
    x = z.real[real]
    if mu.atom_locations.size and np.any(
            np.min(np.abs(x[:, None] - mu.atom_locations[None, :]), axis=1) == 0.0):
        raise ValueError("z coincides with an atom of the measure")
    if mu.grid is not None:
        inside = (x > mu.grid[0]) & (x < mu.grid[-1])
        if np.any(inside):
            xi = x[inside]
            # real evaluation across a zero-density gap is fine
            dens = np.interp(xi, mu.grid, mu.values)
            if np.any(dens > 0):
                raise ValueError("real z inside the continuous support")


def cauchy_transform(mu: FiniteMeasure, z):
    """G_mu(z) = int d mu(t) / (z - t); exact for the grid representation."""
    zz = np.asarray(z, dtype=complex)
    _check_off_support(mu, zz)
    out = _cauchy_sums(mu, zz, want_deriv=False)
    return out[()] if out.ndim == 0 else out


def cauchy_transform_deriv(mu: FiniteMeasure, z):
    """d/dz G_mu(z)."""
    zz = np.asarray(z, dtype=complex)
    _check_off_support(mu, zz)
    _, gp = _cauchy_sums(mu, zz, want_deriv=True)
    return gp[()] if gp.ndim == 0 else gp


# ---------------------------------------------------------------------------
# generic batched Newton with damping + branch-tracking continuations
# ---------------------------------------------------------------------------

_NOISE_FLOOR_RTOL = 3e-5  # stalled iterates below this residual are accepted


def _damped_newton(f, f_and_fp, targets, init, rtol, max_iter):
    """Vectorized damped Newton for f(z) = target; returns (z, converged).

    For targets with |t| >= 2 the residual is measured (and the step scaled)
    in reciprocal form: such targets sit near poles of f, where a simple zero
    of 1/f replaces a wild overshoot.  The mask is per point, so evaluation
    batches keep their full shape (callers may cache warm state per shape).

    Steps that would land on [0, inf) are rejected, and steps are halved
    until the residual decreases.  Runs whose line search stalls while the
    residual already sits below a loose ceiling are accepted: in deeply
    nested evaluations the noise of f itself can exceed the requested
    tolerance even though the iterate is exact to machine precision.
    """
    t = np.asarray(targets, dtype=complex)
    z = np.array(init, dtype=complex, copy=True)
    big = np.abs(t) >= 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_metric = np.where(big, 1.0 / t, t)
    tol = rtol * np.maximum(np.abs(t_metric), 1e-300)
    floor_tol = _NOISE_FLOOR_RTOL * np.maximum(np.abs(t_metric), 1e-300)
    # ceiling for step-collapse acceptance: generous, but far below the O(1)
    # relative residual of a wrong-branch root
    floor_ceiling = 1e-2 * np.maximum(np.abs(t_metric), 1e-300)

    def resid(F):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.abs(np.where(big, 1.0 / F, F) - t_metric)

    F, Fp = f_and_fp(z)
    res = resid(F)
    done = res <= tol
    for _ in range(max_iter):
        if np.all(done):
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            step = (F - t) / Fp
            step = np.where(big, step * F / t, step)
        step = np.where(np.isfinite(step), step, 0.0)
        # step collapse: the root as seen through f moves below machine
        # precision, so the residual that remains is evaluation bias
        done |= (step != 0) & (np.abs(step) <= 1e-12 * (np.abs(z) + 1.0)) & (res <= floor_ceiling)
        active = ~done & (step != 0)
        if not np.any(active):
            break
        improved = np.zeros(z.shape, dtype=bool)
        factor = np.ones(z.shape)
        znew = z.copy()
        resnew = res.copy()
        for _ in range(10):
            trial = z - factor * step
            bad = (trial.imag == 0) & (trial.real >= 0)
            probe = np.where(bad | ~active, z, trial)
            Ft = f(probe)
            rt = resid(Ft)
            ok = active & ~improved & ~bad & np.isfinite(rt) & (rt < res)
            znew = np.where(ok, trial, znew)
            resnew = np.where(ok, rt, resnew)
            improved |= ok
            if np.all(improved | ~active):
                break
            factor = np.where(improved, factor, factor * 0.5)
        if not np.any(improved):
            break
        z, res = znew, resnew
        done = res <= tol
        if np.all(done):
            break
        F, Fp = f_and_fp(z)
        res = resid(F)
        done = res <= tol
    # noise-floor acceptance: a residual this small that refuses to shrink
    # further is evaluation noise, not an unconverged or wrong-branch root
    done |= res <= floor_tol
    return z, done


def _ray_continuation(f, f_and_fp, targets, rtol, max_iter, steps, start_scale):
    """Solve f(z) = target walking the target along its ray from near 0.

    Relies on the normalization f(z) ~ z near 0, which makes z = target an
    excellent starting guess for small targets.
    """
    t = np.asarray(targets, dtype=complex)
    tau0 = np.minimum(1.0, start_scale / np.maximum(np.abs(t), 1e-300))
    z = t * tau0
    ok = np.ones(t.shape, dtype=bool)
    for j in range(1, steps + 1):
        tj = t * tau0 ** (1.0 - j / steps)
        z, conv = _damped_newton(f, f_and_fp, tj, z, rtol if j == steps else 1e-9, max_iter)
        ok &= conv
    return z, ok


def _solve_with_fallbacks(f, f_and_fp, targets, init, cfg, start_scale):
    """Newton from ``init``; stragglers get ray continuation, densified once."""
    t = np.asarray(targets, dtype=complex)
    z, done = _damped_newton(f, f_and_fp, t, init, cfg.residual_rtol, cfg.max_newton)
    for densify in (1, 4):
        if np.all(done):
            break
        idx = ~done
        zl, dl = _ray_continuation(f, f_and_fp, t[idx], cfg.residual_rtol,
                                   cfg.max_newton, cfg.homotopy_steps * densify,
                                   start_scale)
        z[idx] = zl
        done[idx] = dl
    return z, done


# ---------------------------------------------------------------------------
# H transform and its inversion
# ---------------------------------------------------------------------------

def _h_batch(mu: FiniteMeasure, lam: float, z: np.ndarray, want_deriv: bool):
    """H(z) (and H'(z)) without domain checks; z must avoid [0, inf)."""
    w = 1.0 / _sqrt_pos_unchecked(z)
    if want_deriv:
        G, Gp = _cauchy_sums(mu, w, True)
    else:
        G = _cauchy_sums(mu, w, False)
    g = w * G
    P = lam * g * g + (1.0 - lam) * g
    H = z * P
    if not want_deriv:
        return H
    dw_dz = -0.5 * w**3
    dg_dz = (G + w * Gp) * dw_dz
    Hp = P + z * (2.0 * lam * g + (1.0 - lam)) * dg_dz
    return H, Hp


def h_transform(mu: FiniteMeasure, lam: float, z):
    """H_mu(z) for z in C \\ [0, inf); satisfies H(z)/z -> 1 as z -> 0."""
    if not 0 <= lam <= 1:
        raise ValueError("lambda must lie in [0, 1]")
    zz = np.asarray(z, dtype=complex)
    if np.any((zz.imag == 0) & (zz.real >= 0)):
        raise BranchCutError("H is evaluated on C \\ [0, inf)")
    r = max(mu.support_radius(), 1.0)
    if np.any(np.abs(zz) * r * r > 1e12):
        raise DomainTooLargeError("|z| too large for a reliable H evaluation")
    out = _h_batch(mu, lam, zz, want_deriv=False)
    return out[()] if out.ndim == 0 else out


def _h_solver_pair(mu, lam):
    def f(z):
        return _h_batch(mu, lam, z, False)

    def f_and_fp(z):
        return _h_batch(mu, lam, z, True)

    return f, f_and_fp


def invert_h(mu: FiniteMeasure, lam: float, w, cfg: ContourConfig | None = None):
    """Solve H_mu(z) = w for the branch with z/w -> 1 as w -> 0.

    The residual satisfies |H(z) - w| <= residual_rtol * |w|; non-convergence
    raises :class:`InversionError` (the working radius beta is then too big).
    """
    cfg = cfg or ContourConfig()
    ww = np.atleast_1d(np.asarray(w, dtype=complex))
    if np.any((ww.imag == 0) & (ww.real >= 0)):
        raise BranchCutError("H^{-1} is evaluated on C \\ [0, inf)")
    f, f_and_fp = _h_solver_pair(mu, lam)
    scale = 0.01 / max(mu.support_radius(), 1.0) ** 2
    z, done = _solve_with_fallbacks(f, f_and_fp, ww, ww.copy(), cfg, scale)
    if not np.all(done):
        raise InversionError(
            f"H inversion failed at {int((~done).sum())} of {done.size} points; "
            "shrink the domain radius beta")
    out = z.reshape(np.shape(w))
    return out[()] if out.ndim == 0 else out


def rect_r_transform(mu: FiniteMeasure, lam: float, z, cfg: ContourConfig | None = None):
    """Rectangular R-transform C_mu(z) = U(z / H_mu^{-1}(z) - 1)."""
    zi = invert_h(mu, lam, z, cfg)
    zz = np.asarray(z, dtype=complex)
    out = _u_map(lam, zz / zi - 1.0)
    return out[()] if np.ndim(out) == 0 else out


class RectRTransform:
    """Reusable C_mu evaluator with warm-started H inversion.

    Repeated calls on slowly moving batches (as in measure recovery and
    convolution) reuse the previous solution of the same shape as the Newton
    starting point, which keeps the iteration on the analytic branch.
    """

    def __init__(self, mu: FiniteMeasure, lam: float, cfg: ContourConfig | None = None,
                 strict: bool = True):
        self.mu = mu
        self.lam = lam
        self.cfg = cfg or ContourConfig()
        # non-strict evaluators mark unsolvable points NaN instead of raising
        # (and skip the expensive continuation fallbacks), so an enclosing
        # Newton line search can probe freely and discard bad points
        self.strict = strict
        # +1 pins H^{-1} to the closed upper half plane (the physical branch
        # when approaching the support from below via x = 1/v^2), -1 to the
        # lower one, 0 leaves it free; measure recovery sets +1
        self.root_half_plane = 0
        self._warm: dict[tuple, np.ndarray] = {}

    def reset_warm(self):
        """Drop cached Newton starting points (restores a fresh solver state)."""
        self._warm.clear()

    def chain_h(self, x):
        """H_mu(x) directly: for a single measure the recovery chain's
        H = (z/T(C))^{-1} is the measure's own H-transform, so the Newton
        solve (and its trouble at folds, where H' = 0) can be skipped."""
        return _h_batch(self.mu, self.lam, np.asarray(x, dtype=complex), False)

    def _solve(self, ww: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        f, f_and_fp = _h_solver_pair(self.mu, self.lam)
        on_cut = (ww.imag == 0) & (ww.real >= 0)
        if self.strict and np.any(on_cut):
            raise BranchCutError("H^{-1} is evaluated on C \\ [0, inf)")
        targets = np.where(on_cut, -1e-6 + 0j, ww)  # placeholder, masked below
        key = ww.shape
        init = self._warm.get(key)
        z = None
        done = None
        if init is not None:
            z, done = _damped_newton(f, f_and_fp, targets, init, cfg.residual_rtol,
                                     cfg.max_newton)
        if done is None or not np.all(done):
            if self.strict:
                start = z if z is not None else targets.copy()
                scale = 0.01 / max(self.mu.support_radius(), 1.0) ** 2
                z, done = _solve_with_fallbacks(f, f_and_fp, targets, start, cfg, scale)
            elif z is None:
                z, done = _damped_newton(f, f_and_fp, targets, targets.copy(),
                                         cfg.residual_rtol, cfg.max_newton)
            else:
                # a stale warm start must not doom a solvable point: retry
                # the failures from scratch before giving up on them
                idx = ~done
                zi, di = _damped_newton(f, f_and_fp, targets[idx], targets[idx].copy(),
                                        cfg.residual_rtol, cfg.max_newton)
                z[idx] = zi
                done[idx] = di
        if self.root_half_plane:
            # a root on the wrong side is the conjugate branch; its mirror
            # image is a near-perfect seed for the physical root
            viol = done & (self.root_half_plane * z.imag < -1e-9 * (np.abs(z) + 1.0))
            if np.any(viol):
                seed = np.where(viol, np.conj(z), z)
                z2, d2 = _damped_newton(f, f_and_fp, targets, seed,
                                        cfg.residual_rtol, cfg.max_newton)
                fixed = viol & d2 & (self.root_half_plane * z2.imag
                                     >= -1e-9 * (np.abs(z2) + 1.0))
                z = np.where(fixed, z2, z)
                done &= ~(viol & ~fixed)
        done &= ~on_cut
        if not np.all(done):
            if self.strict:
                raise InversionError(
                    f"H inversion failed at {int((~done).sum())} of {done.size} points; "
                    "shrink the domain radius beta")
            z = np.where(done, z, np.nan + 0j)
        if np.any(done):
            cache = z.copy()
            if init is not None and init.shape == cache.shape:
                cache = np.where(done, cache, init)
            self._warm[key] = cache
        return z

    def __call__(self, w):
        ww = np.atleast_1d(np.asarray(w, dtype=complex))
        z = self._solve(ww)
        out = _u_map(self.lam, ww / z - 1.0).reshape(np.shape(w))
        return out[()] if out.ndim == 0 else out

    def value_and_deriv(self, w):
        """(C(w), C'(w)) with the derivative from the implicit function rule.

        With z = H^{-1}(w):  C = U(w/z - 1) and
        C' = U'(w/z - 1) * (1/z - (w/z^2) / H'(z)).
        """
        ww = np.atleast_1d(np.asarray(w, dtype=complex))
        z = self._solve(ww)
        q = ww / z - 1.0
        with np.errstate(divide="ignore", invalid="ignore"):
            _, Hp = _h_batch(self.mu, self.lam, z, True)
            qp = 1.0 / z - (ww / (z * z)) / Hp
        c = _u_map(self.lam, q)
        cp = _u_map_deriv(self.lam, q) * qp
        return c.reshape(np.shape(w)), cp.reshape(np.shape(w))


# ---------------------------------------------------------------------------
# F transform / Voiculescu transform (independent cross-check route)
# ---------------------------------------------------------------------------

def f_transform(mu: FiniteMeasure, z):
    """F_mu(z) = 1 / G_mu(z)."""
    return 1.0 / cauchy_transform(mu, z)


def voiculescu_transform(mu: FiniteMeasure, w, rtol: float = 1e-13, max_iter: int = 80):
    """phi_mu(w) = F_mu^{-1}(w) - w on a Stolz-type domain near infinity."""
    ww = np.atleast_1d(np.asarray(w, dtype=complex))

    def f(z):
        return 1.0 / _cauchy_sums(mu, z, False)

    def f_and_fp(z):
        G, Gp = _cauchy_sums(mu, z, True)
        return 1.0 / G, -Gp / G**2

    z, done = _damped_newton(f, f_and_fp, ww, ww.copy(), rtol, max_iter)
    if not np.all(done):
        raise InversionError("F inversion failed; move w farther from the support")
    out = (z - ww).reshape(np.shape(w))
    return out[()] if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Stieltjes inversion
# ---------------------------------------------------------------------------

def stieltjes_density_detail(g_fn, x: float, eps_schedule) -> tuple[float, bool]:
    """Density estimate at x plus a reliability flag.

    ``g_fn`` must be the Cauchy transform evaluated from the lower half
    plane; the density is Im g / pi extrapolated to the axis with a two-point
    Richardson step, and the flag reports oscillation across the schedule.
    """
    eps = list(eps_schedule)
    if len(eps) < 2:
        raise ValueError("need at least two offsets")
    vals = [float(np.imag(g_fn(complex(x, -e)))) / np.pi for e in eps]
    rich = [2.0 * b - a for a, b in zip(vals, vals[1:])]
    d = rich[-1]
    reliable = True
    if len(rich) >= 2:
        spread = abs(rich[-1] - rich[-2])
        reliable = spread <= max(0.05 * abs(d), 1e-6)
    if d < -1e-9:
        reliable = False
    return d, reliable


def stieltjes_density(g_fn, x: float, eps_schedule) -> float:
    """Density of the measure behind ``g_fn`` at x (clipped at 0)."""
    d, _ = stieltjes_density_detail(g_fn, x, eps_schedule)
    return max(d, 0.0)


# ---------------------------------------------------------------------------
# measure recovery from a rectangular R-transform
# ---------------------------------------------------------------------------

class _ChainEvaluator:
    """G(v) for v in the lower half plane, given C_mu as a callable.

    H^{-1}(z) = z / T(C(z)) is known in closed form; a Newton solve turns it
    back into zeta = H(x) at x = 1/v^2 (so sqrt(x) = 1/v for v in the fourth
    quadrant or on the negative imaginary axis), and the root g of
    lam g^2 + (1 - lam) g = zeta / x near-continuing g = 1 from small x gives
    G(v) = g / v.  Both zeta and g are tracked by continuation in the offset
    Im v: rung ratios are capped so Newton cannot jump across a pole of
    H^{-1} onto a conjugate root, and the g-root is picked by closeness to
    the previous rung (the quadratic has two sheets that cross wherever the
    discriminant hits the negative axis, so a fixed principal branch would
    flip sheets).  The Herglotz property Im G > 0 below the axis gates every
    rung; violators are redone with a finer sub-descent, then in isolation.
    """

    def __init__(self, c_fn, lam: float, cfg: ContourConfig):
        self.c_fn = c_fn
        self.lam = lam
        self.cfg = cfg
        self._warm: dict[tuple, tuple] = {}
        self._start_scale = None

    def _hinv(self, zeta):
        with np.errstate(divide="ignore", invalid="ignore"):
            return zeta / _t_map(self.lam, self.c_fn(zeta))

    def _hinv_and_deriv(self, zeta):
        # d/dzeta [zeta / T(C)] = (T(C) - zeta T'(C) C') / T(C)^2
        c_deriv = getattr(self.c_fn, "value_and_deriv", None)
        if c_deriv is not None:
            c, cp = c_deriv(zeta)
            with np.errstate(divide="ignore", invalid="ignore"):
                tc = _t_map(self.lam, c)
                fp = (tc - zeta * _t_map_deriv(self.lam, c) * cp) / (tc * tc)
                return zeta / tc, fp
        h = 1e-7 * np.maximum(np.abs(zeta), 1e-30)
        dirn = zeta / np.maximum(np.abs(zeta), 1e-300)
        dz = h * dirn
        batch = np.concatenate([zeta, zeta + dz, zeta - dz])
        vals = self._hinv(batch)
        n = zeta.size
        f0, fp_hi, fp_lo = vals[:n], vals[n:2 * n], vals[2 * n:]
        return f0, (fp_hi - fp_lo) / (2.0 * dz)

    def _reset_c_state(self):
        reset = getattr(self.c_fn, "reset_warm", None)
        if reset is not None:
            reset()

    def _pick_start_scale(self):
        # magnitude at which |C| is safely small, so the ray continuation can
        # start inside the H(z) ~ z regime
        scale = 0.01
        for _ in range(40):
            c = self.c_fn(np.array([complex(-scale, 0.0)]))
            if np.all(np.abs(c) < 0.05):
                break
            scale *= 0.25
        return scale

    def _solver_pair(self):
        def f(zeta):
            return self._hinv(zeta)

        def f_and_fp(zeta):
            return self._hinv_and_deriv(zeta)

        return f, f_and_fp

    _RUNG_RATIO = 1.4  # max offset shrink per descent rung (branch safety)

    def _g_track(self, zeta, x, g_prev):
        """Root of lam g^2 + (1-lam) g = zeta/x closest to the previous g."""
        h = zeta / x
        if self.lam == 0:
            return h
        s = np.sqrt((1.0 - self.lam) ** 2 + 4.0 * self.lam * h)
        g_plus = (self.lam - 1.0 + s) / (2.0 * self.lam)
        g_minus = (self.lam - 1.0 - s) / (2.0 * self.lam)
        take_plus = np.abs(g_plus - g_prev) <= np.abs(g_minus - g_prev)
        return np.where(take_plus, g_plus, g_minus)

    def _herglotz_ok(self, g, v):
        """G = g/v maps the lower half plane into the upper one; materially
        negative Im G marks a conjugate branch."""
        with np.errstate(divide="ignore", invalid="ignore"):
            G = g / v
        return np.isfinite(G) & (G.imag >= -1e-9 * np.abs(G) - 1e-13)

    def _descend_direct(self, y, eps_from, eps_to, g, chain_h):
        """Offset descent when zeta = H(x) is directly computable: only the
        g-root needs tracking, so every rung is a single evaluation."""
        ratio = float(np.max(np.maximum(eps_from, eps_to)
                             / np.minimum(eps_from, eps_to)))
        n = max(1, int(np.ceil(abs(np.log(ratio)) / np.log(self._RUNG_RATIO))))
        z = None
        for j in range(1, n + 1):
            e_j = eps_from ** (1.0 - j / n) * eps_to ** (j / n)
            v_j = y - 1j * e_j
            x_j = 1.0 / v_j**2
            z = chain_h(x_j)
            g = self._g_track(z, x_j, g)
        ok = self._herglotz_ok(g, y - 1j * eps_to)
        return z, g, ok

    def _descend(self, y, eps_from, eps_to, z, g, rtol):
        """Walk the offsets geometrically from eps_from to eps_to, Newton at
        each rung warm-started from the previous one; stragglers (including
        points that hopped to a conjugate branch) get a finer sub-descent."""
        cfg = self.cfg
        f, f_and_fp = self._solver_pair()
        ratio = float(np.max(np.maximum(eps_from, eps_to)
                             / np.minimum(eps_from, eps_to)))
        n = max(1, int(np.ceil(abs(np.log(ratio)) / np.log(self._RUNG_RATIO))))
        for j in range(1, n + 1):
            e_j = eps_from ** (1.0 - j / n) * eps_to ** (j / n)
            v_j = y - 1j * e_j
            x_j = 1.0 / v_j**2
            z_prev, g_prev = z.copy(), g.copy()
            z, done = _damped_newton(f, f_and_fp, x_j, z,
                                     rtol if j == n else 1e-7, cfg.max_newton)
            g = self._g_track(z, x_j, g_prev)
            done &= self._herglotz_ok(g, v_j)
            if not np.all(done):
                # redo the rung with finer sub-steps for the failed points;
                # converged points are held at the rung target (full-shape
                # batches keep any warm caches inside f coherent)
                idx = ~done
                e_a = eps_from ** (1.0 - (j - 1) / n) * eps_to ** ((j - 1) / n)
                zi = np.where(idx, z_prev, z)
                gi = np.where(idx, g_prev, g)
                sub_ok = np.ones(z.shape, dtype=bool)
                n_sub = 8
                for k in range(1, n_sub + 1):
                    e_k = np.where(idx, e_a ** (1.0 - k / n_sub) * e_j ** (k / n_sub), e_j)
                    v_k = y - 1j * e_k
                    x_k = 1.0 / v_k**2
                    zi, dk = _damped_newton(f, f_and_fp, x_k, zi,
                                            rtol if (j == n and k == n_sub) else 1e-7,
                                            cfg.max_newton)
                    gi = self._g_track(zi, x_k, gi)
                    dk &= self._herglotz_ok(gi, v_k)
                    sub_ok &= dk
                z = np.where(idx, zi, z)
                g = np.where(idx, gi, g)
                done |= idx & sub_ok
            if not np.all(done):
                return z, g, done
        return z, g, np.ones(z.shape, dtype=bool)

    def _anchor_and_descend(self, y, eps, rtol):
        cfg = self.cfg
        if self._start_scale is None:
            self._start_scale = self._pick_start_scale()
        # anchor offset deep enough that |x| starts inside the small-|C|
        # asymptotic region where Newton from z = x is provably safe
        e_start = max(1.0, 2.0 * float(np.max(np.abs(y), initial=0.0)),
                      1.0 / np.sqrt(self._start_scale))
        eps_from = np.full(eps.shape, e_start)
        x0 = 1.0 / (y - 1j * eps_from) ** 2
        f, f_and_fp = self._solver_pair()
        z, done = _damped_newton(f, f_and_fp, x0, x0.copy(), 1e-9, cfg.max_newton)
        if not np.all(done):
            idx = ~done
            zl, dl = _ray_continuation(f, f_and_fp, x0[idx], 1e-9, cfg.max_newton,
                                       cfg.homotopy_steps, self._start_scale)
            z[idx] = zl
            done[idx] = dl
        if not np.all(done):
            return z, np.ones_like(z), done
        g0 = self._g_track(z, x0, np.ones_like(z))  # g ~ 1 in the asymptote
        return self._descend(y, eps_from, eps, z, g0, rtol)

    def solve_h_of_v(self, v: np.ndarray, warm_key: str | None = None):
        """(H(x), g) at x = 1/v^2, branch-pinned by continuation in Im v."""
        cfg = self.cfg
        v = np.asarray(v, dtype=complex)
        y = v.real
        eps = -v.imag
        if np.any(eps <= 0):
            raise ValueError("v must lie strictly below the real axis")
        chain_h = getattr(self.c_fn, "chain_h", None)
        if chain_h is not None:
            if self._start_scale is None:
                self._start_scale = self._pick_start_scale()
            e0 = max(1.0, 2.0 * float(np.max(np.abs(y), initial=0.0)),
                     1.0 / np.sqrt(self._start_scale))
            eps_from = np.full(eps.shape, e0)
            g0 = np.ones(v.shape, dtype=complex)
            z, g, done = self._descend_direct(y, eps_from, eps, g0, chain_h)
            if not np.all(done):
                idx = ~done
                old_ratio = self._RUNG_RATIO
                try:
                    self._RUNG_RATIO = 1.1
                    zr, gr, dr = self._descend_direct(
                        y[idx], eps_from[idx], eps[idx], g0[idx], chain_h)
                finally:
                    self._RUNG_RATIO = old_ratio
                z[idx] = zr
                g[idx] = gr
                done[idx] = dr
            if not np.all(done):
                raise InversionError(
                    f"direct chain evaluation left {int((~done).sum())} of "
                    f"{done.size} points off the Herglotz branch")
            return z, g
        key = (warm_key, v.shape)
        cached = self._warm.get(key) if warm_key is not None else None
        if cached is not None:
            eps_from, z0, g0 = cached
            z, g, done = self._descend(y, eps_from, eps, z0.copy(), g0.copy(),
                                       cfg.residual_rtol)
        else:
            z, g, done = self._anchor_and_descend(y, eps, cfg.residual_rtol)
        if not np.all(done):
            # isolated rescue: restart the failed points from the far-offset
            # anchor as their own batch, with a slower descent and a fresh
            # solver state in the transform callable
            idx = ~done
            old_ratio = self._RUNG_RATIO
            try:
                self._RUNG_RATIO = 1.15
                self._reset_c_state()
                zr, gr, dr = self._anchor_and_descend(y[idx], eps[idx],
                                                      cfg.residual_rtol)
            finally:
                self._RUNG_RATIO = old_ratio
            z[idx] = zr
            g[idx] = gr
            done[idx] = dr
        if not np.all(done):
            raise InversionError(
                f"chain inversion failed at {int((~done).sum())} of {done.size} "
                "points during offset descent; shrink the domain radius beta")
        if warm_key is not None:
            self._warm[key] = (eps.copy(), z.copy(), g.copy())
        return z, g

    def g_of_v(self, v: np.ndarray, warm_key: str | None = None):
        v = np.asarray(v, dtype=complex)
        _, g = self.solve_h_of_v(v, warm_key)
        return g / v


def recover_measure(c_fn, lam: float, cfg: ContourConfig | None = None,
                    support_hint=(-4.0, 4.0)) -> SymmetricMeasure:
    """Rebuild the symmetric measure whose rectangular R-transform is ``c_fn``.

    Pipeline: form H^{-1}(z) = z / T(c_fn(z)); invert it numerically on a
    contour approaching the positive real axis from above; map back to the
    Cauchy transform via V; read the density off Im G / pi with Richardson
    extrapolation over the epsilon schedule; declare an atom wherever
    eps * |G| stabilizes at a positive value.  The result is renormalized to
    mass 1; a deficit beyond 1e-3 raises :class:`RecoveryError`.
    """
    cfg = cfg or ContourConfig()
    try:
        lo, hi = support_hint
    except TypeError:
        lo, hi = -float(support_hint), float(support_hint)
    radius = max(abs(lo), abs(hi))
    if radius <= 0:
        raise ValueError("support hint must have positive radius")

    if hasattr(c_fn, "root_half_plane"):
        c_fn.root_half_plane = +1
    chain = _ChainEvaluator(c_fn, lam, cfg)
    eps = list(cfg.epsilon_schedule)
    e_big, e_big2 = eps[0], eps[1]
    e_sm2, e_sm = eps[-2], eps[-1]

    # -- coarse scan: support mask and atom candidates -----------------------
    y_coarse = np.linspace(0.0, radius, cfg.coarse_points)
    imG = {}
    for e in (e_big, e_big2):
        G = chain.g_of_v(y_coarse - 1j * e, warm_key="coarse")
        imG[e] = G.imag
    dens_coarse = (2.0 * imG[e_big2] - imG[e_big]) / np.pi
    atom_stat = 2.0 * e_big2 * imG[e_big2] - e_big * imG[e_big]

    # atom candidates: where the Richardson combination of eps * Im G
    # stabilizes above the floor instead of vanishing
    cand = atom_stat > cfg.atom_floor
    cand_locs: list[float] = []
    if np.any(cand):
        idx = np.flatnonzero(cand)
        for grp in np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1):
            j = grp[int(np.argmax(atom_stat[grp]))]
            cand_locs.append(float(y_coarse[j]))

    # -- support intervals from the coarse density ----------------------------
    floor = max(cfg.density_floor, 1e-4 * float(np.max(dens_coarse, initial=0.0)))
    strong = dens_coarse > floor
    cell = float(y_coarse[1] - y_coarse[0])
    pad = 3.0 * e_sm + cell
    intervals = _mask_to_intervals(y_coarse, strong, pad, radius)

    spike_w = max(20.0 * e_sm, 2.0 * cell)
    grid = values = None
    atom_list: list[tuple[float, float]] = []
    if intervals or cand_locs:
        total_len = sum(b - a for a, b in intervals) or 1.0
        ys = []
        for a, b in intervals:
            n_i = max(41, int(round(cfg.n_points * (b - a) / total_len)))
            ys.append(sine_spaced(a, b, n_i))
        for y0 in cand_locs:
            # resolve the atom resonance well below its smearing width
            ys.append(sine_spaced(max(y0 - spike_w, 0.0), y0 + spike_w, 161))
        y_fine = np.unique(np.concatenate(ys))
        dvals = {}
        for e in (e_sm2, e_sm):
            G = chain.g_of_v(y_fine - 1j * e, warm_key="fine")
            dvals[e] = G.imag / np.pi
        dens = 2.0 * dvals[e_sm] - dvals[e_sm2]
        dens = np.maximum(dens, 0.0)

        # convert recovered resonance spikes into atoms: the window integral
        # is the mass and the window centroid the location
        for y0 in cand_locs:
            win = np.abs(y_fine - y0) <= spike_w
            if not np.any(win):
                continue
            dw = np.where(win, dens, 0.0)
            m_win = float(np.trapezoid(dw, y_fine))
            if m_win <= cfg.atom_floor:
                continue
            loc = float(np.trapezoid(dw * y_fine, y_fine)) / m_win
            dens = np.where(win, 0.0, dens)
            if loc < 10.0 * e_sm:  # this close to 0 it is the symmetric atom at 0
                atom_list.append((0.0, 2.0 * m_win))
            else:
                atom_list.extend([(loc, m_win), (-loc, m_win)])
        grid, values = symmetric_grid_from_half(y_fine, dens)

    mass = sum(m for _, m in atom_list)
    if grid is not None:
        mass += float(np.trapezoid(values, grid))
    if abs(mass - 1.0) > 1e-3:
        raise RecoveryError(
            f"recovered mass {mass:.6f} deviates from 1 beyond 1e-3",
            diagnostics={"mass": mass, "atoms": atom_list,
                         "intervals": intervals, "lam": lam})
    scale = 1.0 / mass
    atom_list = [(x, m * scale) for x, m in atom_list]
    if values is not None:
        values = values * scale
    if grid is None and not atom_list:
        raise RecoveryError("recovered neither density nor atoms", {"lam": lam})
    return SymmetricMeasure(atoms=atom_list or None, grid=grid, values=values)


def _mask_to_intervals(y, mask, pad, radius):
    out = []
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return out
    groups = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
    for grp in groups:
        a = max(float(y[grp[0]]) - pad, 0.0)
        b = min(float(y[grp[-1]]) + pad, radius)
        if b > a:
            out.append([a, b])
    merged = [out[0]]
    for a, b in out[1:]:
        if a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return [tuple(iv) for iv in merged]


# ---------------------------------------------------------------------------
# diagnostics helpers
# ---------------------------------------------------------------------------

def transform_grid(mu: FiniteMeasure, lam: float, kind: str,
                   cfg: ContourConfig | None = None) -> TransformGrid:
    """Sample G, H, Hinv or C along the ray arg z = pi inside the sector."""
    cfg = cfg or ContourConfig()
    r = np.geomspace(cfg.beta * 1e-3, cfg.beta * 0.99, cfg.n_points)
    z = -r.astype(complex)
    if kind == "G":
        vals = cauchy_transform(mu, z)
    elif kind == "H":
        vals = h_transform(mu, lam, z)
    elif kind == "Hinv":
        vals = invert_h(mu, lam, z, cfg)
    elif kind == "C":
        vals = rect_r_transform(mu, lam, z, cfg)
    else:
        raise ValueError("kind must be one of 'G', 'H', 'Hinv', 'C'")
    return TransformGrid(points=z, values=np.asarray(vals), kind=kind)


def taylor_cumulants(c_fn, orders: int, h: float = 0.05) -> list[float]:
    """Rectangular cumulants from the expansion C(z) = sum c_{2n} z^n.

    Coefficients are extracted with a least-squares Vandermonde fit on the
    ray arg z = pi (clear of every branch cut), with two sacrificial higher
    orders absorbing the truncation error.
    """
    fit_orders = orders + 2
    npts = fit_orders + 3
    zs = -h * (0.75 ** np.arange(npts))
    vals = np.asarray(c_fn(zs.astype(complex)))
    A = np.vander(zs, fit_orders + 1, increasing=True)[:, 1:]
    coef, *_ = np.linalg.lstsq(A, vals.real, rcond=None)
    return [float(c) for c in coef[:orders]]
