"""Coordinate-ascent E-step: closed-form updates for zeta, phi, lambda and
v2, damped Newton solvers for xi and m2, and the per-document sweep driver.

Every update is a conditional argmax of the bound B, so a full sweep can
never decrease a document's contribution to B; the driver enforces that.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceWarning, DegenerateWordError, NumericError
from .params import document_bound

_BACKTRACK_MAX = 30


@dataclass(frozen=True)
class EStepSchedule:
    """Inner-loop tolerances.

    Newton tolerances are on the sup-norm of the gradient; the sweep stops
    when the document bound improves by less than ``rel_tol`` relatively.
    """

    newton_tol: float = 1e-8
    newton_max_iter: int = 50
    rel_tol: float = 1e-6
    max_sweeps: int = 100


@dataclass
class SegmentContext:
    """Everything a segment-level solver needs besides its own variable."""

    sigma_inv: np.ndarray  # (K, K)
    lam: np.ndarray  # (K,)
    zeta: float
    n_words: int
    sum_phi: np.ndarray = None  # (K,), counts-weighted sum of phi rows
    xi: np.ndarray = None  # (K,), fixed during the m2 solve
    m2: np.ndarray = None  # (K,), fixed during the xi solve

    @property
    def sigma_inv_diag(self):
        return np.diag(self.sigma_inv)


def update_zeta(xi, m2):
    """Closed-form optimum of the normalizer linearization,
    sum_k exp(xi_k + m2_k / 2)."""
    if np.any(m2 <= 0):
        raise NumericError("m2 must be strictly positive")
    a = xi + 0.5 * m2
    shift = a.max()
    zeta = float(np.exp(shift) * np.exp(a - shift).sum())
    if not np.isfinite(zeta) or zeta <= 0:
        raise NumericError("zeta overflowed")
    return zeta


def update_phi(beta_row, xi):
    """Word-topic responsibilities, phi_k proportional to beta_{w,k} exp(xi_k)."""
    return _phi_rows(np.asarray(beta_row, dtype=np.float64)[None, :], xi)[0]


def _phi_rows(beta_rows, xi):
    """Vectorized phi update for all unique words of a segment, (U, K)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        logw = np.log(beta_rows) + xi
        logw -= logw.max(axis=1, keepdims=True)
    bad = ~np.isfinite(logw).any(axis=1)
    if np.any(bad):
        raise DegenerateWordError(
            "word has zero probability under every topic"
        )
    w = np.exp(logw)
    return w / w.sum(axis=1, keepdims=True)


def update_lambda(xi_segments, mu):
    """Closed-form document mean, (sum_s xi_s + mu) / (S + 1)."""
    xi_segments = np.atleast_2d(np.asarray(xi_segments, dtype=np.float64))
    return (xi_segments.sum(axis=0) + mu) / (xi_segments.shape[0] + 1)


def update_v2(sigma_inv_diag, n_segments):
    """Closed-form document variances, 1 / ((S + 1) (Sigma^-1)_{kk})."""
    sigma_inv_diag = np.asarray(sigma_inv_diag, dtype=np.float64)
    if np.any(sigma_inv_diag <= 0):
        raise NumericError("Sigma^-1 has a non-positive diagonal entry")
    return 1.0 / ((n_segments + 1) * sigma_inv_diag)


def _xi_value_grad(ctx, xi):
    """The xi-dependent part of B for one segment, and its gradient."""
    d = xi - ctx.lam
    sd = ctx.sigma_inv @ d
    e = (ctx.n_words / ctx.zeta) * np.exp(xi + 0.5 * ctx.m2)
    value = -0.5 * float(d @ sd) + float(xi @ ctx.sum_phi) - e.sum()
    grad = -sd + ctx.sum_phi - e
    return value, grad, e


def xi_gradient(ctx, xi):
    """Gradient of B with respect to one segment's xi."""
    return _xi_value_grad(ctx, xi)[1]


def xi_hessian(ctx, xi):
    """Hessian of B with respect to one segment's xi (negative definite)."""
    e = (ctx.n_words / ctx.zeta) * np.exp(xi + 0.5 * ctx.m2)
    return -ctx.sigma_inv - np.diag(e)


def newton_xi(ctx, xi0, tol=1e-8, max_iter=50):
    """Damped Newton ascent on xi with step-halving backtracking on B."""
    xi = np.array(xi0, dtype=np.float64)
    value, grad, e = _xi_value_grad(ctx, xi)
    for _ in range(max_iter):
        gnorm = np.abs(grad).max()
        if gnorm <= tol:
            return xi
        h = ctx.sigma_inv + np.diag(e)  # negated Hessian, positive definite
        try:
            step = np.linalg.solve(h, grad)
        except np.linalg.LinAlgError as exc:
            raise NumericError("singular Hessian in xi Newton step") from exc
        t = 1.0
        # Acceptance slack of a few ulps lets Newton polish the last digits
        # without tripping the monotonicity guard.
        floor = value - 1e-13 * max(1.0, abs(value))
        for _ in range(_BACKTRACK_MAX):
            cand = xi + t * step
            cand_value, cand_grad, cand_e = _xi_value_grad(ctx, cand)
            if np.isfinite(cand_value) and cand_value >= floor:
                xi, value, grad, e = cand, cand_value, cand_grad, cand_e
                break
            t *= 0.5
        else:
            break  # no ascent direction left at float precision
    gnorm = np.abs(xi_gradient(ctx, xi)).max()
    if gnorm > tol:
        warnings.warn(
            f"xi Newton stopped with gradient sup-norm {gnorm:.3e} > {tol:.1e}",
            ConvergenceWarning,
            stacklevel=2,
        )
    return xi


def m2_gradient(ctx, m2):
    """d B / d m2 for one segment, coordinate-wise."""
    e = (ctx.n_words / (2.0 * ctx.zeta)) * np.exp(ctx.xi + 0.5 * m2)
    return -0.5 * ctx.sigma_inv_diag - e + 0.5 / m2


def _m2_objective(ctx, m2):
    """The m2-dependent part of B for one segment, coordinate-wise."""
    e = (ctx.n_words / ctx.zeta) * np.exp(ctx.xi + 0.5 * m2)
    return -0.5 * ctx.sigma_inv_diag * m2 - e + 0.5 * np.log(m2)


def newton_m2(ctx, m2_0, tol=1e-8, max_iter=50):
    """Coordinate-wise safeguarded Newton for m2.

    The gradient is strictly decreasing in m2 (unique root) and tends to
    +inf as m2 -> 0+, so each coordinate keeps a [lo, hi] bracket and falls
    back to bisection whenever the Newton step leaves it.
    """
    m2 = np.array(m2_0, dtype=np.float64)
    if np.any(m2 <= 0):
        raise NumericError("m2 starting point must be strictly positive")
    lo = np.zeros_like(m2)
    hi = np.full_like(m2, np.inf)
    converged = False
    for _ in range(max_iter):
        e = (ctx.n_words / (2.0 * ctx.zeta)) * np.exp(ctx.xi + 0.5 * m2)
        g = -0.5 * ctx.sigma_inv_diag - e + 0.5 / m2
        if np.abs(g).max() <= tol:
            converged = True
            break
        above = g > 0  # root lies above the current point
        lo = np.where(above, m2, lo)
        hi = np.where(above, hi, m2)
        gp = -0.5 * e - 0.5 / m2**2
        cand = m2 - g / gp
        mid = np.where(np.isfinite(hi), 0.5 * (lo + hi), 2.0 * m2)
        bad = ~np.isfinite(cand) | (cand <= lo) | (cand >= hi)
        m2 = np.where(bad, mid, cand)
    if not converged:
        g = m2_gradient(ctx, m2)
        if np.abs(g).max() > tol:
            warnings.warn(
                f"m2 Newton stopped with gradient sup-norm "
                f"{np.abs(g).max():.3e} > {tol:.1e}",
                ConvergenceWarning,
                stacklevel=2,
            )
    # Monotonicity insurance: never hand back a coordinate worse than the
    # starting point (possible only when max_iter cut the solve short).
    worse = _m2_objective(ctx, m2) < _m2_objective(ctx, m2_0)
    if np.any(worse):
        m2 = np.where(worse, m2_0, m2)
    return m2


class _DocWorkspace:
    """Flattened per-document views so a sweep can update every segment in
    one batch of array operations. Segments are independent given lambda,
    so batching leaves the coordinate-ascent result unchanged."""

    def __init__(self, params, doc):
        segs = doc.segments
        self.n_segments = len(segs)
        self.n_words = np.array([seg.n_words for seg in segs], dtype=np.float64)
        self.ids = np.concatenate([seg.word_ids for seg in segs])
        self.counts = np.concatenate([seg.counts for seg in segs]).astype(
            np.float64
        )
        sizes = np.array([seg.word_ids.size for seg in segs])
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.splits = np.cumsum(sizes)[:-1]
        self.seg_of = np.repeat(np.arange(self.n_segments), sizes)
        self.beta_rows = params.beta[self.ids]
        with np.errstate(divide="ignore"):
            self.log_beta = np.log(self.beta_rows)

    def phi_update(self, xi):
        """Batched phi update for every unique word of every segment."""
        logw = self.log_beta + xi[self.seg_of]
        with np.errstate(invalid="ignore"):
            logw -= logw.max(axis=1, keepdims=True)
        if not np.all(np.isfinite(logw.max(axis=1))):
            raise DegenerateWordError("word has zero probability under every topic")
        w = np.exp(logw)
        return w / w.sum(axis=1, keepdims=True)

    def sum_phi(self, phi_cat):
        """Counts-weighted per-segment phi sums, (S, K)."""
        return np.add.reduceat(
            self.counts[:, None] * phi_cat, self.offsets, axis=0
        )


def _zeta_batch(xi, m2):
    a = xi + 0.5 * m2
    shift = a.max(axis=1, keepdims=True)
    zeta = np.exp(shift[:, 0]) * np.exp(a - shift).sum(axis=1)
    if not np.all(np.isfinite(zeta)) or np.any(zeta <= 0):
        raise NumericError("zeta overflowed")
    return zeta


def _xi_batch_value_grad(inv, lam, m2, ratio, sum_phi, xi):
    """Per-segment xi objective values, gradients and exp terms; ``ratio``
    is N_ds / zeta_ds."""
    d = xi - lam
    sd = d @ inv
    e = ratio[:, None] * np.exp(xi + 0.5 * m2)
    value = (
        -0.5 * (d * sd).sum(axis=1) + (xi * sum_phi).sum(axis=1) - e.sum(axis=1)
    )
    return value, -sd + sum_phi - e, e


def _newton_xi_batch(inv, lam, m2, zeta, n_words, sum_phi, xi0, tol, max_iter):
    """Batched damped Newton ascent over all segments of one document."""
    k = inv.shape[0]
    ratio = n_words / zeta
    xi = xi0.copy()
    value, grad, e = _xi_batch_value_grad(inv, lam, m2, ratio, sum_phi, xi)
    active = np.abs(grad).max(axis=1) > tol
    for _ in range(max_iter):
        if not np.any(active):
            return xi, 0
        idx = np.flatnonzero(active)
        h = np.broadcast_to(inv, (idx.size, k, k)).copy()
        h[:, np.arange(k), np.arange(k)] += e[idx]
        try:
            step = np.linalg.solve(h, grad[idx][..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise NumericError("singular Hessian in xi Newton step") from exc
        floor = value[idx] - 1e-13 * np.maximum(1.0, np.abs(value[idx]))
        t = np.ones(idx.size)
        accepted = np.zeros(idx.size, dtype=bool)
        cand = xi[idx].copy()
        for _ in range(_BACKTRACK_MAX):
            trial = xi[idx] + t[:, None] * step
            t_value, _, _ = _xi_batch_value_grad(
                inv, lam, m2[idx], ratio[idx], sum_phi[idx], trial
            )
            ok = np.isfinite(t_value) & (t_value >= floor) & ~accepted
            cand[ok] = trial[ok]
            accepted |= ok
            if np.all(accepted):
                break
            t = np.where(accepted, t, 0.5 * t)
        moved = idx[accepted]
        stuck = idx[~accepted]
        xi[moved] = cand[accepted]
        value[idx], grad[idx], e[idx] = _xi_batch_value_grad(
            inv, lam, m2[idx], ratio[idx], sum_phi[idx], xi[idx]
        )
        active = np.abs(grad).max(axis=1) > tol
        active[stuck] = False  # no ascent direction left at float precision
    n_unconverged = int((np.abs(grad).max(axis=1) > tol).sum())
    return xi, n_unconverged


def _newton_m2_batch(diag_inv, xi, zeta, n_words, m2_0, tol, max_iter):
    """Batched safeguarded Newton for every segment's m2, see newton_m2."""
    half_ratio = (n_words / (2.0 * zeta))[:, None]
    m2 = m2_0.copy()
    lo = np.zeros_like(m2)
    hi = np.full_like(m2, np.inf)
    converged = False
    for _ in range(max_iter):
        e = half_ratio * np.exp(xi + 0.5 * m2)
        g = -0.5 * diag_inv - e + 0.5 / m2
        if np.abs(g).max() <= tol:
            converged = True
            break
        above = g > 0
        lo = np.where(above, m2, lo)
        hi = np.where(above, hi, m2)
        gp = -0.5 * e - 0.5 / m2**2
        cand = m2 - g / gp
        mid = np.where(np.isfinite(hi), 0.5 * (lo + hi), 2.0 * m2)
        bad = ~np.isfinite(cand) | (cand <= lo) | (cand >= hi)
        m2 = np.where(bad, mid, cand)
    n_unconverged = 0
    if not converged:
        e = half_ratio * np.exp(xi + 0.5 * m2)
        g = -0.5 * diag_inv - e + 0.5 / m2
        n_unconverged = int((np.abs(g).max(axis=1) > tol).sum())
        # Keep the better of start and end per coordinate if cut short.
        obj_new = -0.5 * diag_inv * m2 - 2.0 * half_ratio * np.exp(
            xi + 0.5 * m2
        ) + 0.5 * np.log(m2)
        obj_old = -0.5 * diag_inv * m2_0 - 2.0 * half_ratio * np.exp(
            xi + 0.5 * m2_0
        ) + 0.5 * np.log(m2_0)
        m2 = np.where(obj_new < obj_old, m2_0, m2)
    return m2, n_unconverged


def _document_bound_fast(params, state, ws):
    """Same quantity as params.document_bound, via the flattened workspace."""
    from .params import LOG_2PI

    k = params.k
    inv = params.sigma_inv
    diag_inv = params.sigma_inv_diag
    gauss_const = -0.5 * params.sigma_logdet - 0.5 * k * LOG_2PI
    lam, v2, xi, m2 = state.lam, state.v2, state.xi, state.m2
    s = ws.n_segments

    dlam = lam - params.mu
    b = gauss_const - 0.5 * float(v2 @ diag_inv) - 0.5 * float(dlam @ inv @ dlam)
    dxi = xi - lam
    b += s * gauss_const
    b += -0.5 * float(((v2 + m2) @ diag_inv).sum()) - 0.5 * float(
        ((dxi @ inv) * dxi).sum()
    )
    log_zeta = np.log(state.zeta)
    zterm = np.exp(xi + 0.5 * m2 - log_zeta[:, None]).sum(axis=1)
    phi_cat = np.concatenate(state.phi, axis=0)
    sum_phi = ws.sum_phi(phi_cat)
    b += float((xi * sum_phi).sum())
    b += float((ws.n_words * (-zterm + 1.0 - log_zeta)).sum())
    with np.errstate(invalid="ignore"):
        blog = np.where(phi_cat > 0, phi_cat * ws.log_beta, 0.0)
    b += float((ws.counts[:, None] * blog).sum())
    b += 0.5 * float((np.log(m2) + LOG_2PI + 1.0).sum())
    b += -float(ws.n_words.sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(phi_cat > 0, phi_cat * np.log(phi_cat), 0.0)
    b += -float((ws.counts[:, None] * plogp).sum())
    b += 0.5 * float((np.log(v2) + LOG_2PI + 1.0).sum())
    return b


def estep_document(params, doc, state0, schedule=EStepSchedule()):
    """Run coordinate-ascent sweeps on one document until its bound settles.

    Sweep order: per segment zeta, phi, xi (Newton), m2 (Newton), zeta
    refresh; then the document-level lambda and v2. Returns a new state and
    the bound improvement. The input state is not modified.
    """
    state = state0.copy()
    state.validate(params.k, doc)
    inv = params.sigma_inv
    diag_inv = params.sigma_inv_diag
    ws = _DocWorkspace(params, doc)
    b_init = _document_bound_fast(params, state, ws)
    b_prev = b_init
    n_unconverged = 0
    for _ in range(schedule.max_sweeps):
        state.zeta = _zeta_batch(state.xi, state.m2)
        phi_cat = ws.phi_update(state.xi)
        state.phi = np.split(phi_cat, ws.splits, axis=0)
        sum_phi = ws.sum_phi(phi_cat)
        state.xi, bad_xi = _newton_xi_batch(
            inv,
            state.lam,
            state.m2,
            state.zeta,
            ws.n_words,
            sum_phi,
            state.xi,
            schedule.newton_tol,
            schedule.newton_max_iter,
        )
        state.m2, bad_m2 = _newton_m2_batch(
            diag_inv,
            state.xi,
            state.zeta,
            ws.n_words,
            state.m2,
            schedule.newton_tol,
            schedule.newton_max_iter,
        )
        n_unconverged += bad_xi + bad_m2
        state.zeta = _zeta_batch(state.xi, state.m2)
        state.lam = update_lambda(state.xi, params.mu)
        state.v2 = update_v2(diag_inv, doc.n_segments)

        b = _document_bound_fast(params, state, ws)
        if b < b_prev - 1e-8 * max(1.0, abs(b_prev)):
            raise NumericError(
                f"document bound decreased during a sweep: "
                f"{b_prev:.12g} -> {b:.12g} (doc {doc.label!r})"
            )
        if b - b_prev < schedule.rel_tol * max(1.0, abs(b_prev)):
            b_prev = b
            break
        b_prev = b
    if n_unconverged:
        warnings.warn(
            f"{n_unconverged} Newton solve(s) stopped above tolerance "
            f"(doc {doc.label!r})",
            ConvergenceWarning,
            stacklevel=2,
        )
    return state, b_prev - b_init
