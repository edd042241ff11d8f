"""State space machinery: ZOH discretization, dense LTI reference, and the
input-dependent (selective) scan with a naive oracle.

The continuous model is h' = A h + B x, y = C h + D x. Discretization uses
the zero-order hold: A_bar = exp(delta A), B_bar = (delta A)^{-1}
(exp(delta A) - I) delta B. The selective scan makes delta, B and C per-step
quantities while A stays a per-channel negative diagonal.

``selective_scan`` is the fused differentiable kernel used by the model;
``naive_selective_recurrence`` is its deliberately unoptimized oracle twin.
Both compute the per-entry exact discretized B by default, with the common
simplified form B_bar = delta B available via ``mode="simplified"``.
"""

from __future__ import annotations

import numpy as np

from .tensor import NumericError, ShapeError, Tensor, record

MODES = ("zoh", "simplified")


class SSMParams:
    """Parameters of one state space system.

    Reference mode is a dense single-input single-output system (A: N x N,
    B: N x 1, C: 1 x N, D scalar), used only by the sequential reference
    path. Selective mode stores the per-channel diagonal as A_log with
    A = -exp(A_log) (strictly negative by construction) plus the per-channel
    feedthrough; the per-step B, C and timescale come from learned
    projections that live with the layer that owns them.
    """

    def __init__(self, mode: str, *, A=None, B=None, C=None, D=0.0,
                 A_log=None, D_skip=None):
        if mode not in ("reference", "selective"):
            raise ValueError(f"unknown SSMParams mode: {mode!r}")
        self.mode = mode
        if mode == "reference":
            A = np.asarray(A, dtype=np.float64)
            B = np.asarray(B, dtype=np.float64)
            C = np.asarray(C, dtype=np.float64)
            if A.ndim != 2 or A.shape[0] != A.shape[1]:
                raise ShapeError(f"reference A must be square, got {A.shape}")
            n = A.shape[0]
            if B.shape != (n, 1):
                raise ShapeError(f"reference B must be ({n}, 1), got {B.shape}")
            if C.shape != (1, n):
                raise ShapeError(f"reference C must be (1, {n}), got {C.shape}")
            self.A, self.B, self.C, self.D = A, B, C, float(D)
            self.N = n
        else:
            A_log = np.asarray(A_log, dtype=np.float64)
            D_skip = np.asarray(D_skip, dtype=np.float64)
            if A_log.ndim != 2:
                raise ShapeError(f"selective A_log must be (D_inner, N), got {A_log.shape}")
            if D_skip.shape != (A_log.shape[0],):
                raise ShapeError(f"D_skip must be ({A_log.shape[0]},), got {D_skip.shape}")
            if not np.all(np.isfinite(A_log)):
                raise NumericError("A_log has non-finite entries")
            self.A_log, self.D_skip = A_log, D_skip
            self.N = A_log.shape[1]

    @property
    def A_diag(self) -> np.ndarray:
        """Selective-mode diagonal, strictly negative."""
        if self.mode != "selective":
            raise ValueError("A_diag is a selective-mode field")
        return -np.exp(self.A_log)


# ---------------------------------------------------------------------------
# matrix exponential and discretization (dense reference path, numpy only)
# ---------------------------------------------------------------------------

def matrix_exp(M: np.ndarray) -> np.ndarray:
    """exp(M) by scaling and squaring with a Taylor series core."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError(f"matrix_exp: square matrix required, got {M.shape}")
    norm = np.linalg.norm(M, 1)
    squarings = max(0, int(np.ceil(np.log2(norm / 0.25))) if norm > 0.25 else 0)
    S = M / (2.0 ** squarings)
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, 40):
        term = term @ S / k
        out = out + term
        if np.linalg.norm(term, 1) < 1e-18 * max(np.linalg.norm(out, 1), 1.0):
            break
    for _ in range(squarings):
        out = out @ out
    return out


def _phi(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z, series near zero; phi(0) = 1."""
    z = np.asarray(z, dtype=np.float64) if not isinstance(z, np.ndarray) else z
    small = np.abs(z) < 1e-4
    zs = np.where(small, 1.0, z)
    out = np.expm1(zs) / zs
    if small.any():
        zc = z[small]
        out[small] = 1.0 + zc * (0.5 + zc / 6.0)
    return out


def _psi(z: np.ndarray) -> np.ndarray:
    """(z exp(z) - (exp(z) - 1)) / z^2 = d/dz[z phi(z)] - phi(z) ... psi(0) = 1/2."""
    z = np.asarray(z, dtype=np.float64) if not isinstance(z, np.ndarray) else z
    small = np.abs(z) < 1e-4
    zs = np.where(small, 1.0, z)
    out = (zs * np.exp(zs) - np.expm1(zs)) / (zs * zs)
    if small.any():
        zc = z[small]
        out[small] = 0.5 + zc * (1.0 / 3.0 + zc / 8.0)
    return out


def discretize_zoh(A: np.ndarray, B: np.ndarray, delta: float):
    """Zero-order-hold discretization of (A, B) with timescale delta.

    Returns (A_bar, B_bar) with A_bar = exp(delta A) and
    B_bar = (delta A)^{-1} (exp(delta A) - I) delta B. A Taylor series
    replaces the inverse when ||delta A|| < 1e-4; diagonal A uses the exact
    per-entry closed form for any magnitude.
    """
    if delta <= 0:
        raise ValueError(f"discretize_zoh: delta must be positive, got {delta}")
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"discretize_zoh: A must be square, got {A.shape}")
    if B.ndim != 2 or B.shape[0] != A.shape[0]:
        raise ShapeError(f"discretize_zoh: B rows must match A, got {A.shape} vs {B.shape}")
    Z = delta * A
    if np.count_nonzero(Z - np.diag(np.diag(Z))) == 0:
        z = np.diag(Z)
        A_bar = np.diag(np.exp(z))
        B_bar = (delta * _phi(z))[:, None] * B
        return A_bar, B_bar
    A_bar = matrix_exp(Z)
    if np.linalg.norm(Z, 1) < 1e-4:
        # B_bar = delta (sum_k Z^k / (k+1)!) B; three terms are plenty here
        acc = np.eye(A.shape[0])
        term = np.eye(A.shape[0])
        fact = 1.0
        for k in range(1, 6):
            term = term @ Z
            fact *= (k + 1)
            acc = acc + term / fact
        return A_bar, delta * (acc @ B)
    try:
        B_bar = np.linalg.solve(Z, (A_bar - np.eye(A.shape[0])) @ (delta * B))
    except np.linalg.LinAlgError:
        raise NumericError(
            "discretize_zoh: delta*A is singular outside the series regime "
            f"(condition number {np.linalg.cond(Z):.3e})"
        ) from None
    return A_bar, B_bar


def lti_apply_dense(params: SSMParams, x: np.ndarray, delta: float) -> np.ndarray:
    """Run the dense discrete recurrence h_t = A_bar h + B_bar x_t, y_t = C h_t + D x_t."""
    if params.mode != "reference":
        raise ValueError("lti_apply_dense requires reference-mode params")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise ShapeError(f"lti_apply_dense: x must be a nonempty 1D sequence, got shape {x.shape}")
    A_bar, B_bar = discretize_zoh(params.A, params.B, delta)
    h = np.zeros(params.N)
    y = np.empty_like(x)
    for t in range(x.size):
        h = A_bar @ h + B_bar[:, 0] * x[t]
        y[t] = params.C[0] @ h + params.D * x[t]
    return y


# ---------------------------------------------------------------------------
# selective scan: naive oracle
# ---------------------------------------------------------------------------

def _check_scan_args(u, delta, A, B_seq, C_seq, D_skip):
    if u.shape != delta.shape:
        raise ShapeError(f"selective scan: u {u.shape} vs delta {delta.shape}")
    L, D = u.shape[-2], u.shape[-1]
    if A.ndim != 2 or A.shape[0] != D:
        raise ShapeError(f"selective scan: A must be ({D}, N), got {A.shape}")
    N = A.shape[1]
    if B_seq.shape[-2:] != (L, N) or C_seq.shape[-2:] != (L, N):
        raise ShapeError(
            f"selective scan: B_seq/C_seq must end in ({L}, {N}), got {B_seq.shape}, {C_seq.shape}"
        )
    if D_skip.shape != (D,):
        raise ShapeError(f"selective scan: D_skip must be ({D},), got {D_skip.shape}")
    if np.any(delta <= 0):
        raise ValueError("selective scan: delta must be strictly positive")
    if np.any(A >= 0):
        raise ValueError("selective scan: A diagonal must be strictly negative")


def naive_selective_recurrence(u, delta, A, B_seq, C_seq, D_skip,
                               mode: str = "zoh", return_states: bool = False):
    """Step-by-step selective recurrence, the defining oracle.

    All arguments are plain arrays; u and delta are (L, D_inner), A is
    (D_inner, N) negative diagonal values, B_seq and C_seq are (L, N),
    D_skip is (D_inner,). No precomputation, no batching: each channel walks
    its own recurrence exactly as written.
    """
    if mode not in MODES:
        raise ValueError(f"unknown scan mode {mode!r}")
    u = np.asarray(u)
    delta = np.asarray(delta)
    A = np.asarray(A)
    B_seq = np.asarray(B_seq)
    C_seq = np.asarray(C_seq)
    D_skip = np.asarray(D_skip)
    if u.ndim != 2:
        raise ShapeError(f"naive recurrence: u must be (L, D_inner), got {u.shape}")
    _check_scan_args(u, delta, A, B_seq, C_seq, D_skip)
    L, D = u.shape
    N = A.shape[1]
    h = np.zeros((D, N), dtype=u.dtype)
    y = np.empty((L, D), dtype=u.dtype)
    states = np.empty((L, D, N), dtype=u.dtype) if return_states else None
    for t in range(L):
        for d in range(D):
            z = delta[t, d] * A[d]
            a_bar = np.exp(z)
            if mode == "zoh":
                b_bar = np.expm1(z) / A[d] * B_seq[t]
            else:
                b_bar = delta[t, d] * B_seq[t]
            h[d] = a_bar * h[d] + b_bar * u[t, d]
            y[t, d] = C_seq[t] @ h[d] + D_skip[d] * u[t, d]
        if return_states:
            states[t] = h
    if return_states:
        return y, states
    return y


# ---------------------------------------------------------------------------
# selective scan: fused differentiable kernel
# ---------------------------------------------------------------------------

def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B_seq: Tensor,
                   C_seq: Tensor, D_skip: Tensor, mode: str = "zoh") -> Tensor:
    """Fused selective scan with a hand-derived backward pass.

    Accepts (L, D_inner) inputs with (L, N) projections, or a stacked batch
    (G, L, D_inner) with (G, L, N) projections; A (D_inner, N) and D_skip
    (D_inner,) are shared across the batch. The per-step transition
    exp(delta A) and input injection are precomputed; only the state update
    itself runs sequentially, so work is linear in L.
    """
    if mode not in MODES:
        raise ValueError(f"unknown scan mode {mode!r}")
    squeeze = u.ndim == 2
    if u.ndim not in (2, 3):
        raise ShapeError(f"selective_scan: u must be (L, D) or (G, L, D), got {u.shape}")
    _check_scan_args(u.data, delta.data, A.data, B_seq.data, C_seq.data, D_skip.data)

    ud = u.data if not squeeze else u.data[None]
    dd = delta.data if not squeeze else delta.data[None]
    Bd = B_seq.data if not squeeze else B_seq.data[None]
    Cd = C_seq.data if not squeeze else C_seq.data[None]
    if Bd.ndim != 3 or Bd.shape[0] != ud.shape[0]:
        raise ShapeError(f"selective_scan: B_seq batch {B_seq.shape} vs u {u.shape}")
    Ad = A.data
    Dd = D_skip.data
    G, L, D = ud.shape
    N = Ad.shape[1]

    z = dd[..., None] * Ad                       # (G, L, D, N)
    a_bar = np.exp(z)
    if mode == "zoh":
        coef = (dd[..., None] * _phi(z)).astype(ud.dtype)
    else:
        coef = np.broadcast_to(dd[..., None], z.shape).astype(ud.dtype)
    X = coef * Bd[:, :, None, :] * ud[..., None]  # injected input, (G, L, D, N)

    hs = np.empty((G, L, D, N), dtype=ud.dtype)
    h = np.zeros((G, D, N), dtype=ud.dtype)
    for t in range(L):
        h = a_bar[:, t] * h + X[:, t]
        hs[:, t] = h
    y = np.einsum("gldn,gln->gld", hs, Cd, optimize=True) + Dd * ud

    def backward(gy):
        if squeeze:
            gy = gy[None]
        gD = np.einsum("gld,gld->d", gy, ud, optimize=True)
        gu = gy * Dd
        gC = np.einsum("gld,gldn->gln", gy, hs, optimize=True)
        ghs = gy[..., None] * Cd[:, :, None, :]

        gX = np.empty_like(X)
        gab = np.empty_like(a_bar)
        gh = np.zeros((G, D, N), dtype=ud.dtype)
        for t in range(L - 1, -1, -1):
            gh = gh + ghs[:, t]
            gX[:, t] = gh
            gab[:, t] = gh * hs[:, t - 1] if t > 0 else 0.0
            gh = gh * a_bar[:, t]

        gcoef = gX * Bd[:, :, None, :] * ud[..., None]
        gB = np.einsum("gldn,gldn->gln", gX, coef * ud[..., None], optimize=True)
        gu += np.einsum("gldn,gldn->gld", gX, coef * Bd[:, :, None, :], optimize=True)

        gz = gab * a_bar                          # through a_bar = exp(z)
        if mode == "zoh":
            # coef = delta phi(delta A): d/d delta = exp(delta A), d/dA = delta^2 psi
            gdelta = (gz * Ad).sum(-1) + (gcoef * a_bar).sum(-1)
            gA = (gz * dd[..., None]).sum((0, 1)) \
                + (gcoef * (dd[..., None] ** 2) * _psi(z)).sum((0, 1))
        else:
            gdelta = (gz * Ad).sum(-1) + gcoef.sum(-1)
            gA = (gz * dd[..., None]).sum((0, 1))

        if squeeze:
            return (gu[0], gdelta[0], gA.astype(ud.dtype), gB[0], gC[0], gD)
        return (gu, gdelta, gA.astype(ud.dtype), gB, gC, gD)

    out = y[0] if squeeze else y
    return record(out, (u, delta, A, B_seq, C_seq, D_skip), backward, "selective_scan")
