"""Discrete linear state-space scan shared by correlation balancing and the
clip-window optimizer.

Every feature channel is an independent scalar sequence driven through the
same state-space model ``h_t = A h_{t-1} + B u_t``, ``y_t = C h_t`` with
``h_0 = 0`` and an ``n``-dimensional hidden state. The scan is evaluated as a
causal convolution with the kernel ``(CB, CAB, CA²B, ...)``.
"""

from __future__ import annotations

import numpy as np

from . import engine as E

SPECTRAL_LIMIT = 0.999


class SSM:
    """State-space parameters; ``dense=False`` keeps ``A`` diagonal."""

    def __init__(self, store, path, n_state, rng, dense=False):
        self.path = path
        self.dense = dense
        self.n = n_state
        if dense:
            A = np.diag(rng.uniform(0.3, 0.9, n_state)) + rng.normal(0, 0.02, (n_state, n_state))
            self.A = store.add(f"{path}/A", A)
        else:
            self.A = store.add(f"{path}/A", rng.uniform(0.3, 0.9, n_state))
        scale = 1.0 / np.sqrt(n_state)
        self.B = store.add(f"{path}/B", scale * (1.0 + 0.1 * rng.normal(size=n_state)))
        self.C = store.add(f"{path}/C", scale * (1.0 + 0.1 * rng.normal(size=n_state)))
        clamp_spectral(self)

    def kernel(self, T):
        """Kernel values ``K[k] = C A^k B`` for ``k < T`` as a ``(T,)`` Value."""
        terms = []
        v = self.B
        for k in range(T):
            if k:
                v = E.mul(self.A, v) if not self.dense else E.reshape(
                    E.matmul(self.A, E.reshape(v, (self.n, 1))), (self.n,))
            terms.append(E.reshape(E.sum(E.mul(self.C, v)), (1,)))
        return E.concat(terms, axis=0)

    def numpy_params(self):
        A = self.A.data if self.dense else np.diag(self.A.data)
        return A, self.B.data.copy(), self.C.data.copy()

    def __call__(self, x):
        return ssm_scan(x, self)


def toeplitz_lower(kernel, T):
    """``M[t, s] = K[t - s]`` for ``s <= t`` and 0 above the diagonal."""
    t = np.arange(T)
    lag = t[:, None] - t[None, :]
    idx = np.where(lag >= 0, lag, T)
    padded = E.concat([kernel, E.Value(np.zeros(1))], axis=0)
    return E.gather(padded, idx)


def ssm_scan(x, ssm):
    """Scan an ``(T, C)`` or ``(B, T, C)`` sequence along its time axis."""
    x = E.as_value(x)
    T = x.shape[-2]
    M = toeplitz_lower(ssm.kernel(T), T)
    return E.matmul(M, x)


def ssm_recursive(u, A, B, C):
    """Reference recursion over a ``(T, channels)`` array; one scalar SSM per channel."""
    u = np.asarray(u, dtype=np.float64)
    T, ch = u.shape
    h = np.zeros((ch, len(B)))
    out = np.empty_like(u)
    for t in range(T):
        h = h @ A.T + u[t][:, None] * B[None, :]
        out[t] = h @ C
    return out


def clamp_spectral(ssm, limit=SPECTRAL_LIMIT):
    """Keep the spectral radius of ``A`` at or below ``limit``."""
    A = ssm.A.data
    if not ssm.dense:
        ssm.A.data = np.clip(A, -limit, limit)
        return
    rho = np.max(np.abs(np.linalg.eigvals(A)))
    if rho > limit:
        ssm.A.data = A * (limit / rho)
