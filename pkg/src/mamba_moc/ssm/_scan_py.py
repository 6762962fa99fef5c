"""Pure numpy scan kernels, used when the compiled extension is unavailable.

Linear recurrence: ``a``, ``b`` are (M, L, D, N) decay and injection terms,
``c`` the (M, L, N) readout shared across the D channels, ``h0`` (M, D, N).

Selective scan: ``x``, ``delta`` are (M, L, D); ``A`` is (Ka, D, N) and
sequence m uses ``A[m % Ka]``; ``B``, ``C`` are (M, L, N). Discretization is
zero-order hold with the first-order limit below ``TAYLOR_THRESHOLD``.
"""
import numpy as np

TAYLOR_THRESHOLD = 1e-6


def scan_forward(a, b, c, h0):
    """h_t = a_t * h_{t-1} + b_t and y_t = sum_n c_t[n] h_t[:, n]; returns (y, hs)."""
    m, length, d, n = a.shape
    hs = np.empty_like(a)
    h = h0.copy()
    for t in range(length):
        h = a[:, t] * h + b[:, t]
        hs[:, t] = h
    y = np.einsum("mldn,mln->mld", hs, c)
    return y, hs


def scan_backward(a, c, hs, h0, gy):
    """Gradients of the scan w.r.t. (a, b, c, h0) given dLoss/dy."""
    m, length, d, n = a.shape
    ga = np.empty_like(a)
    gb = np.empty_like(a)
    gc = np.einsum("mld,mldn->mln", gy, hs)
    gh = np.zeros((m, d, n), dtype=a.dtype)
    for t in range(length - 1, -1, -1):
        gh = gh + gy[:, t, :, None] * c[:, t, None, :]
        gb[:, t] = gh
        ga[:, t] = gh * (hs[:, t - 1] if t > 0 else h0)
        gh = gh * a[:, t]
    return ga, gb, gc, gh


def _per_sequence_a(A, m):
    ka = A.shape[0]
    return np.tile(A, (m // ka, 1, 1))[:, None]


def _zoh(delta, a):
    z = delta * a
    a_bar = np.exp(z)
    small = np.abs(z) < TAYLOR_THRESHOLD
    phi = np.where(small, delta, np.expm1(z) / np.where(small, 1, a))
    return z, a_bar, phi, small


def _dphi_da(z, delta, small):
    # d/dA [(exp(delta A) - 1) / A] = delta^2 (z e^z - expm1 z) / z^2
    near = np.abs(z) < 1e-2
    zs = np.where(near, 1, z)
    direct = (zs * np.exp(zs) - np.expm1(zs)) / (zs * zs)
    series = 0.5 + z / 3 + z * z / 8 + z * z * z / 30
    return np.where(small, 0, delta * delta * np.where(near, series, direct))


def selective_forward(x, delta, A, B, C):
    """Returns y (M, L, D) and the cache (hs, a_bar, phi), each (M, L, D, N)."""
    m = x.shape[0]
    _, a_bar, phi, _ = _zoh(delta[..., None], _per_sequence_a(A, m))
    a_bar = np.ascontiguousarray(a_bar, dtype=x.dtype)
    phi = np.ascontiguousarray(phi, dtype=x.dtype)
    bx = phi * B[:, :, None, :] * x[..., None]
    h0 = np.zeros((m, x.shape[2], A.shape[2]), dtype=x.dtype)
    y, hs = scan_forward(a_bar, bx, C, h0)
    return y, (hs, a_bar, phi)


def selective_backward(x, delta, A, B, C, hs, a_bar, phi, gy):
    m, _, d = x.shape
    ka, _, n = A.shape
    a_seq = _per_sequence_a(A, m)
    dl = delta[..., None]
    z = dl * a_seq
    small = np.abs(z) < TAYLOR_THRESHOLD
    h0 = np.zeros((m, d, n), dtype=x.dtype)
    ga, gb, gc, _ = scan_backward(a_bar, C, hs, h0, gy)
    b_in = B[:, :, None, :]
    u = x[..., None]
    g_phi = gb * b_in * u
    g_z = ga * a_bar
    g_delta = (g_z * a_seq + g_phi * np.where(small, 1, a_bar)).sum(axis=-1)
    g_a_seq = (g_z * dl + g_phi * _dphi_da(z, dl, small)).sum(axis=1)
    g_a = g_a_seq.reshape(m // ka, ka, d, n).sum(axis=0)
    inj = gb * phi
    g_b = (inj * u).sum(axis=-2)
    g_x = (inj * b_in).sum(axis=-1)
    dt = x.dtype
    return g_x.astype(dt), g_delta.astype(dt), g_a.astype(dt), g_b.astype(dt), gc.astype(dt)
