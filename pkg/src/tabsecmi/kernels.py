"""Hot inner loops, each with a numba kernel and a numpy equivalent.

Dispatchers at the bottom pick the numba kernel unless the
``TABSECMI_DISABLE_NUMBA`` flag is set. Both paths compute the same values up
to floating-point summation order.
"""
import numpy as np

from ._accel import jit, use_numba


# ---------------------------------------------------------------------------
# nearest-record distances


@jit
def _min_sq_dist_nb(query, ref):
    n, d = query.shape
    m = ref.shape[0]
    out = np.empty(n)
    for i in range(n):
        best = np.inf
        for j in range(m):
            acc = 0.0
            for k in range(d):
                diff = query[i, k] - ref[j, k]
                acc += diff * diff
                if acc >= best:
                    break
            if acc < best:
                best = acc
        out[i] = best
    return out


def _min_sq_dist_np(query, ref, block=512):
    out = np.empty(query.shape[0])
    for start in range(0, query.shape[0], block):
        q = query[start:start + block]
        diff = q[:, None, :] - ref[None, :, :]
        out[start:start + block] = np.einsum("ijk,ijk->ij", diff, diff).min(axis=1)
    return out


# ---------------------------------------------------------------------------
# 1-D convolution, kernel 3 / stride 1 / zero padding 1
#
# x: (n, c_in, w), weight: (c_out, c_in, 3), bias: (c_out,)


@jit
def _conv1d_forward_nb(x, weight, bias):
    n, c_in, w = x.shape
    c_out = weight.shape[0]
    out = np.empty((n, c_out, w))
    for b in range(n):
        for o in range(c_out):
            for p in range(w):
                acc = bias[o]
                for c in range(c_in):
                    acc += weight[o, c, 1] * x[b, c, p]
                    if p > 0:
                        acc += weight[o, c, 0] * x[b, c, p - 1]
                    if p < w - 1:
                        acc += weight[o, c, 2] * x[b, c, p + 1]
                out[b, o, p] = acc
    return out


@jit
def _conv1d_backward_nb(x, weight, grad_out):
    n, c_in, w = x.shape
    c_out = weight.shape[0]
    grad_x = np.zeros_like(x)
    grad_w = np.zeros_like(weight)
    grad_b = np.zeros(c_out)
    for b in range(n):
        for o in range(c_out):
            for p in range(w):
                g = grad_out[b, o, p]
                grad_b[o] += g
                for c in range(c_in):
                    grad_w[o, c, 1] += g * x[b, c, p]
                    grad_x[b, c, p] += g * weight[o, c, 1]
                    if p > 0:
                        grad_w[o, c, 0] += g * x[b, c, p - 1]
                        grad_x[b, c, p - 1] += g * weight[o, c, 0]
                    if p < w - 1:
                        grad_w[o, c, 2] += g * x[b, c, p + 1]
                        grad_x[b, c, p + 1] += g * weight[o, c, 2]
    return grad_x, grad_w, grad_b


def _im2col(x):
    # (n, c, w) -> (n, w, c*3) with column order (c, k)
    n, c, w = x.shape
    padded = np.zeros((n, c, w + 2))
    padded[:, :, 1:-1] = x
    cols = np.stack([padded[:, :, k:k + w] for k in range(3)], axis=-1)  # n, c, w, 3
    return cols.transpose(0, 2, 1, 3).reshape(n, w, c * 3)


def _conv1d_forward_np(x, weight, bias):
    c_out = weight.shape[0]
    cols = _im2col(x)
    out = cols @ weight.reshape(c_out, -1).T + bias
    return out.transpose(0, 2, 1).copy()


def _conv1d_backward_np(x, weight, grad_out):
    n, c_in, w = x.shape
    c_out = weight.shape[0]
    cols = _im2col(x)
    g = grad_out.transpose(0, 2, 1)  # n, w, c_out
    grad_w = np.einsum("nwo,nwk->ok", g, cols).reshape(weight.shape)
    grad_b = g.sum(axis=(0, 1))
    grad_cols = (g @ weight.reshape(c_out, -1)).reshape(n, w, c_in, 3)
    grad_x = np.zeros((n, c_in, w + 2))
    for k in range(3):
        grad_x[:, :, k:k + w] += grad_cols[..., k].transpose(0, 2, 1)
    return grad_x[:, :, 1:-1].copy(), grad_w, grad_b


# ---------------------------------------------------------------------------
# dispatch


def min_sq_dist(query, ref):
    """Squared Euclidean distance from each query row to its nearest ``ref`` row."""
    query = np.ascontiguousarray(query, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    if use_numba():
        return _min_sq_dist_nb(query, ref)
    return _min_sq_dist_np(query, ref)


def conv1d_forward(x, weight, bias):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if use_numba():
        return _conv1d_forward_nb(x, np.ascontiguousarray(weight), np.ascontiguousarray(bias))
    return _conv1d_forward_np(x, weight, bias)


def conv1d_backward(x, weight, grad_out):
    """Return ``(grad_x, grad_weight, grad_bias)`` for :func:`conv1d_forward`."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    if use_numba():
        return _conv1d_backward_nb(x, np.ascontiguousarray(weight), grad_out)
    return _conv1d_backward_np(x, weight, grad_out)
