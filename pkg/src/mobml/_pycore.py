"""NumPy fallback for the compiled pair-block kernels in ``_core.pyx``.

Same signatures and semantics; ``num_threads`` is accepted and ignored.
Vectorized over every (batch, pair) combination at once.
"""
import numpy as np


def _pairs(pos):
    n = pos.shape[1]
    I, J = np.tril_indices(n, -1)
    r = pos[:, I, :] - pos[:, J, :]
    return I, J, r


def _scatter(out, I, J, blocks):
    """Write (K, P, 3, 3) symmetric blocks into (i, j) and (j, i)."""
    K, dim = out.shape[0], out.shape[1]
    n = dim // 3
    view = out.reshape(K, n, 3, n, 3).transpose(1, 3, 0, 2, 4)
    b = blocks.transpose(1, 0, 2, 3)
    view[I, J] = b
    view[J, I] = b.transpose(0, 1, 3, 2)


def _unit(r):
    rn = np.sqrt((r[..., 0] * r[..., 0] + r[..., 1] * r[..., 1]) + r[..., 2] * r[..., 2])
    bad = int(np.count_nonzero(rn == 0.0))
    safe = np.where(rn == 0.0, 1.0, rn)
    return rn, r / safe[..., None], bad


def _iso_blocks(alpha, beta, u):
    uu = u[..., :, None] * u[..., None, :]
    return alpha[..., None, None] * np.eye(3) + beta[..., None, None] * uu


def _write_valid(out, I, J, blocks, rn):
    ok = rn != 0.0
    if ok.all():
        _scatter(out, I, J, blocks)
        return
    # keep untouched entries for coincident pairs, matching the compiled path
    K, dim = out.shape[0], out.shape[1]
    n = dim // 3
    view = out.reshape(K, n, 3, n, 3)
    for k, p in zip(*np.nonzero(ok)):
        view[k, I[p], :, J[p], :] = blocks[k, p]
        view[k, J[p], :, I[p], :] = blocks[k, p].T


def oseen_pairs(pos, out, prefactor, r_min, num_threads=1):
    if pos.shape[1] < 2:
        return 0
    I, J, r = _pairs(pos)
    rn, u, bad = _unit(r)
    reff = np.maximum(rn, r_min)
    c = prefactor / np.where(reff == 0.0, 1.0, reff)
    _write_valid(out, I, J, _iso_blocks(c, c, u), rn)
    return bad


def table_pairs(pos, out, radii, alpha, beta, num_threads=1):
    if pos.shape[1] < 2:
        return 0
    I, J, r = _pairs(pos)
    rn, u, bad = _unit(r)
    m = radii.shape[0]
    lo = np.clip(np.searchsorted(radii, rn, side="right") - 1, 0, max(m - 2, 0))
    hi = np.minimum(lo + 1, m - 1)
    t = rn - radii[lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        a = (alpha[hi] - alpha[lo]) / (radii[hi] - radii[lo]) * t + alpha[lo]
        b = (beta[hi] - beta[lo]) / (radii[hi] - radii[lo]) * t + beta[lo]
    below = rn <= radii[0]
    above = rn >= radii[m - 1]
    a = np.where(below, alpha[0], np.where(above, alpha[m - 1], a))
    b = np.where(below, beta[0], np.where(above, beta[m - 1], b))
    _write_valid(out, I, J, _iso_blocks(a, b, u), rn)
    return bad


def softplus(x):
    return np.where(x > 0.0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))


def lower_factor_blocks(r, centers, weights, bandwidth, positive_diagonal=False):
    """(..., 3) separations -> (..., 3, 3) lower-triangular RBF factors."""
    d = r[..., None, :] - centers
    d2 = (d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]) + d[..., 2] * d[..., 2]
    phi = np.exp(-d2 * (1.0 / (2.0 * bandwidth * bandwidth)))
    ent = phi @ weights
    if positive_diagonal:
        ent = ent.copy()
        ent[..., [0, 2, 5]] = softplus(ent[..., [0, 2, 5]])
    L = np.zeros(ent.shape[:-1] + (3, 3))
    L[..., 0, 0] = ent[..., 0]
    L[..., 1, 0] = ent[..., 1]
    L[..., 1, 1] = ent[..., 2]
    L[..., 2, 0] = ent[..., 3]
    L[..., 2, 1] = ent[..., 4]
    L[..., 2, 2] = ent[..., 5]
    return L


def kernel_pairs(pos, out, centers, weights, bandwidth, positive_diagonal=False,
                 num_threads=1):
    if pos.shape[1] < 2:
        return 0
    I, J, r = _pairs(pos)
    L = lower_factor_blocks(r, centers, weights, bandwidth, positive_diagonal)
    _scatter(out, I, J, llt_blocks(L))
    return 0


def llt_blocks(L):
    """Exactly symmetric ``L L^T`` for lower-triangular (..., 3, 3) factors."""
    l0, l1, l2 = L[..., 0, 0], L[..., 1, 0], L[..., 1, 1]
    l3, l4, l5 = L[..., 2, 0], L[..., 2, 1], L[..., 2, 2]
    b01, b02, b12 = l0 * l1, l0 * l3, l1 * l3 + l2 * l4
    return np.stack([
        np.stack([l0 * l0, b01, b02], -1),
        np.stack([b01, l1 * l1 + l2 * l2, b12], -1),
        np.stack([b02, b12, (l3 * l3 + l4 * l4) + l5 * l5], -1),
    ], -2)
