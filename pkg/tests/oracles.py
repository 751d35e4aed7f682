"""Independent brute-force references: direct solves, no incremental updates."""

import numpy as np

from ntkcpl.model import MLPParams, forward


def kernel_regression(gram, f0, labeled, Y, query, ridge=0.0):
    """t = inf kernel regression by a direct linear solve."""
    L = list(labeled)
    A = gram[np.ix_(L, L)] + ridge * np.eye(len(L))
    alpha = np.linalg.solve(A, Y - f0[L])
    return f0[query] + gram[np.ix_(query, L)] @ alpha


def risk_rebuild(gram, f0, labeled, cpl, scored, ridge, n_classes):
    """0-1 disagreement of the rebuilt predictor with CPL over ``scored``."""
    Y = np.eye(n_classes)[np.asarray(cpl)[list(labeled)]]
    F0 = np.zeros((gram.shape[0], n_classes)) if not np.any(f0) else f0
    pred = kernel_regression(gram, F0, labeled, Y, scored, ridge)
    return int(np.sum(np.argmax(pred, 1) != np.asarray(cpl)[scored]))


def naive_ntkcpl(gram, f0, labeled, cpl, candidates, b, ridge, n_classes):
    """Greedy risk minimization rebuilding the whole system per candidate."""
    L = list(labeled)
    remaining = list(candidates)
    picked = []
    for _ in range(b):
        risks = [risk_rebuild(gram, f0, L + [c], cpl, candidates, ridge, n_classes) for c in remaining]
        j = int(np.argmin(risks))
        picked.append(remaining.pop(j))
        L.append(picked[-1])
    return picked


def random_psd(rng, n, rank=None):
    A = rng.standard_normal((n, rank or n + 2))
    return A @ A.T


def fd_jacobian(params, x, step=1e-4):
    """Central finite differences of every logit w.r.t. the scheme's parameters."""
    theta = params.flat()
    scale = params.gradient_scale()
    kw = dict(init_scheme=params.init_scheme, zero_output_init=params.zero_output_init)
    out = np.empty((params.num_outputs, theta.size))
    for p in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        # a unit step in the trained parameter moves the stored weight by ``scale``
        up[p] += step * scale[p]
        dn[p] -= step * scale[p]
        fu = forward(MLPParams.from_flat(up, params.d, params.h, params.num_outputs, **kw), x)[0]
        fd = forward(MLPParams.from_flat(dn, params.d, params.h, params.num_outputs, **kw), x)[0]
        out[:, p] = (fu - fd) / (2 * step)
    return out
