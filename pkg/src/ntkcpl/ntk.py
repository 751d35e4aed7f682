"""Empirical-NTK kernel regression over a fixed set of sample positions.

A :class:`KernelSystem` holds the gram matrix over M positions (the
candidate set plus the labeled set), the network outputs at
initialization, the ordered labeled positions and the inverse of the
ridge-regularized labeled block. The kernel is the scalar one built from
a single output head and shared by all output dimensions, so every class
column is regressed independently with the same weights.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import FormatError, NumericalRankError, PreconditionError
from .model import MLPParams, forward

# relative pivot threshold below which a ridge-free block is declared singular
RANK_TOL = 1e-10


@dataclass(frozen=True)
class KernelSystem:
    gram: np.ndarray
    f0: np.ndarray
    labeled: tuple = ()
    inv_labeled: np.ndarray = None
    ridge: float = 0.0
    time: float = math.inf

    def __post_init__(self):
        if self.inv_labeled is None:
            object.__setattr__(self, "inv_labeled", np.zeros((0, 0)))
        object.__setattr__(self, "labeled", tuple(int(i) for i in self.labeled))

    @property
    def size(self) -> int:
        return self.gram.shape[0]

    def with_labeled(self, labeled) -> "KernelSystem":
        """Return a copy whose labeled block is ``labeled``, inverted from scratch.

        At finite time a singular block is accepted: prediction goes through
        the eigendecomposition and never needs the inverse, which is then
        left as NaN so that incremental updates refuse to run on it.
        """
        labeled = tuple(int(i) for i in labeled)
        if len(set(labeled)) != len(labeled):
            raise PreconditionError("labeled positions must be distinct")
        try:
            inv = direct_inverse(self.gram, labeled, self.ridge)
        except NumericalRankError:
            if math.isinf(self.time):
                raise
            inv = np.full((len(labeled), len(labeled)), np.nan)
        return replace(self, labeled=labeled, inv_labeled=inv)


DEFAULT_RIDGE_SCALE = 1e-4


def default_ridge(gram: np.ndarray, scale: float = DEFAULT_RIDGE_SCALE) -> float:
    return scale * float(np.trace(gram)) / gram.shape[0]


def mlp_gram(params: MLPParams, X, head: int = 0) -> np.ndarray:
    """Gram of single-head Jacobians, computed without materializing them.

    With ``m`` the ReLU gate, ``phi`` the hidden activations and ``s1``, ``s2``
    the squared weight-gradient factors of the init scheme (1/d and 1/h
    under the NTK parameterization, else 1),
    ``<J(x), J(x')> = sum_k W2[k,head]^2 m_k(x) m_k(x') (s1 x.x' + 1) + s2 phi(x).phi(x') + 1``.
    """
    X = np.asarray(X, dtype=np.float64)
    pre = X @ params.W1 + params.b1
    phi = np.maximum(pre, 0.0)
    gate = (pre > 0).astype(np.float64) * params.W2[:, head]
    s1, s2 = (1.0 / params.d, 1.0 / params.h) if params.init_scheme == "ntk_parameterization" else (1.0, 1.0)
    gram = (gate @ gate.T) * (s1 * (X @ X.T) + 1.0) + s2 * (phi @ phi.T) + 1.0
    return 0.5 * (gram + gram.T)


def compute_gram(params: MLPParams, X, ridge: float | None = None, time: float = math.inf,
                 head: int = 0, ridge_scale: float = DEFAULT_RIDGE_SCALE) -> KernelSystem:
    """Build the kernel system (gram and initial outputs) over the rows of ``X``.

    ``ridge=None`` selects ``ridge_scale * trace(gram) / M`` (1e-4 by default).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise PreconditionError("compute_gram needs at least one input row")
    gram = mlp_gram(params, X, head)
    f0 = forward(params, X)
    if ridge is None:
        ridge = default_ridge(gram, ridge_scale)
    return KernelSystem(gram, f0, (), None, float(ridge), time)


def from_jacobian(J, f0, ridge: float = 0.0, time: float = math.inf) -> KernelSystem:
    """Kernel system for an arbitrary model given its per-sample Jacobian rows."""
    J = np.asarray(J, dtype=np.float64)
    gram = J @ J.T
    f0 = np.asarray(f0, dtype=np.float64)
    if f0.ndim == 1:
        f0 = f0[:, None]
    return KernelSystem(0.5 * (gram + gram.T), f0, (), None, float(ridge), time)


def direct_inverse(gram, labeled, ridge) -> np.ndarray:
    labeled = list(labeled)
    if not labeled:
        return np.zeros((0, 0))
    A = gram[np.ix_(labeled, labeled)] + ridge * np.eye(len(labeled))
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise NumericalRankError("labeled gram block is singular; use a positive ridge") from None
    if ridge == 0.0 and np.diag(L).min() ** 2 <= RANK_TOL * np.abs(np.diag(A)).max():
        raise NumericalRankError("labeled gram block is numerically rank deficient; use a positive ridge")
    Linv = np.linalg.inv(L)
    return Linv.T @ Linv


def _transfer(block: np.ndarray, ridge: float, t: float) -> np.ndarray:
    """(K + ridge I)^-1 (I - exp(-t K)) for a symmetric labeled block K."""
    if math.isinf(t):
        raise AssertionError("only used for finite t")
    lam, V = np.linalg.eigh(block)
    lam = np.clip(lam, 0.0, None)
    denom = lam + ridge
    safe = np.where(denom > 0, denom, 1.0)
    # limit of (1 - exp(-t lam)) / lam as lam -> 0 is t
    coef = np.where(denom > 0, -np.expm1(-t * lam) / safe, t)
    return (V * coef) @ V.T


def ntk_predict(sys: KernelSystem, labels, query=None, time: float | None = None) -> np.ndarray:
    """Closed-form NTK prediction at ``query`` positions after training on ``sys.labeled``.

    f_t(x) = f0(x) + K(x,L) (K(L,L) + ridge I)^-1 (I - exp(-t K(L,L))) (Y - f0(L)).
    ``labels`` is the |L| x C target matrix (typically one-hot).
    """
    t = sys.time if time is None else time
    query = np.arange(sys.size) if query is None else np.asarray(query, dtype=np.int64)
    L = list(sys.labeled)
    Y = np.asarray(labels, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != len(L):
        raise PreconditionError(f"{Y.shape[0]} label rows for {len(L)} labeled positions")
    if not L:
        raise PreconditionError("ntk_predict needs a nonempty labeled set")
    f0 = initial_outputs(sys, Y.shape[1])
    resid = Y - f0[L]
    if t == 0:
        return f0[query].copy()
    if math.isinf(t):
        alpha = sys.inv_labeled @ resid
    else:
        alpha = _transfer(sys.gram[np.ix_(L, L)], sys.ridge, t) @ resid
    return f0[query] + sys.gram[np.ix_(query, L)] @ alpha


def extend_labeled(sys: KernelSystem, new_index: int) -> KernelSystem:
    """Append one position to the labeled block via a Schur-complement update.

    O(|L|^2): with A^-1 known, u = A^-1 b and s = c - b.u, the bordered
    inverse is [[A^-1 + u u^T / s, -u / s], [-u^T / s, 1 / s]].
    """
    new_index = int(new_index)
    if new_index in sys.labeled:
        raise PreconditionError(f"position {new_index} is already labeled")
    if not 0 <= new_index < sys.size:
        raise PreconditionError(f"position {new_index} outside the kernel system")
    if not np.isfinite(sys.inv_labeled).all():
        raise NumericalRankError("labeled gram block is singular; use a positive ridge")
    L = list(sys.labeled)
    c = sys.gram[new_index, new_index] + sys.ridge
    b = sys.gram[L, new_index]
    u = sys.inv_labeled @ b
    s = c - b @ u
    if s <= 0 or (sys.ridge == 0.0 and s <= RANK_TOL * abs(c)):
        raise NumericalRankError(
            f"Schur complement {s:.3e} is not positive when adding position {new_index}; use a positive ridge")
    n = len(L)
    inv = np.empty((n + 1, n + 1))
    inv[:n, :n] = sys.inv_labeled + np.outer(u, u) / s
    inv[:n, n] = -u / s
    inv[n, :n] = -u / s
    inv[n, n] = 1.0 / s
    return replace(sys, labeled=tuple(L) + (new_index,), inv_labeled=inv)


def initial_outputs(sys: KernelSystem, num_outputs: int) -> np.ndarray:
    """f0 with ``num_outputs`` columns; an all-zero f0 broadcasts to any width."""
    if sys.f0.shape[1] == num_outputs:
        return sys.f0
    if not np.any(sys.f0):
        return np.zeros((sys.size, num_outputs))
    raise PreconditionError(
        f"initial outputs have {sys.f0.shape[1]} columns but targets have {num_outputs}")


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# Risk estimation


def current_fit(sys: KernelSystem, targets: np.ndarray):
    """Current t=inf prediction over all positions and the weight matrix A^-1 K(L, .)."""
    L = list(sys.labeled)
    f0 = initial_outputs(sys, targets.shape[1])
    if not L:
        return f0.copy(), np.zeros((0, sys.size))
    resid = targets[L] - f0[L]
    proj = sys.inv_labeled @ sys.gram[L, :]
    return f0 + proj.T @ resid, proj


def hypothetical_mismatches(sys: KernelSystem, targets: np.ndarray, cpl: np.ndarray, scored,
                            hypotheticals, hyp_labels=None, chunk: int = 64, n_jobs: int = 1) -> np.ndarray:
    """0-1 mismatch counts on ``scored`` positions for each one-point extension.

    For every position c in ``hypotheticals`` the t=inf predictor trained on
    L + {c} is evaluated over ``scored`` and compared (argmax, ties to the
    lowest class) with ``cpl``. ``targets`` is the M x C target matrix used
    for already-labeled positions; ``hyp_labels`` gives the class of each
    hypothetical (default: its own ``cpl`` entry). Uses the rank-one update
    F' = F + v r / s with v = K(., c) - K(., L) A^-1 K(L, c),
    s = K(c, c) + ridge - K(c, L) A^-1 K(L, c) and r = y_c - F(c).
    """
    scored = np.asarray(scored, dtype=np.int64)
    hyps = np.asarray(hypotheticals, dtype=np.int64)
    C = targets.shape[1]
    L = list(sys.labeled)
    if set(hyps.tolist()) & set(L):
        raise PreconditionError("a hypothetical position is already labeled")
    hyp_labels = cpl[hyps] if hyp_labels is None else np.asarray(hyp_labels, dtype=np.int64)
    if not math.isinf(sys.time):
        return _mismatches_finite_time(sys, targets, cpl, scored, hyps, hyp_labels)
    F, proj = current_fit(sys, targets)
    V = sys.gram[np.ix_(scored, hyps)]
    if L:
        V = V - sys.gram[np.ix_(scored, L)] @ proj[:, hyps]
    s = sys.gram[hyps, hyps] + sys.ridge
    if L:
        s = s - np.einsum("ij,ij->j", sys.gram[np.ix_(L, hyps)], proj[:, hyps])
    if np.any(s <= 0) or (sys.ridge == 0.0 and np.any(s <= RANK_TOL * np.abs(sys.gram[hyps, hyps]))):
        raise NumericalRankError("a hypothetical extension makes the labeled block singular; use a positive ridge")
    R = one_hot(hyp_labels, C) - F[hyps]
    Q = R / s[:, None]
    Fs = F[scored]
    truth = cpl[scored]

    def run(lo):
        hi = min(lo + chunk, len(hyps))
        pred = Fs[:, None, :] + V[:, lo:hi, None] * Q[None, lo:hi, :]
        return (np.argmax(pred, axis=2) != truth[:, None]).sum(axis=0)

    starts = range(0, len(hyps), chunk)
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(lo) for lo in starts]
    return np.concatenate(parts).astype(np.int64) if parts else np.zeros(0, dtype=np.int64)


def _mismatches_finite_time(sys, targets, cpl, scored, hyps, hyp_labels):
    # no rank-one shortcut for finite t: re-solve per hypothetical
    C = targets.shape[1]
    out = np.empty(len(hyps), dtype=np.int64)
    for j, (c, lab) in enumerate(zip(hyps, hyp_labels)):
        ext = extend_labeled(sys, int(c))
        Y = targets[list(sys.labeled)]
        Y = np.vstack([Y, one_hot([lab], C)])
        pred = ntk_predict(ext, Y, scored)
        out[j] = int((np.argmax(pred, axis=1) != cpl[scored]).sum())
    return out


def estimate_pool_risk(sys: KernelSystem, cpl, scored=None, hypothetical=None, num_classes=None) -> float:
    """Fraction of ``scored`` positions whose NTK argmax disagrees with their CPL class.

    The regression targets are one-hot CPL classes of the labeled positions
    (plus the optional hypothetical ``(position, label)`` pair). ``scored``
    defaults to every position; ``cpl`` must cover all positions.
    """
    cpl = np.asarray(cpl, dtype=np.int64)
    if cpl.shape != (sys.size,):
        raise PreconditionError("cpl must assign a class to every kernel position")
    C = int(cpl.max()) + 1 if num_classes is None else num_classes
    scored = np.arange(sys.size) if scored is None else np.asarray(scored, dtype=np.int64)
    targets = one_hot(cpl, C)
    if hypothetical is not None:
        pos, lab = hypothetical
        if int(pos) in sys.labeled:
            raise PreconditionError(f"hypothetical position {pos} is already labeled")
        if math.isinf(sys.time):
            miss = hypothetical_mismatches(sys, targets, cpl, scored, [pos], [lab])[0]
            return miss / len(scored)
        sys = extend_labeled(sys, pos)
        targets = targets.copy()
        targets[pos] = one_hot([lab], C)[0]
    if not sys.labeled:
        raise PreconditionError("risk estimation needs at least one labeled position")
    pred = ntk_predict(sys, targets[list(sys.labeled)], scored)
    return float(np.mean(np.argmax(pred, axis=1) != cpl[scored]))


# ---------------------------------------------------------------------------
# Gram dump: FEATv1-style header ("GRAM", version, M, M, 0, 0), float64 payload

_GRAM = struct.Struct("<4sIIIII")


def save_gram(sys: KernelSystem, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_GRAM.pack(b"GRAM", 1, sys.size, sys.size, 0, 0))
        fh.write(np.ascontiguousarray(sys.gram, dtype="<f8").tobytes())


def load_gram(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, m, m2, _, _ = _GRAM.unpack_from(raw)
    if magic != b"GRAM" or version != 1 or m != m2 or len(raw) != _GRAM.size + 8 * m * m:
        raise FormatError(f"{path}: not a gram dump")
    return np.frombuffer(raw, dtype="<f8", offset=_GRAM.size).reshape(m, m).copy()
