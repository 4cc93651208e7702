"""
Dense linear algebra and differentiable-scalar helpers shared by the rest of
the package. A Matrix here is a 2-D float64 numpy array; every public
function rejects non-finite input so nothing downstream ever sees NaN/Inf.
"""

import logging
import warnings

import numpy as np
import scipy.linalg
import scipy.special

LOGGER = logging.getLogger(__name__)

PIVOT_FLOOR = 1e-300
KL_FLOOR = 1e-12
SYMMETRY_TOL = 1e-9


class DimensionMismatchError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class SingularMatrixError(RuntimeError):
    pass


def as_matrix(data, name='matrix'):
    """
    Check and convert something to a finite 2-D float64 array.

    :param data: array-like
    :param name: used in error messages
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatchError('%s must be 2-D, got shape %s' % (
            name, arr.shape))
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError('%s has non-finite entries' % name)
    return arr


def as_vector(data, name='vector'):
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatchError('%s must be 1-D, got shape %s' % (
            name, arr.shape))
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError('%s has non-finite entries' % name)
    return arr


def matmul(a, b):
    """
    Matrix product.

    :param a: rows x k Matrix
    :param b: k x cols Matrix
    :return: rows x cols Matrix
    """
    a = as_matrix(a, 'a')
    b = as_matrix(b, 'b')
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatchError('Cannot multiply %s by %s' % (
            a.shape, b.shape))
    return a @ b


def gram(a):
    """
    The Gram matrix A^T A of the columns of a.

    :param a: n x k Matrix, vectors as columns
    """
    a = as_matrix(a, 'a')
    if a.size == 0:
        raise DimensionMismatchError('Gram matrix of an empty matrix')
    return matmul(a.T, a)


def _square(g, name='g'):
    g = as_matrix(g, name)
    if g.shape[0] != g.shape[1]:
        raise DimensionMismatchError('%s must be square, got %s' % (
            name, g.shape))
    return g


def lu_factor(g):
    """
    LU factorisation with partial pivoting.

    :param g: square Matrix
    :return: (lu, piv) as scipy.linalg.lu_factor gives them
    """
    g = _square(g)
    with warnings.catch_warnings():
        # exactly-singular inputs are legal here, callers inspect the pivots
        warnings.simplefilter('ignore', scipy.linalg.LinAlgWarning)
        return scipy.linalg.lu_factor(g, check_finite=False)


def det(g):
    """
    Determinant via LU with partial pivoting. Callers taking a square root
    of a Gram determinant clamp with max(det, 0) themselves.

    :param g: square Matrix
    """
    lu, piv = lu_factor(g)
    swaps = np.count_nonzero(piv != np.arange(piv.size))
    sign = -1.0 if swaps % 2 else 1.0
    return float(sign * np.prod(np.diag(lu)))


def inverse_regularized(g, eps=0.0):
    """
    (G + eps*I)^-1 via the same LU machinery.

    :param g: symmetric square Matrix
    :param eps: non-negative ridge added to the diagonal
    """
    g = _square(g)
    if eps < 0:
        raise ValueError('eps must be >= 0, got %s' % eps)
    scale = max(1.0, float(np.max(np.abs(g))) if g.size else 1.0)
    if np.max(np.abs(g - g.T)) > SYMMETRY_TOL * scale:
        raise ValueError('inverse_regularized expects a symmetric matrix')
    k = g.shape[0]
    lu, piv = lu_factor(g + eps * np.eye(k))
    pivots = np.abs(np.diag(lu))
    if np.min(pivots) < PIVOT_FLOOR:
        raise SingularMatrixError(
            'Matrix is singular even with eps=%g (smallest pivot %g at %i)' % (
                eps, np.min(pivots), int(np.argmin(pivots))))
    return scipy.linalg.lu_solve((lu, piv), np.eye(k), check_finite=False)


def det_stack(g):
    """
    Determinants of a stack of square matrices, shape (..., k, k) -> (...).
    LAPACK getrf (LU with partial pivoting) under the hood.
    """
    return np.linalg.det(g)


def inverse_regularized_stack(g, eps):
    """
    (G + eps*I)^-1 for a stack of square matrices, shape (..., k, k).
    """
    k = g.shape[-1]
    eye = np.eye(k)
    return np.linalg.solve(g + eps * eye, np.broadcast_to(eye, g.shape))


def log_softmax(logits, axis=-1):
    """
    Max-shifted log-sum-exp log softmax.

    :param logits: float vector (or array, reduced along axis)
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0 or logits.shape[axis] == 0:
        raise ValueError('log_softmax of an empty vector')
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError('log_softmax input has non-finite entries')
    return scipy.special.log_softmax(logits, axis=axis)


def softmax(logits, axis=-1):
    return np.exp(log_softmax(logits, axis=axis))


def kl_divergence(p, q):
    """
    KL(p || q) = sum_i p_i ln(p_i / q_i), with 0 ln 0 = 0 and q floored at
    1e-12.

    :param p: probability vector
    :param q: probability vector, same length
    """
    p = as_vector(p, 'p')
    q = as_vector(q, 'q')
    if p.shape != q.shape:
        raise DimensionMismatchError('KL of lengths %i and %i' % (
            p.size, q.size))
    for name, vec in (('p', p), ('q', q)):
        if abs(vec.sum() - 1.0) > 1e-9 or np.any(vec < 0):
            raise ValueError('%s is not a probability vector (sum %.12f)' % (
                name, vec.sum()))
    q = np.maximum(q, KL_FLOOR)
    support = p > 0
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


class GradReport(object):
    """
    Analytic vs central-difference gradient comparison.
    """
    def __init__(self, analytic, numeric):
        self.analytic = np.asarray(analytic, dtype=np.float64).ravel()
        self.numeric = np.asarray(numeric, dtype=np.float64).ravel()
        if self.analytic.shape != self.numeric.shape:
            raise DimensionMismatchError('analytic has %i entries, numeric '
                                         '%i' % (self.analytic.size,
                                                 self.numeric.size))
        diff = np.abs(self.analytic - self.numeric)
        denom = np.maximum(np.maximum(np.abs(self.analytic),
                                      np.abs(self.numeric)), 1e-8)
        self.max_abs_err = float(diff.max()) if diff.size else 0.0
        self.max_rel_err = float((diff / denom).max()) if diff.size else 0.0

    def __repr__(self):
        return 'GradReport(n=%i, max_rel_err=%.3e, max_abs_err=%.3e)' % (
            self.analytic.size, self.max_rel_err, self.max_abs_err)


def grad_check(f, x, analytic, h=1e-5):
    """
    Compare an analytic gradient to central finite differences.

    :param f: scalar function of a float vector
    :param x: the point, float vector
    :param analytic: the claimed gradient at x
    :param h: step, > 0
    :return: GradReport
    """
    if h <= 0:
        raise ValueError('h must be > 0, got %s' % h)
    x = as_vector(x, 'x').copy()
    numeric = np.zeros_like(x)
    for idx in range(x.size):
        orig = x[idx]
        x[idx] = orig + h
        f_plus = f(x)
        x[idx] = orig - h
        f_minus = f(x)
        x[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError('f is not finite around index %i' % idx)
        numeric[idx] = (f_plus - f_minus) / (2.0 * h)
    return GradReport(analytic, numeric)

# end
