"""Dense linear-algebra helpers shared by the rest of the package.

Everything here works on float64 numpy arrays and is side-effect free.
"""
import numpy as np

# Singular values below RCOND * sigma_max are treated as zero.
RCOND = 1e-12


class SingularMatrixError(np.linalg.LinAlgError):
    """A matrix that must be inverted is (numerically) singular."""


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    """Input for which the requested quantity is undefined (e.g. a zero vector)."""


def as_matrix(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def _rank(s):
    if s.size == 0:
        return 0
    return int(np.sum(s > RCOND * s[0]))


def pinv(a):
    """Moore-Penrose pseudoinverse via SVD with relative cutoff ``RCOND``."""
    a = as_matrix(a)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    k = _rank(s)
    return (vt[:k].T / s[:k]) @ u[:, :k].T


def damped_pinv(a, gamma=0.0):
    """Damped pseudoinverse ``A^T (A A^T + gamma I)^{-1}``.

    For ``gamma == 0`` ``A`` must have full row rank and the result is the
    Moore-Penrose pseudoinverse (computed by SVD). For ``gamma > 0`` the damped
    system is solved directly.

    Raises:
        SingularMatrixError: if ``A A^T + gamma I`` is singular.
    """
    a = as_matrix(a)
    if gamma < 0:
        raise ValueError(f"damping must be nonnegative, got {gamma}")
    m = a.shape[0]
    if gamma == 0:
        s = np.linalg.svd(a, compute_uv=False)
        if _rank(s) < m:
            raise SingularMatrixError(
                "damped_pinv: A A^T is singular (A is not full row rank) and gamma=0")
        return pinv(a)
    gram = a @ a.T + gamma * np.eye(m)
    try:
        # solve (A A^T + gI) X = A  ->  X^T = A^T (A A^T + gI)^{-1} (gram is symmetric)
        return np.linalg.solve(gram, a).T
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("damped_pinv: A A^T + gamma I is singular") from exc


def rowspace_projector(j):
    """Orthogonal projector onto Row(J) = Col(J^T), i.e. ``J^T (J J^T)^{-1} J``."""
    j = as_matrix(j)
    u, s, vt = np.linalg.svd(j, full_matrices=False)
    if _rank(s) < j.shape[0]:
        raise SingularMatrixError("project_onto_rowspace: J is rank deficient")
    return vt.T @ vt


def project_onto_rowspace(q, j):
    """Project the columns of ``Q`` onto the row space of ``J``."""
    q = as_matrix(q)
    return rowspace_projector(j) @ q


def eigenvalues(a):
    """Full (complex) spectrum of a square matrix, unordered."""
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"eigenvalues need a square matrix, got {a.shape}")
    return np.linalg.eigvals(a).astype(np.complex128)


def max_real_eig(a):
    return float(np.max(eigenvalues(a).real))


def angle_degrees(a, b):
    """Angle between two flat vectors in degrees, in [0, 180]."""
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ShapeError(f"vectors differ in length: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("angle undefined for a zero vector")
    cos = np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))
