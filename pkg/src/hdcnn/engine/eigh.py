import numpy as np

from hdcnn import kernels
from hdcnn.errors import InvalidInputError

OFF_DIAGONAL_TOL = 1e-12
MAX_SWEEPS = 100


def eigh_symmetric(m, tol=OFF_DIAGONAL_TOL, max_sweeps=MAX_SWEEPS):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending and
    eigenvectors as orthonormal columns.  Each eigenvector is signed so that
    its first entry with magnitude above 1e-10 is positive.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("matrix has non-finite entries")
    if m.size and np.max(np.abs(m - m.T)) > 1e-9:
        raise InvalidInputError("matrix is not symmetric within 1e-9")
    sym = 0.5 * (m + m.T)
    w, v, _ = kernels.jacobi_eigh(np.ascontiguousarray(sym), tol, max_sweeps)
    order = np.argsort(w, kind="stable")
    w = w[order]
    v = v[:, order]
    for j in range(v.shape[1]):
        nz = np.flatnonzero(np.abs(v[:, j]) > 1e-10)
        if nz.size and v[nz[0], j] < 0:
            v[:, j] = -v[:, j]
    return w, v
