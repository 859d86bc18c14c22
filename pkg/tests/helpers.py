"""Shared test oracles: finite differences and error norms."""
import numpy as np


def fd_gradient(f, param: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar callable w.r.t. every entry of param.

    ``param`` is perturbed in place and restored; ``f`` must re-run the
    forward pass from current parameter values.
    """
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        orig = param[ix]
        param[ix] = orig + eps
        fp = f()
        param[ix] = orig - eps
        fm = f()
        param[ix] = orig
        grad[ix] = (fp - fm) / (2.0 * eps)
    return grad


def relaxation_distances(occ, start):
    """Shortest-path oracle via synchronous min-plus relaxation.

    No queue, no heap: sweep the whole grid, replacing each cell's distance
    with min(neighbors) + 1 until a fixpoint. Deliberately a different
    algorithm family from the searches it checks. inf marks unreachable.
    """
    occ = np.asarray(occ, dtype=bool)
    h, w = occ.shape
    dist = np.full((h, w), np.inf)
    if occ[start[1], start[0]]:
        return dist
    dist[start[1], start[0]] = 0.0
    while True:
        shifted = np.full((4, h, w), np.inf)
        shifted[0, 1:, :] = dist[:-1, :]
        shifted[1, :-1, :] = dist[1:, :]
        shifted[2, :, 1:] = dist[:, :-1]
        shifted[3, :, :-1] = dist[:, 1:]
        best = np.minimum(dist, shifted.min(axis=0) + 1.0)
        best[occ] = np.inf
        best[start[1], start[0]] = 0.0
        if np.array_equal(best, dist):
            return dist
        dist = best


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-ratio relative error, robust to near-zero gradients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
