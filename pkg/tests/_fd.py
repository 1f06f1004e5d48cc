"""Central finite differences shared by the gradient tests."""
import numpy as np


def fd_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Gradient of the scalar ``f`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b, floor: float = 1e-12) -> float:
    """``||a - b|| / max(||a||, ||b||)``, the usual relative gradient-check error."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)
