"""Small helpers shared by the test modules"""

import numpy as np

from modules.camera import CameraPose


def random_pose(rng, spread: float = 0.3) -> CameraPose:
    eye = np.array([0.0, 0.0, -2.0]) + rng.normal(scale=spread, size=3)
    return CameraPose.look_at(eye, rng.normal(scale=0.05, size=3))


def rel_err(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of a scalar function over every entry of x (modified in place, restored)"""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad
