"""Independent reference implementations used to check the fast paths."""

import numpy as np


def conv2d_bruteforce(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Six nested loops, zero same-padding, stride 1, 3x3 kernel."""
    n, c_in, h, w = x.shape
    c_out = kernel.shape[0]
    out = np.zeros((n, c_out, h, w), dtype=np.float64)
    for b in range(n):
        for o in range(c_out):
            for i in range(h):
                for j in range(w):
                    acc = bias[o]
                    for c in range(c_in):
                        for u in range(3):
                            for v in range(3):
                                ii, jj = i + u - 1, j + v - 1
                                if 0 <= ii < h and 0 <= jj < w:
                                    acc += x[b, c, ii, jj] * kernel[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


def fd_gradient(f, x: np.ndarray, coords, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar f at the given flat coordinates."""
    flat = x.reshape(-1)
    out = np.zeros(len(coords))
    for k, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        out[k] = (hi - lo) / (2.0 * step)
    return out


def fd_gradient_checked(f, x: np.ndarray, coords, step: float = 1e-3):
    """Central differences plus a smoothness screen.

    Returns (fd, reliable) where reliable marks coordinates whose
    half-step secant agrees with the full-step one. Where they disagree
    the function has a kink (ReLU boundary, pool argmax switch) inside
    the stencil and no finite-difference value is meaningful.
    """
    fd1 = fd_gradient(f, x, coords, step)
    fd2 = fd_gradient(f, x, coords, step / 4.0)
    scale = np.maximum(np.abs(fd1), np.abs(fd2))
    reliable = np.abs(fd1 - fd2) <= 1e-3 * np.maximum(scale, 1e-3)
    return fd1, reliable


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Worst-coordinate relative error with a small absolute escape."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    diff = np.abs(a - b)
    denom = np.maximum(np.abs(a), np.abs(b))
    ok = (diff < 1e-8) | (denom == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(ok, 0.0, diff / denom)
    return float(rel.max()) if len(rel) else 0.0


def softmax_xent_oracle(distances: np.ndarray, target: int) -> float:
    """-log softmax(-d)[target], computed the direct way."""
    z = -np.asarray(distances, dtype=np.float64)
    z = z - z.max()
    p = np.exp(z) / np.exp(z).sum()
    return float(-np.log(p[target]))


def run_length_events(binary: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of ones as (onset, offset-exclusive), by explicit scan."""
    events = []
    start = None
    for i, v in enumerate(binary):
        if v and start is None:
            start = i
        elif not v and start is not None:
            events.append((start, i))
            start = None
    if start is not None:
        events.append((start, len(binary)))
    return events


def median_filter_oracle(x: np.ndarray, width: int) -> np.ndarray:
    """Edge-replicated running median by explicit window extraction."""
    half = width // 2
    padded = np.concatenate([np.repeat(x[:1], half), x, np.repeat(x[-1:], half)])
    return np.array([np.median(padded[i : i + width]) for i in range(len(x))])
