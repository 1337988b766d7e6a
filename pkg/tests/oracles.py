"""Independent reference computations shared by the tests."""
import numpy as np

from segfool import tensor as T
from segfool.tensor import Tensor

FD_STEP = 1e-3


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))


def central_difference(f, arrays, index, h=FD_STEP):
    """d f / d arrays[index] by central differences; f maps float64 arrays to a float."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    out = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(*base)
        x[i] = old - h
        down = f(*base)
        x[i] = old
        out[i] = (up - down) / (2 * h)
    return out


def gradcheck(op, arrays, rng, wrt=None, h=FD_STEP):
    """Compare autodiff gradients of sum(op(*inputs) * R) with central differences.

    Returns the worst relative error over the differentiated inputs.
    """
    wrt = range(len(arrays)) if wrt is None else wrt
    probe = {}

    def scalar(*arrs):
        out = op(*[Tensor(a, dtype=np.float64) for a in arrs])
        if "r" not in probe:
            probe["r"] = rng.normal(size=out.shape)
        return float((out.data * probe["r"]).sum())

    scalar(*arrays)  # fixes the random projection
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = op(*leaves)
    loss = T.reduce_sum(T.mul(out, Tensor(probe["r"], dtype=np.float64))) if out.size > 1 else \
        T.scale(out, float(np.ravel(probe["r"])[0]))
    T.backward(loss)
    worst = 0.0
    for i in wrt:
        numeric = central_difference(scalar, arrays, i, h)
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(numeric)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


def haar_matrices(n: int):
    """Haar analysis matrices built row by row from the filter taps."""
    r = 2 ** -0.5
    low = np.zeros((n // 2, n))
    high = np.zeros((n // 2, n))
    for i in range(n // 2):
        low[i, 2 * i], low[i, 2 * i + 1] = r, r
        high[i, 2 * i], high[i, 2 * i + 1] = r, -r
    return low, high
