import numpy as np
import pytest

from pfdnet.tensor_core import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def naive_fdconv(x, kernel, bias, rate):
    """Direct quadruple loop over the defining sum, float64, zero padding."""
    x = np.asarray(x, dtype=np.float64)
    n, c_in, h, w = x.shape
    c_out, _, k, _ = kernel.shape
    hk = k // 2
    rate = np.broadcast_to(np.asarray(rate, dtype=np.float64), (n, h, w))
    y = np.zeros((n, c_out, h, w))

    def sample(b, c, pi, pj):
        total = 0.0
        # every grid point; the hat kernel vanishes away from the 4 neighbours
        for qi in range(h):
            for qj in range(w):
                g = max(0.0, 1 - abs(qi - pi)) * max(0.0, 1 - abs(qj - pj))
                if g:
                    total += g * x[b, c, qi, qj]
        return total

    for b in range(n):
        for i in range(h):
            for j in range(w):
                r = rate[b, i, j]
                for ci in range(c_in):
                    for a in range(-hk, hk + 1):
                        for bb in range(-hk, hk + 1):
                            v = sample(b, ci, i + a * r, j + bb * r)
                            y[b, :, i, j] += kernel[:, ci, a + hk, bb + hk] * v
        y[b] += np.asarray(bias, dtype=np.float64)[:, None, None]
    return y
