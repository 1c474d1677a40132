"""Shared oracles for the test suite."""

import math

import numpy as np

from tddhad import tensor as T
from tddhad.net import NetworkConfig, TDDNet


def numeric_grad(f, x: np.ndarray, h=1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        up = f()
        x[i] = orig - h
        down = f()
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b, floor=1e-12) -> float:
    """Norm-wise relative difference; ``floor`` keeps exact zeros from
    turning round-off into a large ratio."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_op(op, inputs, seed=0, h=1e-6):
    """Max relative error between analytic and numeric gradients of
    ``sum(op(*inputs) * R)`` over every input, in float64."""
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        leaves = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
        out = op(*leaves)
        weights = rng.standard_normal(out.shape)
        loss = T.sum(T.mul(out, T.Tensor(weights)))
        loss.backward()

        def value():
            with T.no_grad():
                return float(np.sum(op(*[T.Tensor(l.data) for l in leaves]).data * weights))

        errors = [rel_error(l.grad, numeric_grad(value, l.data, h)) for l in leaves]
    return max(errors)


def brute_force_roc(scores, gt):
    """Direct counting at the sentinel plus every unique normalized score."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    g = np.asarray(gt).ravel().astype(bool)
    lo, hi = s.min(), s.max()
    s = np.zeros_like(s) if hi == lo else (s - lo) / (hi - lo)
    thresholds = [1.0] + sorted(set(s.tolist()), reverse=True)
    pd, pf = [0.0], [0.0]
    for t in thresholds[1:]:
        det = s >= t
        pd.append(np.sum(det & g) / np.sum(g))
        pf.append(np.sum(det & ~g) / np.sum(~g))
    if thresholds[-1] != 0.0:
        thresholds.append(0.0)
        pd.append(1.0)
        pf.append(1.0)

    def trap(x, y):
        area = 0.0
        for k in range(1, len(x)):
            area += (x[k] - x[k - 1]) * (y[k] + y[k - 1]) / 2
        return abs(area)

    t, pd, pf = np.array(thresholds), np.array(pd), np.array(pf)
    return t, pd, pf, (trap(pf, pd), trap(t, pd), trap(t, pf))


def random_fixture(rng):
    n = int(rng.integers(2, 65))
    gt = np.zeros(n, dtype=np.uint8)
    gt[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = 1
    # coarse levels force ties
    levels = int(rng.integers(1, 8))
    scores = rng.integers(0, levels + 1, size=n) * rng.uniform(0.1, 3) if rng.random() < 0.5 else rng.normal(size=n)
    return scores.reshape(1, n), gt.reshape(1, n)


def affine_by_substitution(theta, s, cx, cy):
    """Rotation about the centre written out as translate, rotate-scale, translate back."""
    a = s * math.cos(theta)
    b = s * math.sin(theta)
    rot = np.array([[a, b, 0.0], [-b, a, 0.0], [0.0, 0.0, 1.0]])
    to_origin = np.array([[1.0, 0, -cx], [0, 1.0, -cy], [0, 0, 1.0]])
    back = np.array([[1.0, 0, cx], [0, 1.0, cy], [0, 0, 1.0]])
    return (back @ rot @ to_origin)[:2]


def end_to_end_gradcheck(seed=0, h=1e-4):
    """Directional derivative of the full loss, one random direction per parameter.

    Uses the five-point central stencil so that truncation and round-off both
    stay far below the tolerance even for tiny derivatives. Biases are
    randomized so no ReLU sits exactly on its kink.
    """
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(in_bands=6, encoder_channels=[4, 4, 4, 4, 4, 4], heads=2, lam_window=(3, 3))
    net = TDDNet(cfg, seed=seed, dtype=np.float64)
    for name, p in net.params.items():
        if name.endswith("bias"):
            p.data = rng.normal(0.0, 0.3, p.shape)
    x = rng.random((2, 4, 4, 6))
    y = (rng.random((2, 4, 4)) > 0.6).astype(np.float64)
    with T.precision(np.float64):
        net.loss(x, y).backward()
        errors = {}
        for name, p in net.params.items():
            u = rng.standard_normal(p.shape)
            u /= np.linalg.norm(u)
            analytic = float(np.sum(p.grad * u))
            base = p.data.copy()
            values = {}
            with T.no_grad():
                for k in (-2, -1, 1, 2):
                    p.data = base + k * h * u
                    values[k] = float(net.loss(x, y).data)
            p.data = base
            numeric = (values[-2] - 8 * values[-1] + 8 * values[1] - values[2]) / (12 * h)
            # derivatives that vanish exactly (e.g. GAM on a 1x1 map) leave ~1e-12 noise
            errors[name] = rel_error(analytic, numeric, floor=1e-5)
    return errors
