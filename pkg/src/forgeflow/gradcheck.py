"""Finite-difference gradient verification.

Runs in float64 via ``reference_mode`` so discretization error, not dtype
noise, dominates. Central differences with a default step of 1e-5; the
relative error metric is |fd - ad| / max(1, |fd|, |ad|), which behaves like
an absolute error near zero and a relative one for large gradients.
"""

from __future__ import annotations

import numpy as np

from .tensor import GradientTape, Tensor, reference_mode


def finite_diff(f, t: Tensor, index, eps: float = 1e-5) -> float:
    """Central difference of scalar-valued f with respect to t.data[index]."""
    orig = t.data[index]
    t.data[index] = orig + eps
    hi = float(f().data)
    t.data[index] = orig - eps
    lo = float(f().data)
    t.data[index] = orig
    return (hi - lo) / (2 * eps)


def rel_err(fd: float, ad: float) -> float:
    return abs(fd - ad) / max(1.0, abs(fd), abs(ad))


def check_gradients(build, params=None, n_samples: int = 20, eps: float = 1e-5,
                    seed: int = 0, tol: float = 1e-3,
                    raise_on_fail: bool = True):
    """Compare tape gradients with central differences on sampled coordinates.

    `build` is a zero-argument callable returning (loss_fn, param_list) where
    loss_fn() evaluates the scalar loss from current parameter values. Runs
    inside reference_mode; returns a list of (name, index, fd, ad, err)
    records plus the max error. Raises AssertionError above `tol`.
    """
    rng = np.random.default_rng(seed)
    with reference_mode():
        loss_fn, plist = build()
        with GradientTape() as tape:
            loss = loss_fn()
        tape.backward(loss)
        records = []
        worst = 0.0
        for name, p in plist:
            assert p.grad is not None, f"no gradient reached parameter {name}"
            flat_n = p.data.size
            k = min(n_samples, flat_n)
            picks = rng.choice(flat_n, size=k, replace=False)
            for flat in picks:
                index = np.unravel_index(int(flat), p.data.shape)
                fd = finite_diff(loss_fn, p, index, eps)
                ad = float(p.grad[index])
                err = rel_err(fd, ad)
                records.append((name, index, fd, ad, err))
                worst = max(worst, err)
        if worst > tol and raise_on_fail:
            bad = max(records, key=lambda r: r[4])
            raise AssertionError(
                f"gradient check failed: {bad[0]}{bad[1]} fd={bad[2]:.6g} "
                f"ad={bad[3]:.6g} err={bad[4]:.3g} (tol {tol})")
    return records, worst


def _build_elementwise():
    from . import tensor as T
    rng = np.random.default_rng(21)
    x = Tensor(rng.normal(size=(3, 4)) * 0.7, trainable=True)

    def loss():
        h = T.gelu(x)
        h = T.sigmoid(h) + T.tanh(h)
        h = T.exp(T.scale(h, 0.3)) * h
        h = T.div(h, T.add_scalar(T.pow_const(h, 2.0), 1.5))
        h = T.clip(h, -2.0, 2.0)
        h = T.log(T.add_scalar(T.relu(h) * h, 1.2))
        return T.tmean(h) + T.tsum(T.neg(h)) * 0.01

    return loss, [("x", x)]


def _build_linear_norm():
    from . import tensor as T
    rng = np.random.default_rng(22)
    x = Tensor(rng.normal(size=(2, 5)), trainable=True)
    w = Tensor(rng.normal(size=(5, 4)) * 0.5, trainable=True)
    g = Tensor(rng.normal(size=4) * 0.2 + 1.0, trainable=True)
    b = Tensor(rng.normal(size=4) * 0.1, trainable=True)

    def loss():
        h = T.matmul(x, w)
        h = T.layer_norm(h, g, b)
        p = T.softmax(h, axis=-1)
        return T.tsum(p * p)

    return loss, [("x", x), ("w", w), ("g", g), ("b", b)]


def _build_conv_pool():
    from . import tensor as T
    rng = np.random.default_rng(23)
    x = Tensor(rng.normal(size=(1, 2, 6, 6)), trainable=True)
    w = Tensor(rng.normal(size=(4, 2, 3, 3)) * 0.3, trainable=True)
    b = Tensor(rng.normal(size=4) * 0.1, trainable=True)
    dw = Tensor(rng.normal(size=(4, 1, 3, 3)) * 0.3, trainable=True)

    def loss():
        h = T.conv2d(x, w, b, stride=1, padding=1)
        h = T.relu(h)
        h = T.conv2d(h, dw, stride=1, padding=1, groups=4)
        h = T.max_pool2d(h, 2)
        h = T.adaptive_avg_pool2d(h)
        return T.tsum(h * h)

    return loss, [("x", x), ("w", w), ("b", b), ("dw", dw)]


def _build_structural():
    from . import tensor as T
    rng = np.random.default_rng(24)
    x = Tensor(rng.normal(size=(4, 6)), trainable=True)
    t = Tensor(rng.normal(size=(5, 3)), trainable=True)

    def loss():
        a = T.reshape(x, (2, 2, 6))
        a = T.transpose(a, (1, 0, 2))
        a = T.roll(a, 1, 2)
        a = T.narrow(a, 2, 1, 4)
        b = T.take(t, [0, 4, 4, 2])
        c = T.concat([T.reshape(a, (4, 4)), T.narrow(b, 1, 0, 2)], axis=1)
        return T.tmean(c * c)

    return loss, [("x", x), ("t", t)]


def _build_end_to_end():
    from . import tensor as T
    from .model import Detector, DetectorConfig
    g = np.random.default_rng(30)
    model = Detector(DetectorConfig.tiny(), seed=13)
    model.eval()
    frames = Tensor(g.uniform(size=(1, 2, 3, 8, 8)), trainable=True)
    maps = Tensor(g.uniform(size=(1, 2, 1, 8, 8)), trainable=True)
    labels = np.array([1.0])

    def loss():
        out = model.forward_segment(frames, maps)
        p = T.clip(out.prob, 1e-6, 1 - 1e-6)
        return T.tmean(T.neg(T.log(p)) * Tensor(labels))

    params = [("frames", frames), ("maps", maps)]
    params += [(n, p) for n, p, _ in model.named_parameters()]
    return loss, params


# Each entry exercises one slice of the op inventory through a composite
# scalar loss; together they touch every differentiable op once. The
# end-to-end entry runs the whole segment forward with a looser bar
# because discretization error compounds across the depth.
STANDARD_SUITE = (
    ("elementwise", _build_elementwise, 30, 1e-3),
    ("linear-norm-softmax", _build_linear_norm, 20, 1e-3),
    ("conv-pool", _build_conv_pool, 12, 1e-3),
    ("structural", _build_structural, 20, 1e-3),
    ("end-to-end", _build_end_to_end, 2, 1e-2),
)


def run_suite(suite=STANDARD_SUITE):
    """Run every check; returns (all_ok, result rows). Each row is
    (name, worst relative error, tolerance, ok)."""
    rows = []
    ok = True
    for name, build, n_samples, tol in suite:
        _, worst = check_gradients(build, n_samples=n_samples, tol=tol,
                                   raise_on_fail=False)
        passed = worst <= tol
        ok = ok and passed
        rows.append((name, worst, tol, passed))
    return ok, rows
