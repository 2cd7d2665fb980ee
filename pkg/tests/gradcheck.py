"""Finite-difference gradient checking utilities shared across test modules.

Each registered case draws random inputs and returns (arrays, loss_fn) where
loss_fn maps a dict of Tensors to a scalar Tensor.  The checker compares
tape gradients against central differences, component by component.
"""

import numpy as np

from roundpred import diffnum as dn

EPS = 1e-5
RTOL = 1e-4


def fd_gradient(f, x, eps=EPS):
    """Central-difference gradient of scalar f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def max_rel_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def run_case(case_fn, rng, eps=EPS, rtol=RTOL):
    """Check one random draw of a case; returns worst relative error seen."""
    arrays, loss_fn = case_fn(rng)
    tensors = {k: dn.Tensor(v, requires_grad=True) for k, v in arrays.items()}
    with dn.Tape() as tape:
        loss = loss_fn(tensors)
        tape.backward(loss)
    worst = 0.0
    for name in arrays:
        def f(x, _name=name):
            trial = {k: dn.Tensor(x if k == _name else arrays[k]) for k in arrays}
            return float(loss_fn(trial).value)

        numeric = fd_gradient(f, arrays[name], eps=eps)
        analytic = tensors[name].grad
        assert analytic is not None, f"no gradient reached input {name!r}"
        err = max_rel_error(analytic, numeric)
        assert err <= rtol, f"gradient mismatch on {name!r}: rel error {err:.3e} > {rtol}"
        worst = max(worst, err)
    return worst


def _separated_uniform(rng, shape, min_gap=1e-3):
    """Uniform draws whose per-column sorted gaps exceed min_gap (for max pooling)."""
    while True:
        x = rng.uniform(0.0, 1.0, size=shape)
        gaps = np.diff(np.sort(x, axis=0), axis=0)
        if gaps.size == 0 or gaps.min() > min_gap:
            return x


# ---------------------------------------------------------------------------
# operator cases


def case_add(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    p = rng.normal(size=(3, 4))
    return {"a": a, "b": b}, lambda t: dn.reduce_sum(dn.mul(dn.add(t["a"], t["b"]), p))


def case_sub(rng):
    a, b = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    p = rng.normal(size=(2, 5))
    return {"a": a, "b": b}, lambda t: dn.reduce_sum(dn.mul(dn.sub(t["a"], t["b"]), p))


def case_mul(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3,))
    p = rng.normal(size=(4, 3))
    return {"a": a, "b": b}, lambda t: dn.reduce_sum(dn.mul(dn.mul(t["a"], t["b"]), p))


def case_scale(rng):
    a = rng.normal(size=(6,))
    c = float(rng.normal())
    p = rng.normal(size=(6,))
    return {"a": a}, lambda t: dn.reduce_sum(dn.mul(dn.scale(t["a"], c), p))


def case_log(rng):
    a = rng.uniform(0.5, 2.0, size=(5,))
    p = rng.normal(size=(5,))
    return {"a": a}, lambda t: dn.reduce_sum(dn.mul(dn.log(t["a"]), p))


def case_reduce(rng):
    a = rng.normal(size=(4, 3))
    p = rng.normal(size=(3,))

    def loss(t):
        return dn.add(dn.reduce_sum(dn.mul(dn.reduce_sum(t["a"], axis=0), p)), dn.reduce_mean(t["a"]))

    return {"a": a}, loss


def case_concat(rng):
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 4))
    p = rng.normal(size=(3, 6))
    return {"a": a, "b": b}, lambda t: dn.reduce_sum(dn.mul(dn.concat([t["a"], t["b"]], axis=-1), p))


def case_stack(rng):
    a, b = rng.normal(size=(4,)), rng.normal(size=(4,))
    p = rng.normal(size=(2, 4))
    return {"a": a, "b": b}, lambda t: dn.reduce_sum(dn.mul(dn.stack([t["a"], t["b"]], axis=0), p))


def case_slice(rng):
    a = rng.normal(size=(3, 7))
    p = rng.normal(size=(3, 3))
    return {"a": a}, lambda t: dn.reduce_sum(dn.mul(dn.slice_last(t["a"], 2, 5), p))


def case_pick(rng):
    a = rng.normal(size=(5, 4))
    idx = rng.integers(0, 4, size=5)
    p = rng.normal(size=(5,))
    return {"a": a}, lambda t: dn.reduce_sum(dn.mul(dn.pick(t["a"], idx), p))


def case_affine(rng):
    arrays = {
        "x": rng.normal(size=(4, 3)),
        "w": rng.normal(size=(3, 5)),
        "b": rng.normal(size=(5,)),
    }
    p = rng.normal(size=(4, 5))
    return arrays, lambda t: dn.reduce_sum(dn.mul(dn.affine(t["x"], t["w"], t["b"]), p))


def case_leaky_relu(rng):
    x = rng.normal(size=(4, 4))
    x = np.where(np.abs(x) < 1e-2, x + np.sign(x) * 2e-2 + 1e-2, x)
    p = rng.normal(size=(4, 4))
    return {"x": x}, lambda t: dn.reduce_sum(dn.mul(dn.leaky_relu(t["x"]), p))


def case_softmax(rng):
    x = rng.normal(size=(3, 6))
    p = rng.normal(size=(3, 6))
    return {"x": x}, lambda t: dn.reduce_sum(dn.mul(dn.softmax(t["x"]), p))


def case_batch_norm_training(rng):
    arrays = {
        "x": rng.normal(size=(6, 5)),
        "gamma": rng.uniform(0.5, 1.5, size=(5,)),
        "beta": rng.normal(size=(5,)) * 0.2,
    }
    p = rng.normal(size=(6, 5))

    def loss(t):
        state = dn.BatchNormState(5)
        y = dn.batch_norm(t["x"], t["gamma"], t["beta"], state, training=True)
        return dn.reduce_sum(dn.mul(y, p))

    return arrays, loss


def case_batch_norm_inference(rng):
    arrays = {
        "x": rng.normal(size=(4, 3)),
        "gamma": rng.uniform(0.5, 1.5, size=(3,)),
        "beta": rng.normal(size=(3,)) * 0.2,
    }
    rm = rng.normal(size=3) * 0.3
    rv = rng.uniform(0.5, 2.0, size=3)
    p = rng.normal(size=(4, 3))

    def loss(t):
        state = dn.BatchNormState(3)
        state.running_mean = rm.copy()
        state.running_var = rv.copy()
        y = dn.batch_norm(t["x"], t["gamma"], t["beta"], state, training=False)
        return dn.reduce_sum(dn.mul(y, p))

    return arrays, loss


def case_max_pool(rng):
    x = _separated_uniform(rng, (7, 4))
    segments = [(0, 3), (3, 3), (3, 7)]
    p = rng.normal(size=(3, 4))

    def loss(t):
        pooled, _ = dn.max_pool_over_set(t["x"], segments)
        return dn.reduce_sum(dn.mul(pooled, p))

    return {"x": x}, loss


def case_lstm_cell(rng):
    hidden, inp, bsz = 5, 4, 3
    arrays = {
        "x": rng.normal(size=(bsz, inp)),
        "h": rng.normal(size=(bsz, hidden)) * 0.5,
        "c": rng.normal(size=(bsz, hidden)) * 0.5,
        "wx": rng.normal(size=(inp, 4 * hidden)) * 0.4,
        "wh": rng.normal(size=(hidden, 4 * hidden)) * 0.4,
        "b": rng.normal(size=(4 * hidden,)) * 0.1,
    }
    ph = rng.normal(size=(bsz, hidden))
    pc = rng.normal(size=(bsz, hidden))

    def loss(t):
        h2, c2 = dn.lstm_cell(t["x"], t["h"], t["c"], t["wx"], t["wh"], t["b"])
        return dn.add(dn.reduce_sum(dn.mul(h2, ph)), dn.reduce_sum(dn.mul(c2, pc)))

    return arrays, loss


def _nll_case(rng, dim):
    packed = dim + dim * (dim - 1) // 2
    n = 4
    target = rng.normal(size=(n, dim))
    resid = rng.uniform(-1.2, 1.2, size=(n, dim))
    arrays = {
        "mean": target - resid,
        "chol": np.concatenate(
            [rng.uniform(-1.2, 1.2, size=(n, dim)), rng.uniform(-0.8, 0.8, size=(n, packed - dim))],
            axis=-1,
        ),
    }
    p = rng.normal(size=(n,))

    def loss(t):
        nll = dn.gaussian_nll(target, t["mean"], t["chol"], wrap_heading=(dim == 3))
        return dn.reduce_sum(dn.mul(nll, p))

    return arrays, loss


def case_gaussian_nll_3d(rng):
    return _nll_case(rng, 3)


def case_gaussian_nll_2d(rng):
    return _nll_case(rng, 2)


def case_mini_pipeline(rng):
    """Composite draw exercising the encoder/decoder operator chain end to end."""
    arrays = {
        "x": rng.normal(size=(4, 3)),
        "w1": rng.normal(size=(3, 6)) * 0.5,
        "b1": rng.normal(size=(6,)) * 0.1,
        "h0": rng.normal(size=(4, 5)) * 0.5,
        "c0": rng.normal(size=(4, 5)) * 0.5,
        "wx": rng.normal(size=(6, 20)) * 0.4,
        "wh": rng.normal(size=(5, 20)) * 0.4,
        "bl": rng.normal(size=(20,)) * 0.1,
        "w2": rng.normal(size=(5, 4)) * 0.5,
        "b2": rng.normal(size=(4,)) * 0.1,
        "w3": rng.normal(size=(5, 9)) * 0.2,
        "b3": rng.normal(size=(9,)) * 0.1,
    }
    target = rng.normal(size=(4, 3)) * 0.8
    cls = rng.integers(0, 4, size=4)

    def loss(t):
        enc = dn.leaky_relu(dn.affine(t["x"], t["w1"], t["b1"]))
        h2, c2 = dn.lstm_cell(enc, t["h0"], t["c0"], t["wx"], t["wh"], t["bl"])
        probs = dn.softmax(dn.affine(h2, t["w2"], t["b2"]))
        ce = dn.scale(dn.reduce_sum(dn.log(dn.pick(probs, cls))), -1.0)
        dec = dn.affine(c2, t["w3"], t["b3"])
        mean = dn.slice_last(dec, 0, 3)
        chol = dn.slice_last(dec, 3, 9)
        nll = dn.reduce_mean(dn.gaussian_nll(target, mean, chol))
        return dn.add(nll, ce)

    return arrays, loss


OPERATOR_CASES = [
    ("add", case_add),
    ("sub", case_sub),
    ("mul", case_mul),
    ("scale", case_scale),
    ("log", case_log),
    ("reduce_sum_mean", case_reduce),
    ("concat", case_concat),
    ("stack", case_stack),
    ("slice_last", case_slice),
    ("pick", case_pick),
    ("affine", case_affine),
    ("leaky_relu", case_leaky_relu),
    ("softmax", case_softmax),
    ("batch_norm_training", case_batch_norm_training),
    ("batch_norm_inference", case_batch_norm_inference),
    ("max_pool_over_set", case_max_pool),
    ("lstm_cell", case_lstm_cell),
    ("gaussian_nll_3d", case_gaussian_nll_3d),
    ("gaussian_nll_2d", case_gaussian_nll_2d),
    ("mini_pipeline", case_mini_pipeline),
]
