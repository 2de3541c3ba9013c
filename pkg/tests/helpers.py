"""Shared builders for the gradient checks and small end-to-end models."""

from __future__ import annotations

import numpy as np

from triad import autodiff as ad
from triad.autodiff import Tape, Tensor, finite_diff_gradient, relative_error, zero_grad
from triad.classifier import Phase
from triad.config import RunConfig
from triad.encoders import summarize_text
from triad.model import Batch, ReportModel
from triad.nn import MultiHeadAttention, masked_attention


def leaf(array) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)


def _dims(rng, count, lo=1, hi=8):
    return tuple(int(d) for d in rng.integers(lo, hi + 1, size=count))


# Each case maps an rng to (forward, params): forward() builds a Tensor from
# the params' current data, so finite differences can perturb them in place.

def _case_add(rng):
    r, c = _dims(rng, 2)
    a, b = leaf(rng.normal(size=(r, c))), leaf(rng.normal(size=(c,)))
    return lambda: a + b, [a, b]


def _case_mul(rng):
    r, c = _dims(rng, 2)
    a, b = leaf(rng.normal(size=(r, c))), leaf(rng.normal(size=(r, 1)))
    return lambda: a * b, [a, b]


def _case_neg_sub(rng):
    a = leaf(rng.normal(size=_dims(rng, 2)))
    b = leaf(rng.normal(size=a.shape))
    return lambda: -(a - b * 0.5), [a, b]


def _case_relu(rng):
    a = leaf(rng.normal(size=_dims(rng, 2)))
    return lambda: ad.relu(a), [a]


def _case_exp(rng):
    a = leaf(rng.normal(size=_dims(rng, 2)))
    return lambda: ad.exp(a), [a]


def _case_log(rng):
    a = leaf(rng.uniform(0.5, 2.0, size=_dims(rng, 2)))
    return lambda: ad.log(a), [a]


def _case_clamp(rng):
    a = leaf(rng.uniform(0.0, 1.0, size=_dims(rng, 2)))
    return lambda: ad.clamp_min(a, 0.3), [a]


def _case_sum(rng):
    a = leaf(rng.normal(size=_dims(rng, 3)))
    axis = int(rng.integers(3))
    return lambda: ad.tsum(a, axis=axis), [a]


def _case_mean(rng):
    a = leaf(rng.normal(size=_dims(rng, 2)))
    return lambda: ad.tmean(a, axis=-1, keepdims=True), [a]


def _case_reshape_permute(rng):
    d = _dims(rng, 3)
    a = leaf(rng.normal(size=d))
    return lambda: ad.permute(ad.reshape(a, (d[0] * d[1], d[2])), (1, 0)), [a]


def _case_swap_getitem(rng):
    r, c = _dims(rng, 2, lo=2)
    a = leaf(rng.normal(size=(r, c)))
    return lambda: ad.swap_last(a)[:, 1:], [a]


def _case_concat_stack(rng):
    r, c = _dims(rng, 2)
    a, b = leaf(rng.normal(size=(r, c))), leaf(rng.normal(size=(r, c)))
    return lambda: ad.concat([ad.stack([a, b], axis=1), ad.stack([b, a], axis=1)], axis=0), [a, b]


def _case_take_rows(rng):
    v, e = _dims(rng, 2)
    table = leaf(rng.normal(size=(v, e)))
    ids = rng.integers(0, v, size=_dims(rng, 2))  # repeats exercise scatter-add
    return lambda: ad.take_rows(table, ids), [table]


def _case_matmul(rng):
    b, r, s, t = _dims(rng, 4)
    a, m = leaf(rng.normal(size=(b, r, s))), leaf(rng.normal(size=(s, t)))
    return lambda: ad.matmul(a, m), [a, m]


def _case_softmax(rng):
    r, c = _dims(rng, 2)
    x = leaf(rng.normal(size=(r, c)) * 2)
    mask = rng.random((r, c)) < 0.7
    mask[:, 0] = True
    return lambda: ad.softmax_rows(x, mask), [x]


def _case_layer_norm(rng):
    r, e = _dims(rng, 1)[0], int(rng.integers(2, 9))
    x = leaf(rng.normal(size=(r, e)))
    gain, bias = leaf(rng.normal(size=e)), leaf(rng.normal(size=e))
    return lambda: ad.layer_norm_rows(x, gain, bias, 1e-5), [x, gain, bias]


def _case_maxpool(rng):
    m, c = _dims(rng, 2)
    xs = [leaf(rng.normal(size=c)) for _ in range(m)]
    return lambda: ad.maxpool_over_set(xs), xs


def _case_max_masked(rng):
    b, m, c = _dims(rng, 3)
    x = leaf(rng.normal(size=(b, m, c)))
    mask = rng.random((b, m, 1)) < 0.6
    mask[:, 0] = True
    return lambda: ad.max_over_axis(x, 1, mask), [x]


def _case_cross_entropy(rng):
    r, k = _dims(rng, 1)[0], int(rng.integers(2, 9))
    logits = leaf(rng.normal(size=(r, k)))
    y = np.eye(k)[rng.integers(0, k, size=r)]
    w = (rng.random(r) < 0.8).astype(float)
    w[0] = 1.0
    return lambda: ad.cross_entropy(ad.softmax_rows(logits), y, w), [logits]


def _case_attention(rng):
    heads = int(rng.choice([1, 2, 4]))
    e = heads * int(rng.integers(1, 3))
    length = int(rng.integers(1, 9))
    proj = MultiHeadAttention(rng, e, heads).astype(np.float64)
    x = leaf(rng.normal(size=(length, e)))
    mask = np.tril(np.ones((length, length), dtype=bool))
    return lambda: masked_attention(x, x, mask, heads, proj), [x] + proj.parameters()


def _case_summarize(rng):
    n, l, e = _dims(rng, 3)
    q, h = leaf(rng.normal(size=(n, e))), leaf(rng.normal(size=(l, e)))
    return lambda: summarize_text(q, h)[0], [q, h]


PRIMITIVE_CASES = {
    "add": _case_add,
    "mul": _case_mul,
    "neg_sub": _case_neg_sub,
    "relu": _case_relu,
    "exp": _case_exp,
    "log": _case_log,
    "clamp_min": _case_clamp,
    "sum": _case_sum,
    "mean": _case_mean,
    "reshape_permute": _case_reshape_permute,
    "swap_getitem": _case_swap_getitem,
    "concat_stack": _case_concat_stack,
    "take_rows": _case_take_rows,
    "matmul": _case_matmul,
    "softmax_rows": _case_softmax,
    "layer_norm_rows": _case_layer_norm,
    "maxpool_over_set": _case_maxpool,
    "max_over_axis": _case_max_masked,
    "cross_entropy": _case_cross_entropy,
    "masked_attention": _case_attention,
    "summarize_text": _case_summarize,
}


def primitive_gradient_error(name: str, seed: int) -> float:
    """Relative error between autodiff and central differences for one case.

    The scalar objective is ``sum(out * R)`` with a fixed random ``R``, so
    every output coordinate contributes.
    """
    rng = np.random.default_rng([seed, len(name)])
    forward, params = PRIMITIVE_CASES[name](rng)
    probe = rng.normal(size=forward().shape)

    def objective():
        return float((forward().data * probe).sum())

    zero_grad(params)
    with Tape() as tape:
        out = forward()
        tape.backward(ad.tsum(ad.mul(out, Tensor(probe))))
    auto = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]
    numeric = finite_diff_gradient(objective, params, eps=1e-6)
    return relative_error(np.concatenate([a.ravel() for a in auto]),
                          np.concatenate([n.ravel() for n in numeric]))


# -- tiny end-to-end model -----------------------------------------------------------


def tiny_model(seed: int, n: int = 3, k: int = 4, v: int = 16, **overrides) -> ReportModel:
    cfg = RunConfig(seed=seed, c=8, e=8, k=k, layers=1, heads=2, max_len=8, history_len=6,
                    image_size=8).replace(**overrides)
    return ReportModel(cfg, n, k, v)


def tiny_batch(seed: int, n: int = 3, k: int = 4, v: int = 16, max_report: int = 6,
               dtype=np.float64) -> Batch:
    """Two studies: random images (the second with one padded view),
    random history with padding, reports of length <= ``max_report``."""
    rng = np.random.default_rng([seed, 7])
    size = 8
    length = int(rng.integers(2, max_report + 1))
    report = rng.integers(4, v, size=(2, length))
    report[:, 0] = 0
    report[0, -1] = 1
    cut = max(length - 2, 1)
    report[1, cut] = 1
    report[1, cut + 1:] = 2
    history = rng.integers(4, v, size=(2, 4))
    hvalid = np.ones((2, 4), dtype=bool)
    hvalid[1, 3] = False
    truth = rng.integers(0, k, size=(2, n))
    return Batch(["a", "b"], rng.random((2, 2, size, size)).astype(dtype),
                 np.array([[True, True], [True, False]]), history, hvalid, report, truth,
                 np.eye(k, dtype=dtype)[truth])


def end_to_end_errors(seed: int, interpreter_input: str = "generated",
                      finetune_states: str = "truth", samples: int = 12) -> tuple[float, float]:
    """Directional and sampled-coordinate relative errors of dL_total/dtheta."""
    model = tiny_model(seed, finetune_states=finetune_states).astype(np.float64)
    batch = tiny_batch(seed)
    params = model.parameters()

    def objective():
        return float(model.forward(batch, Phase.TRAIN, interpreter_input).losses["total"].data)

    zero_grad(params)
    with Tape() as tape:
        tape.backward(model.forward(batch, Phase.TRAIN, interpreter_input).losses["total"])
    grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]

    rng = np.random.default_rng([seed, 11])
    direction = [rng.normal(size=p.shape) for p in params]
    saved = [p.data.copy() for p in params]
    # small enough that the step rarely straddles a relu or max-pool kink
    eps = 1e-6
    for p, s, d in zip(params, saved, direction):
        p.data = s + eps * d
    f_plus = objective()
    for p, s, d in zip(params, saved, direction):
        p.data = s - eps * d
    f_minus = objective()
    for p, s in zip(params, saved):
        p.data = s
    numeric_dir = (f_plus - f_minus) / (2 * eps)
    auto_dir = sum(float((g * d).sum()) for g, d in zip(grads, direction))

    sizes = np.array([p.data.size for p in params], dtype=float)
    coords = []
    for _ in range(samples):
        i = int(rng.choice(len(params), p=sizes / sizes.sum()))
        coords.append((i, tuple(int(rng.integers(s)) for s in params[i].shape)))
    numeric = finite_diff_gradient(objective, params, eps=1e-6, coords=coords)
    auto_c = [grads[i][idx] for i, idx in coords]
    num_c = [numeric[i][idx] for i, idx in coords]
    return relative_error(auto_dir, numeric_dir), relative_error(auto_c, num_c)
