"""Central finite-difference checks of tape gradients.

The numerical side only ever evaluates the forward function on perturbed
copies of the inputs; it shares nothing with the backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

H = 1e-5
OP_RTOL = 1e-4
OP_ATOL = 1e-6
MODEL_RTOL = 1e-3


@dataclass
class CheckResult:
    name: str
    n_checked: int
    max_abs_err: float
    max_rel_err: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: {self.n_checked} entries, max abs err {self.max_abs_err:.2e}, "
                f"max rel err {self.max_rel_err:.2e}")


def tape_grads(fn: Callable[..., Tensor], arrays: list[np.ndarray]) -> list[np.ndarray]:
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = fn(*ts)
    ad.backward(out, tape)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def _value(fn, arrays) -> float:
    return float(fn(*[Tensor(a) for a in arrays]).data)


def numeric_grad(fn: Callable[..., Tensor], arrays: list[np.ndarray], which: int,
                 flat_index: int, h: float = H) -> float:
    plus = [a.copy() for a in arrays]
    minus = [a.copy() for a in arrays]
    plus[which].reshape(-1)[flat_index] += h
    minus[which].reshape(-1)[flat_index] -= h
    return (_value(fn, plus) - _value(fn, minus)) / (2 * h)


def compare(name: str, analytic: np.ndarray, numeric: np.ndarray, rtol: float, atol: float) -> CheckResult:
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = err <= np.maximum(rtol * scale, atol)
    rel = err / np.where(scale > 0, scale, 1.0)
    return CheckResult(name, int(err.size), float(err.max(initial=0.0)), float(rel.max(initial=0.0)),
                       bool(ok.all()))


def check_function(name: str, fn: Callable[..., Tensor], arrays: list[np.ndarray],
                   rtol: float = OP_RTOL, atol: float = OP_ATOL, max_entries: int = 60,
                   seed: int = 0) -> CheckResult:
    """Compare tape gradients of scalar ``fn`` with central differences on sampled entries."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    grads = tape_grads(fn, arrays)
    rng = np.random.default_rng(seed)
    an, nu = [], []
    for w, (a, g) in enumerate(zip(arrays, grads)):
        n = a.size
        picks = np.arange(n) if n <= max_entries else rng.choice(n, max_entries, replace=False)
        for j in picks:
            an.append(g.reshape(-1)[j])
            nu.append(numeric_grad(fn, arrays, w, int(j)))
    return compare(name, np.array(an), np.array(nu), rtol, atol)


def _weighted(out: Tensor, seed: int) -> Tensor:
    """Reduce to a scalar with fixed random weights so every output entry matters."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return ad.sum_all(ad.mul(out, w))


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.uniform(-1, 1, size=s)  # noqa: E731
    out = []

    out.append(check_function("conv1d", lambda x, w, b: _weighted(ad.conv1d(x, w, b, 1, 1), 1),
                              [r(2, 3, 16), r(4, 3, 3), r(4)]))
    out.append(check_function("conv1d stride 2", lambda x, w, b: _weighted(ad.conv1d(x, w, b, 2, 0), 2),
                              [r(2, 2, 11), r(3, 2, 3), r(3)]))
    out.append(check_function("maxpool1d", lambda x: _weighted(ad.maxpool1d(x, 2, 2), 3), [r(2, 3, 8)]))
    out.append(check_function("maxpool1d overlap", lambda x: _weighted(ad.maxpool1d(x, 3, 1), 4),
                              [r(1, 2, 9)]))
    out.append(check_function("linear", lambda x, w, b: _weighted(ad.linear(x, w, b), 5),
                              [r(3, 4, 6), r(5, 6), r(5)]))
    for kind in ("relu", "tanh", "sigmoid"):
        x = r(4, 5)
        if kind == "relu":
            x = np.where(np.abs(x) < 1e-3, 0.5, x)
        out.append(check_function(f"activation {kind}", lambda x, k=kind: _weighted(ad.activation(x, k), 6),
                                  [x]))
    out.append(check_function("softmax", lambda x: _weighted(ad.softmax(x), 7), [3 * r(3, 16)]))

    def drop(x):
        return _weighted(ad.dropout(x, 0.5, True, np.random.default_rng(11)), 8)
    out.append(check_function("dropout", drop, [r(4, 6)]))

    out.append(check_function("bce_loss", lambda p: ad.bce_loss(p, np.array([1., 0, 1, 0, 1])),
                              [np.array([0.9, 0.2, 0.4, 0.7, 0.55])]))

    def bn(x, g, b):
        return _weighted(ad.batchnorm1d(x, g, b, np.zeros(3), np.ones(3), True), 9)
    out.append(check_function("batchnorm1d", bn, [r(4, 3, 5), 1 + 0.2 * r(3), r(3)]))

    def gru(x, h, wx, wh, b):
        return _weighted(ad.gru_cell(x, h, ad.GruParams(wx, wh, b)), 10)
    out.append(check_function("gru_cell", gru, [r(3, 5), r(3, 4), r(12, 5), r(12, 4), r(12)],
                              max_entries=200))

    def lstm(x, h, c, wx, wh, b):
        hh, cc = ad.lstm_cell(x, h, c, ad.LstmParams(wx, wh, b))
        return ad.add(_weighted(hh, 12), _weighted(cc, 13))
    out.append(check_function("lstm_cell", lstm, [r(3, 5), r(3, 4), r(3, 4), r(16, 5), r(16, 4), r(16)],
                              max_entries=200))

    out.append(check_function("structural ops", lambda a, b: _weighted(
        ad.concat([ad.flip(ad.transpose(a, (0, 2, 1)), 1), ad.stack([b[:, 0], b[:, 1]], 2)], 2), 14),
        [r(2, 3, 4), r(2, 2, 4)]))
    return out


def _kink_pattern(tape: ad.Tape) -> list[np.ndarray]:
    """ReLU sign masks and max-pool selections of every recorded node.

    If the pattern is identical at theta + h and theta - h the network is a
    smooth function of theta on that interval, so central differences apply.
    """
    pats = []
    for node in tape.nodes:
        if node.op == "relu":
            pats.append(node.inputs[0].data > 0)
        elif node.op == "maxpool1d":
            x = node.inputs[0].data
            n = x.shape[-1] // 2
            pats.append(x[..., 1:2 * n:2] > x[..., 0:2 * n:2])
    return pats


def _same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def model_check(n_params: int = 25, seed: int = 0, batch: int = 2, config=None,
                max_tries: int = 400) -> CheckResult:
    """Full-network BCE gradient against central differences on sampled parameter entries.

    Sampling is stratified so every stage (conv, recurrent, attention, head)
    contributes entries. Conv biases feeding batch norm are skipped (their
    gradient is identically zero), as are entries whose +-h interval crosses a
    ReLU or max-pool switch.
    """
    from .model import HybridConfig, HybridModel

    cfg = config or HybridConfig()
    model = HybridModel.init(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((batch, 32, 512))
    y = (np.arange(batch) % 2).astype(float)

    names = list(model.params)
    buffers0 = {k: v.copy() for k, v in model.buffers.items()}

    def run():
        for k, v in buffers0.items():
            model.buffers[k][...] = v
        with ad.Tape() as tape:
            probs = model.forward(Tensor(x), mode="train", rng=np.random.default_rng(seed + 2))
            loss = ad.bce_loss(probs, Tensor(y))
        return loss, tape

    for p in model.params.values():
        p.grad = None
    loss, tape = run()
    ad.backward(loss, tape)
    grads = {k: model.params[k].grad.copy() for k in names}

    skip_bias = cfg.batchnorm
    stages = {
        "conv": [k for k in names if k.startswith("conv") and not (skip_bias and k.endswith(".bias"))],
        "rnn": [k for k in names if k.startswith("rnn")],
        "attn": [k for k in names if k.startswith("attn")],
        "head": [k for k in names if k.startswith(("fc", "out"))],
    }
    stage_names = [s for s, v in stages.items() if v]
    an, nu = [], []
    tries = 0
    while len(an) < n_params:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("could not find enough smooth parameter entries")
        group = stages[stage_names[len(an) % len(stage_names)]]
        name = group[int(rng.integers(len(group)))]
        g = grads[name].reshape(-1)
        # prefer entries with a non-negligible gradient so the relative test is meaningful
        cand = rng.choice(g.size, size=min(64, g.size), replace=False)
        j = int(cand[np.argmax(np.abs(g[cand]))])
        p = model.params[name].data.reshape(-1)
        old = p[j]
        p[j] = old + H
        lp, tp = run()
        p[j] = old - H
        lm, tm = run()
        p[j] = old
        if not _same(_kink_pattern(tp), _kink_pattern(tm)):
            continue
        an.append(g[j])
        nu.append((float(lp.data) - float(lm.data)) / (2 * H))
    return compare(f"full model ({n_params} parameters)", np.array(an), np.array(nu), MODEL_RTOL, 0.0)


def run_all(seed: int = 0) -> list[CheckResult]:
    return op_checks(seed) + [model_check(seed=seed)]
