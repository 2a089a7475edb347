"""Finite-difference checks for every differentiable piece of the model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gradcheck
from .losses import branch_losses, cross_entropy, l_orth, orth_term, total_loss, triplet_loss
from .model import ModelConfig, forward, gru_layer, gru_step, init_params

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    passed: bool
    seconds: float


def _t(rng, *shape, away_from_zero: bool = False) -> Tensor:
    v = rng.normal(size=shape)
    if away_from_zero:
        v = np.sign(v) * (0.1 + np.abs(v))
    return Tensor(v)


def _weighted(out: Tensor, seed: int) -> Tensor:
    """Reduce a tensor to a scalar with fixed random weights so every output element matters."""
    if out.size == 1:
        return out
    weights = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum_all(ad.hadamard(out, Tensor(weights)))


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    """Name -> (scalar function, inputs) for every engine primitive."""
    w = int(rng.integers(1 << 31))
    idx = np.array([0, 2, 2, 1])
    targets = np.array([1, 0, 2])
    cases = {
        "add": (lambda a, b: _weighted(ad.add(a, b), w), [_t(rng, 3, 4), _t(rng, 4)]),
        "sub": (lambda a, b: _weighted(ad.sub(a, b), w), [_t(rng, 3, 4), _t(rng, 3, 1)]),
        "hadamard": (lambda a, b: _weighted(ad.hadamard(a, b), w), [_t(rng, 2, 3, 4), _t(rng, 4)]),
        "scale": (lambda a: _weighted(ad.scale(a, -1.7), w), [_t(rng, 3, 2)]),
        "matmul": (lambda a, b: _weighted(ad.matmul(a, b), w), [_t(rng, 2, 3, 4), _t(rng, 4, 5)]),
        "transpose": (lambda a: _weighted(ad.transpose(a), w), [_t(rng, 3, 2)]),
        "linear": (lambda x, m, b: _weighted(ad.linear(x, m, b), w), [_t(rng, 3, 4), _t(rng, 5, 4), _t(rng, 5)]),
        "conv1d": (lambda x, k, b: _weighted(ad.conv1d(x, k, b), w),
                   [_t(rng, 2, 6, 3), _t(rng, 4, 3, 5), _t(rng, 4)]),
        "conv1d_even_width": (lambda x, k: _weighted(ad.conv1d(x, k), w), [_t(rng, 5, 2), _t(rng, 3, 2, 4)]),
        "sigmoid": (lambda a: _weighted(ad.sigmoid(a), w), [_t(rng, 3, 4)]),
        "tanh": (lambda a: _weighted(ad.tanh(a), w), [_t(rng, 3, 4)]),
        "relu": (lambda a: _weighted(ad.relu(a), w), [_t(rng, 3, 4, away_from_zero=True)]),
        "hinge": (lambda a: _weighted(ad.hinge(a), w), [_t(rng, 6, away_from_zero=True)]),
        "mean_over_time": (lambda a: _weighted(ad.mean_over_time(a), w), [_t(rng, 2, 5, 3)]),
        "sum_all": (lambda a: ad.sum_all(a), [_t(rng, 3, 3)]),
        "mean_all": (lambda a: ad.mean_all(a), [_t(rng, 3, 3)]),
        "frobenius_sq": (lambda a: ad.frobenius_sq(a), [_t(rng, 3, 4)]),
        "take_rows": (lambda a: _weighted(ad.take_rows(a, idx), w), [_t(rng, 3, 4)]),
        "softmax_xent": (lambda a: ad.softmax_xent(a, targets), [_t(rng, 3, 4)]),
        "cosine_similarity": (lambda a, b: _weighted(ad.cosine_similarity(a, b), w), [_t(rng, 3, 5), _t(rng, 3, 5)]),
    }
    return cases


def _tiny_model_case(rng):
    config = ModelConfig(n_keywords=3, n_speakers=4, n_features=6, tconv_channels=4, tconv_width=3,
                         gru_hidden=8, gru_layers=2)
    params = init_params(config, int(rng.integers(1 << 31)))
    params.set_input_stats(rng.normal(size=6), rng.uniform(0.5, 2.0, size=6))
    for t in params.tensors():
        # nonzero biases so their gradients are exercised away from the init point
        t.value = t.value + rng.normal(scale=0.1, size=t.shape)
    x = rng.normal(size=(5, 5, 6))  # 5 clips, T = 5
    rows = np.array([[0, 1, 2, 3, 4], [3, 4, 0, 1, 2]])
    kw = np.array([0, 0, 1, 2, 1])
    spk = np.array([0, 1, 0, 3, 2])
    trips = ((1, 3), (1, 4), (2, 3), (2, 4))

    def f(*_):
        kws, sv = forward(params, x)
        ck, tk = branch_losses(kws, kw, rows, trips, margin=1.5)
        cs, ts = branch_losses(sv, spk, rows, trips, margin=1.5)
        return total_loss(ck, tk, cs, ts, l_orth(params.gru_kws, params.gru_sv), 0.5).tensor

    return f, params.tensors()


def model_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    config = ModelConfig(n_keywords=2, n_speakers=2, n_features=3, tconv_channels=3, gru_hidden=4, gru_layers=1)
    layer = init_params(config, int(rng.integers(1 << 31))).gru_kws[0]
    for t in layer.tensors():
        t.value = t.value + rng.normal(scale=0.2, size=t.shape)
    w = int(rng.integers(1 << 31))
    x_t, h_prev = _t(rng, 2, 3), Tensor(np.tanh(rng.normal(size=(2, 4))))
    seq = _t(rng, 2, 6, 3)
    kws_stack = init_params(config, 1).gru_kws
    sv_stack = init_params(config, 2).gru_sv
    orth_inputs = [t for stack in (kws_stack, sv_stack) for layer_ in stack for t in layer_.weights().values()]
    a, p, n = _t(rng, 4, 6), _t(rng, 4, 6), _t(rng, 4, 6)
    return {
        "gru_step": (lambda *_: _weighted(gru_step(layer, x_t, h_prev), w), layer.tensors() + [x_t, h_prev]),
        "gru_layer_bptt": (lambda *_: _weighted(gru_layer(layer, seq), w), layer.tensors() + [seq]),
        "full_model_tiny": _tiny_model_case(rng),
        "cross_entropy": (lambda z: cross_entropy(z, np.array([2, 0, 1])), [_t(rng, 3, 5)]),
        "triplet": (lambda *v: triplet_loss(*v, margin=1.5), [a, p, n]),
        "orth_frobenius": (lambda u, v: orth_term(u, v, "frobenius"), [_t(rng, 3, 4), _t(rng, 3, 4)]),
        "orth_literal": (lambda u, v: orth_term(u, v, "literal"), [_t(rng, 3, 4), _t(rng, 3, 4)]),
        "l_orth_frobenius": (lambda *_: l_orth(kws_stack, sv_stack, "frobenius"), orth_inputs),
        "l_orth_literal": (lambda *_: l_orth(kws_stack, sv_stack, "literal"), orth_inputs),
    }


def run_suite(seed: int = 0, tolerance: float = TOLERANCE, h: float = STEP,
              only: Callable[[str], bool] | None = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    cases = {**primitive_cases(rng), **model_cases(rng)}
    results = []
    for name, (fn, inputs) in cases.items():
        if only is not None and not only(name):
            continue
        start = time.perf_counter()
        err = gradcheck(fn, inputs, h=h)
        results.append(CheckResult(name, err, bool(err < tolerance), time.perf_counter() - start))
    if not results:
        raise ValueError("gradient check suite selected no cases")
    return results
