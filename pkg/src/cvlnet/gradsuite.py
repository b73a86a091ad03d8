"""Finite-difference checks for every differentiable op and the full model loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .data_io import SynthSpec, encode_dataset, synth_generate
from .encoders import AttentionBlockParams, CoAttentionParams, co_attention_block, self_attention_block
from .model import CvlModel, ModelConfig, forward, loss
from .representation import Vocabulary
from .tensor import Tensor, gradient_pairs, relative_errors

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    """``max_rel_error`` is the per-coordinate criterion; ``norm_rel_error`` compares whole vectors."""

    name: str
    max_rel_error: float
    norm_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _summarise(name: str, pairs: list[tuple[np.ndarray, np.ndarray]]) -> CheckResult:
    a = np.concatenate([p[0] for p in pairs])
    n = np.concatenate([p[1] for p in pairs])
    worst = float(relative_errors(a, n).max()) if a.size else 0.0
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return CheckResult(name, worst, float(np.linalg.norm(a - n) / scale))


def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _shape(rng, ndim, low=1, high=8):
    return tuple(int(n) for n in rng.integers(low, high + 1, ndim))


def _projected(out: Tensor, rng) -> Tensor:
    # a random linear read-out avoids structurally zero gradients (e.g. sum of a softmax)
    return (out * rng.normal(0.0, 1.0, out.shape)).sum()


def _case(name: str, seed: int) -> tuple[Callable[..., Tensor], list[Tensor]]:
    rng = np.random.default_rng(seed)
    if name == "matmul":
        m, k, n = _shape(rng, 3)
        return (lambda a, b: _projected(T.matmul(a, b), np.random.default_rng(seed + 1)),
                [_leaf(rng, (m, k)), _leaf(rng, (k, n))])
    if name == "add_broadcast":
        r, h = _shape(rng, 2)
        return (lambda a, b: _projected(T.add(a, b), np.random.default_rng(seed + 1)),
                [_leaf(rng, (r, h)), _leaf(rng, (h,))])
    if name == "mul":
        shape = _shape(rng, 2)
        return (lambda a, b: _projected(T.mul(a, b), np.random.default_rng(seed + 1)),
                [_leaf(rng, shape), _leaf(rng, shape)])
    if name == "softmax":
        shape = _shape(rng, 2)
        return lambda x: _projected(T.softmax(x, axis=-1), np.random.default_rng(seed + 1)), [_leaf(rng, shape)]
    if name == "layer_norm":
        r, h = _shape(rng, 1)[0], int(rng.integers(2, 9))
        return (lambda x, g, b: _projected(T.layer_norm(x, g, b), np.random.default_rng(seed + 1)),
                [_leaf(rng, (r, h)), _leaf(rng, (h,)), _leaf(rng, (h,))])
    if name == "gelu":
        shape = _shape(rng, 2)
        return lambda x: _projected(T.gelu(x), np.random.default_rng(seed + 1)), [_leaf(rng, shape, 2.0)]
    if name == "tanh":
        shape = _shape(rng, 2)
        return lambda x: _projected(T.tanh(x), np.random.default_rng(seed + 1)), [_leaf(rng, shape)]
    if name == "embedding":
        v, h, t = _shape(rng, 3)
        ids = rng.integers(0, v, t)
        return lambda tab: _projected(T.embedding(tab, ids), np.random.default_rng(seed + 1)), [_leaf(rng, (v, h))]
    if name == "cross_entropy":
        b = _shape(rng, 1)[0]
        labels = rng.integers(0, 2, b)
        return lambda z: T.cross_entropy(z, labels).sum(), [_leaf(rng, (b, 2), 2.0)]
    if name == "concat_slice":
        r1, r2, h = _shape(rng, 3)
        return (lambda a, b: _projected(T.concat([a, b], axis=0)[1:, :], np.random.default_rng(seed + 1)),
                [_leaf(rng, (r1, h)), _leaf(rng, (r2, h))])
    if name == "reshape_swapaxes_mean":
        a, b, c = _shape(rng, 3)
        return (lambda x: _projected(x.reshape(b, a, c).swapaxes(0, 2).mean(axis=1), np.random.default_rng(seed + 1)),
                [_leaf(rng, (a, b, c))])
    if name == "self_attention_block":
        s = int(rng.integers(2, 9))
        p = AttentionBlockParams.init(rng, 8, 2, std=0.5)
        mask = (rng.random(s) > 0.3).astype(float)
        mask[0] = 1.0
        x = _leaf(rng, (s, 8))
        read = np.random.default_rng(seed + 1).normal(0.0, 1.0, (s, 8))
        return (lambda *_: (self_attention_block(x, mask, p) * read).sum(),
                [x, p.query.weight, p.key.weight, p.value.weight, p.ff_in.weight, p.ln1.gamma])
    if name == "co_attention_block":
        s1, s2 = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        p = CoAttentionParams(AttentionBlockParams.init(rng, 8, 2, cross=True, std=0.5),
                              AttentionBlockParams.init(rng, 8, 2, cross=True, std=0.5))
        m1, m2 = np.ones(s1), np.ones(s2)

        def f(x, y):
            a, b = co_attention_block(x, y, m1, m2, p)
            r = np.random.default_rng(seed + 1)
            return _projected(a, r) + _projected(b, r)

        return f, [_leaf(rng, (s1, 8)), _leaf(rng, (s2, 8))]
    raise KeyError(name)


OP_CASES = (
    "matmul", "add_broadcast", "mul", "softmax", "layer_norm", "gelu", "tanh", "embedding",
    "cross_entropy", "concat_slice", "reshape_swapaxes_mean", "self_attention_block", "co_attention_block",
)


def check_op(name: str, seeds=range(20), h: float = 1e-3) -> CheckResult:
    pairs = []
    for seed in seeds:
        f, inputs = _case(name, seed)
        pairs.extend(gradient_pairs(f, inputs, h=h))
    return _summarise(name, pairs)


def check_ops(seeds=range(20), h: float = 1e-3) -> list[CheckResult]:
    return [check_op(name, seeds, h) for name in OP_CASES]


def toy_model_and_batch(seed: int = 0):
    """Default toy config (H=64, T=24, R=8) at its standard initialisation, plus a 2-sample batch."""
    synth = synth_generate(SynthSpec(n_samples=2, seed=seed))
    vocab = Vocabulary.build(r.text for r in synth.records)
    batch = encode_dataset(synth.records, {f.id: f for f in synth.features}, vocab, 24, 8, 32,
                           {k.sample_id: k for k in synth.keywords})
    model = CvlModel(ModelConfig(vocab_size=len(vocab), visual_dim=32), seed=seed, vocab=vocab)
    return model, batch


def check_model(coords_per_param: int = 4, seed: int = 0, h: float = 1e-3) -> CheckResult:
    """Full three-head loss on the toy config; a seeded coordinate sample per parameter tensor."""
    model, batch = toy_model_and_batch(seed)
    params = [t for _, t in model.trainable_parameters()]

    def f(*_):
        return loss(forward(batch, model), batch.labels)

    pairs = []
    for k, p in enumerate(params):
        pairs.extend(gradient_pairs(f, [p], h=h, max_coords=coords_per_param, seed=seed * 1000 + k))
    return _summarise("cvl_loss", pairs)


def run_suite(seeds=range(20), coords_per_param: int = 4) -> list[CheckResult]:
    return check_ops(seeds) + [check_model(coords_per_param)]
