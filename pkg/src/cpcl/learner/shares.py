"""Training dense networks on secret shares.

Logistic regression is the zero-hidden-layer case of the same code. The
per-example gradient of a dense layer is the outer product of its input and
its output error, so its squared norm is (|a|^2 + 1) |delta|^2 and per-example
clipping never has to materialise per-example weight gradients.

ReLU and the softmax max-subtraction need comparisons; both are done through
an oracle that reconstructs internally and reshares the result, and every use
is counted in the trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..mpcnet.engine import MPCEngine, Shared
from ..mpcnet.gadgets import g_exp2, g_inv_sqrt, secure_clip_factor
from ..mpcnet.parties import PartyId
from .plain import Model, layer_dims


@dataclass
class SharedModel:
    kind: str
    dims: tuple[int, ...]
    layers: list[tuple[Shared, Shared]]


def share_model(engine: MPCEngine, model: Model, owner: PartyId | None = None) -> SharedModel:
    """Secret-share a model; with no owner it becomes a public constant."""
    layers = []
    for w, b in model.layers():
        if owner is None:
            layers.append((engine.constant(w), engine.constant(b)))
        else:
            layers.append((engine.input(owner, w), engine.input(owner, b)))
    return SharedModel(model.kind, model.dims, layers)


def _flatten(values: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([v.ravel() for v in values])


def peek_model(engine: MPCEngine, sm: SharedModel) -> Model:
    """Reconstruct for evaluation without charging the protocol."""
    parts = []
    for w, b in sm.layers:
        parts += [engine.peek(w), engine.peek(b)]
    return Model(sm.kind, sm.dims, _flatten(parts))


def reveal_model(engine: MPCEngine, sm: SharedModel, to) -> Model:
    parts = []
    for w, b in sm.layers:
        parts += [engine.reveal(w, to), engine.reveal(b, to)]
    return Model(sm.kind, sm.dims, _flatten(parts))


def _oracle_compare_positive(engine: MPCEngine, z: Shared) -> Shared:
    for s in engine.servers:
        engine.tracer.oracle(s)
    return engine.reshare((engine.peek(z) > 0).astype(np.float64), 0)


def _oracle_row_max(engine: MPCEngine, z: Shared) -> Shared:
    for s in engine.servers:
        engine.tracer.oracle(s)
    return engine.reshare(engine.peek(z).max(axis=1, keepdims=True), z.frac)


def shared_softmax(engine: MPCEngine, z: Shared) -> Shared:
    shifted = engine.sub(z, _oracle_row_max(engine, z))
    e = g_exp2(engine, engine.mul_const(shifted, math.log2(math.e), const_frac=24))
    total = engine.sum(e, axis=1, keepdims=True)
    inv = engine.square(g_inv_sqrt(engine, total))
    return engine.mul(e, inv)


def _add_bias(engine: MPCEngine, z: Shared, b: Shared) -> Shared:
    return engine.add(z, b.reshape(1, b.shape[0]))


def clipped_gradient_sum(engine: MPCEngine, sm: SharedModel, x: Shared, y_onehot: Shared,
                         clip: float, clip_mode: str = "smooth") -> list[tuple[Shared, Shared]]:
    """Sum over the batch of per-example clipped gradients, per layer (dW, db)."""
    acts, gates = [x], []
    last = len(sm.layers) - 1
    for i, (w, b) in enumerate(sm.layers):
        z = _add_bias(engine, engine.matmul(acts[-1], w), b)
        if i < last:
            gate = _oracle_compare_positive(engine, z)
            gates.append(gate)
            acts.append(engine.mul(z, gate, out_frac=z.frac))
        else:
            acts.append(z)
    probs = shared_softmax(engine, acts[-1])
    deltas = [None] * len(sm.layers)
    deltas[last] = engine.sub(probs, y_onehot)
    for i in range(last, 0, -1):
        back = engine.matmul(deltas[i], sm.layers[i][0].T)
        deltas[i - 1] = engine.mul(back, gates[i - 1], out_frac=back.frac)

    squares = engine.mul_many([(a, a) for a in acts[:-1]] + [(d, d) for d in deltas], out_frac=engine.f)
    a_sq = [engine.add_const(engine.sum(s, axis=1), 1.0) for s in squares[:len(deltas)]]
    d_sq = [engine.sum(s, axis=1) for s in squares[len(deltas):]]
    terms = engine.mul_many(list(zip(a_sq, d_sq)), out_frac=engine.f)
    norm2 = terms[0]
    for t in terms[1:]:
        norm2 = engine.add(norm2, t)

    factor = secure_clip_factor(engine, norm2, clip, clip_mode)
    col = factor.reshape(factor.shape[0], 1)
    scaled = engine.mul_many([(d, col) for d in deltas], out_frac=engine.f)
    grads = []
    for a, d in zip(acts[:-1], scaled):
        grads.append((engine.matmul(a.T, d), engine.sum(d, axis=0)))
    return grads


def sgd_update(engine: MPCEngine, sm: SharedModel, grads: list[tuple[Shared, Shared]],
               step: float) -> SharedModel:
    """theta <- theta - step * g on shares (step folds in lr / batch size)."""
    layers = []
    for (w, b), (gw, gb) in zip(sm.layers, grads):
        layers.append((engine.sub(w, engine.mul_const(gw, step, const_frac=32)),
                       engine.sub(b, engine.mul_const(gb, step, const_frac=32))))
    return SharedModel(sm.kind, sm.dims, layers)


def flat_grads(engine: MPCEngine, grads: list[tuple[Shared, Shared]]) -> np.ndarray:
    """Reconstructed gradients in parameter order (diagnostics)."""
    return _flatten([v for gw, gb in grads for v in (engine.peek(gw), engine.peek(gb))])


def grad_shapes(kind: str, dims: tuple[int, ...]) -> list[tuple[tuple[int, int], tuple[int]]]:
    d = layer_dims(kind, dims)
    return [((a, b), (b,)) for a, b in zip(d[:-1], d[1:])]
