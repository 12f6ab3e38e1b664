"""Float64 gradient-check suite over every primitive op and the composite blocks."""
from __future__ import annotations

import logging
import typing as t

import numpy as np
import pandas as pd

from ..bridge.flow import cfm_interpolate, cfm_loss
from ..bridge.model import BridgeDims, BridgeModel, JointBlock
from ..fusion3d.layers import FusedBlock, InjectionAdapter, project_hidden
from ..fusion3d.stage import GenStage, StageDims
from ..fusion3d.train import loss_3d
from ..numerics import ops
from ..numerics.gradcheck import gradcheck
from ..numerics.layers import Module
from ..numerics.random import RandomStream
from ..numerics.tensor import Tensor, parameter

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
# whole-network cases: central-difference noise on the float64 loss sits near 1e-10
MODEL_FLOOR = 1e-6
F64 = np.float64

Case = t.Callable[[RandomStream], tuple[t.Callable[[], Tensor], list[Tensor]]]


def _p(rng: RandomStream, *shape: int, scale: float = 1.0) -> Tensor:
    return parameter(rng.normal(shape) * scale, F64)


def _loss(x: Tensor) -> Tensor:
    return ops.mean(ops.square(x))


def _randomize_zeros(module: Module, rng: RandomStream) -> list[Tensor]:
    """Zero-initialized parameters get random values so their gradients are exercised."""
    params = module.parameters()
    for p in params:
        if not p.data.any():
            p.data = rng.normal(p.shape) * 0.3
    return params


def _binary(op: t.Callable[[Tensor, Tensor], Tensor], shape_a: tuple[int, ...], shape_b: tuple[int, ...]) -> Case:
    def case(rng: RandomStream):
        a, b = _p(rng, *shape_a), _p(rng, *shape_b)
        return (lambda: _loss(op(a, b))), [a, b]
    return case


def _unary(op: t.Callable[[Tensor], Tensor], *shape: int) -> Case:
    def case(rng: RandomStream):
        x = _p(rng, *shape)
        return (lambda: _loss(op(x))), [x]
    return case


def _layer_norm(rng: RandomStream):
    x, g, b = _p(rng, 2, 3, 5), _p(rng, 5), _p(rng, 5)
    return (lambda: _loss(ops.layer_norm(x, g, b))), [x, g, b]


def _attention(rng: RandomStream):
    q, k, v = _p(rng, 2, 3, 4), _p(rng, 2, 5, 4), _p(rng, 2, 5, 3)
    return (lambda: _loss(ops.sdp_attention(q, k, v))), [q, k, v]


def _embedding(rng: RandomStream):
    table = _p(rng, 6, 3)
    ids = np.array([[0, 2, 2], [5, 1, 0]])
    return (lambda: _loss(ops.embedding(table, ids))), [table]


def _concat(rng: RandomStream):
    a, b = _p(rng, 2, 3), _p(rng, 2, 4)
    return (lambda: _loss(ops.concat([a, b], axis=-1))), [a, b]


def _toy_bridge(rng: RandomStream) -> tuple[BridgeModel, np.ndarray, np.ndarray]:
    """Two-token bridge with every parameter nonzero, a front latent and a 3-token prompt."""
    dims = BridgeDims(latent_width=2, tokens=2, d_model=4, layers=1, heads=2, encoder_layers=1)
    model = BridgeModel(dims, rng.fork("bridge"), F64)
    _randomize_zeros(model, rng.fork("zeros"))
    z_front = rng.normal((2, dims.tokens, dims.latent_width))
    prompt_ids = np.array([[0, 3, 5], [1, 4, 2]])
    return model, z_front, prompt_ids


def _bridge_forward(rng: RandomStream):
    model, z_front, prompt_ids = _toy_bridge(rng)
    z_t = rng.normal(z_front.shape)
    tv = np.array([0.3, 0.8])

    def f() -> Tensor:
        velocity, _ = model.forward(z_t, tv, model.encode_condition(z_front, prompt_ids), z_front)
        return _loss(velocity)
    return f, model.parameters()


def _cfm(rng: RandomStream):
    model, z_front, prompt_ids = _toy_bridge(rng)
    z0, eps = rng.normal(z_front.shape), rng.normal(z_front.shape)
    tv = np.array([0.25, 0.6])
    z_t = cfm_interpolate(z0, eps, tv)

    def f() -> Tensor:
        velocity, _ = model.forward(z_t, tv, model.encode_condition(z_front, prompt_ids), z_front)
        return cfm_loss(velocity, eps, z0)
    return f, model.parameters()


def _loss3d(rng: RandomStream):
    v = _p(rng, 2, 8, 1)
    eps, x0 = rng.normal((2, 8, 1)), np.sign(rng.normal((2, 8, 1)))
    return (lambda: loss_3d(v, eps, x0)), [v]


def _projection(rng: RandomStream):
    adapter = InjectionAdapter(6, 4, 4, 2, rng.fork("adapter"), dtype=F64)
    h = _p(rng, 1, 5, 6)
    w = Tensor(rng.normal((1, 5, 4)))
    params = [adapter.proj.weight, adapter.proj.bias, adapter.norm.gain, adapter.norm.bias, h]
    return (lambda: _loss(ops.mul(project_hidden(h, adapter), w))), params


def _bridge_block(rng: RandomStream):
    block = JointBlock(4, 2, rng.fork("block"), F64)
    x, temb = _p(rng, 2, 3, 4), _p(rng, 2, 4)
    params = _randomize_zeros(block, rng.fork("zeros")) + [x, temb]
    return (lambda: _loss(block(x, temb))), params


def _fused_block(rng: RandomStream):
    block = FusedBlock(4, 4, 2, rng.fork("block"), d_feature=6, d_inj=4, dtype=F64)
    x, temb, f_img, h = _p(rng, 1, 3, 4), _p(rng, 1, 4), _p(rng, 1, 2, 4), _p(rng, 1, 2, 6)
    params = _randomize_zeros(block, rng.fork("zeros")) + [x, temb, f_img, h]
    return (lambda: _loss(block(x, temb, f_img, h))), params


def _toy_stage(rng: RandomStream):
    dims = StageDims(tag="sparse", grid=4, patch=1, d_model=4, layers=1, heads=2, image_size=4, image_patch=2,
                     d_feature=6, d_inj=4)
    stage = GenStage(dims, rng.fork("stage"), F64)
    params = _randomize_zeros(stage, rng.fork("zeros"))
    x = rng.normal((1, dims.tokens, 1))
    front = rng.uniform((1, 2, 4, 4))
    h = Tensor(rng.normal((1, 3, 6)))
    return (lambda: ops.mean(ops.square(stage(x, 0.4, front, h)))), params


CASES: dict[str, Case] = {
    "add": _binary(ops.add, (2, 3), (3,)),
    "sub": _binary(ops.sub, (2, 1, 3), (4, 3)),
    "mul": _binary(ops.mul, (2, 3), (2, 1)),
    "matmul": _binary(ops.matmul, (2, 3, 4), (4, 2)),
    "scale": _unary(lambda x: ops.scale(x, -1.7), 3, 2),
    "neg": _unary(ops.neg, 4),
    "swapaxes": _unary(lambda x: ops.swapaxes(x, 0, 2), 2, 3, 4),
    "reshape": _unary(lambda x: ops.reshape(x, (3, 4)), 2, 6),
    "slice_axis": _unary(lambda x: ops.slice_axis(x, 1, 1, 3), 2, 4),
    "sum": _unary(lambda x: ops.sum(x, axis=1), 2, 3, 2),
    "mean": _unary(lambda x: ops.mean(x, axis=(0, 2), keepdims=True), 2, 3, 2),
    "square": _unary(ops.square, 5),
    "silu": _unary(ops.silu, 2, 4),
    "softmax_rows": _unary(ops.softmax_rows, 3, 5),
    "concat": _concat,
    "layer_norm": _layer_norm,
    "sdp_attention": _attention,
    "embedding": _embedding,
    "cfm_loss": _cfm,
    "bridge_forward": _bridge_forward,
    "loss_3d": _loss3d,
    "project_hidden": _projection,
    "bridge_block": _bridge_block,
    "fused_block": _fused_block,
    "toy_stage": _toy_stage,
}

MODEL_CASES = frozenset({"cfm_loss", "bridge_forward", "bridge_block", "fused_block", "toy_stage"})


def run_gradcheck_suite(seed: int = 0, names: t.Sequence[str] | None = None,
                        tolerance: float = TOLERANCE) -> pd.DataFrame:
    """One row per case: name, max relative error, pass flag."""
    rows = []
    root = RandomStream(seed)
    for name in names or list(CASES):
        f, params = CASES[name](root.fork(name))
        err = gradcheck(f, params, floor=MODEL_FLOOR) if name in MODEL_CASES else gradcheck(f, params)
        rows.append({"case": name, "max_rel_error": err, "passed": bool(err <= tolerance)})
        logger.info("gradcheck %-14s max rel err %.2e %s", name, err, "ok" if err <= tolerance else "FAIL")
    return pd.DataFrame(rows, columns=["case", "max_rel_error", "passed"])
