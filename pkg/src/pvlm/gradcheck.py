"""Central finite-difference verification of every differentiable
primitive and loss head.

Each named check builds fresh random leaf tensors plus a closure that
recomputes a scalar loss from them; analytic gradients from one taped
backward pass are compared against central differences at a sampled subset
of coordinates. Errors are norm-based relative errors over the sampled
coordinates.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import RunConfig
from .heads import (MatchHead, MlmHead, ReconDecoder, masked_token_loss,
                    match_loss, reconstruction_loss, total_loss)
from .model import PretrainModel

EPS = 1e-3
TOLERANCE = {"float32": 1e-2, "float64": 1e-4}


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(make, rng: np.random.Generator, eps: float = EPS,
                    max_coords: int = 16) -> float:
    """Run one check instance; returns the worst relative error over its
    checked tensors."""
    tensors, fn = make(rng)
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        n = t.data.size
        # check the largest-gradient coordinates: central differences on a
        # float32 forward cannot resolve coordinates whose effect on the
        # loss sits below the float rounding noise
        coords = (np.arange(n) if n <= max_coords
                  else np.argsort(-np.abs(analytic.reshape(-1)))[:max_coords])
        numeric = np.empty(len(coords))
        flat = t.data.reshape(-1)
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = float(fn().data)
            flat[c] = orig - eps
            f_minus = float(fn().data)
            flat[c] = orig
            numeric[j] = (f_plus - f_minus) / (2.0 * eps)
        worst = max(worst, rel_error(analytic.reshape(-1)[coords], numeric))
    return worst


def _leaf(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape).astype(ad.default_dtype()),
                  requires_grad=True)


def _projector(rng, shape):
    # frozen at build time so finite-difference re-evaluations see the
    # same scalarization of the output
    return rng.standard_normal(shape)


def _project(t: Tensor, r: np.ndarray) -> Tensor:
    # scalar through a fixed random direction so the full Jacobian is
    # exercised, not just the row sums
    return ad.tsum(ad.mul(t, Tensor(r.astype(t.data.dtype))))


# -- primitive checks --------------------------------------------------------


def _chk_add(rng):
    a, b = _leaf(rng, (3, 5)), _leaf(rng, (3, 5))
    r = _projector(rng, (3, 5))
    return [a, b], lambda: _project(ad.add(a, b), r)


def _chk_add_bias(rng):
    a, b = _leaf(rng, (4, 6)), _leaf(rng, (6,))
    r = _projector(rng, (4, 6))
    return [a, b], lambda: _project(ad.add(a, b), r)


def _chk_sub(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    r = _projector(rng, (3, 4))
    return [a, b], lambda: _project(ad.sub(a, b), r)


def _chk_mul(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    r = _projector(rng, (3, 4))
    return [a, b], lambda: _project(ad.mul(a, b), r)


def _chk_scale(rng):
    a = _leaf(rng, (3, 4))
    r = _projector(rng, (3, 4))
    return [a], lambda: _project(ad.scale(a, -1.7), r)


def _chk_matmul(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    r = _projector(rng, (3, 2))
    return [a, b], lambda: _project(ad.matmul(a, b), r)


def _chk_conv2d(rng):
    x = _leaf(rng, (2, 8, 8))
    w = _leaf(rng, (2, 2, 2, 3))
    b = _leaf(rng, (3,))
    r = _projector(rng, (3, 4, 4))
    return [x, w, b], lambda: _project(ad.conv2d(x, w, b, 2), r)


def _chk_layer_norm(rng):
    x = _leaf(rng, (3, 8))
    gain = _leaf(rng, (8,), 0.5, 1.5)
    bias = _leaf(rng, (8,))
    r = _projector(rng, (3, 8))
    return [x, gain, bias], lambda: _project(ad.layer_norm(x, gain, bias), r)


def _chk_softmax(rng):
    x = _leaf(rng, (3, 7), -2.0, 2.0)
    r = _projector(rng, (3, 7))
    return [x], lambda: _project(ad.softmax(x), r)


def _chk_gelu(rng):
    x = _leaf(rng, (4, 5), -2.5, 2.5)
    r = _projector(rng, (4, 5))
    return [x], lambda: _project(ad.gelu(x), r)


def _chk_sigmoid(rng):
    x = _leaf(rng, (4, 5), -3.0, 3.0)
    r = _projector(rng, (4, 5))
    return [x], lambda: _project(ad.sigmoid(x), r)


def _chk_log(rng):
    x = _leaf(rng, (3, 5), 0.2, 3.0)
    r = _projector(rng, (3, 5))
    return [x], lambda: _project(ad.log(x), r)


def _chk_clip(rng):
    x = _leaf(rng, (4, 4), -1.5, 1.5)
    # keep samples away from the clip edges where the subgradient jumps
    edgy = np.abs(np.abs(x.data) - 0.8) < 0.05
    x.data[edgy] += 0.12
    r = _projector(rng, (4, 4))
    return [x], lambda: _project(ad.clip(x, -0.8, 0.8), r)


def _chk_attention(rng):
    q, k, v = _leaf(rng, (5, 8)), _leaf(rng, (7, 8)), _leaf(rng, (7, 8))
    r = _projector(rng, (5, 8))
    return [q, k, v], lambda: _project(ad.attention(q, k, v, 2), r)


def _chk_attention_masked(rng):
    q, k, v = _leaf(rng, (5, 8)), _leaf(rng, (7, 8)), _leaf(rng, (7, 8))
    mask = np.zeros((5, 7), dtype=bool)
    mask[:, 5:] = True
    r = _projector(rng, (5, 8))
    return [q, k, v], lambda: _project(ad.attention(q, k, v, 2, mask=mask), r)


def _chk_embedding(rng):
    table = _leaf(rng, (11, 5))
    ids = rng.integers(0, 11, size=9)  # repeats exercise the scatter-add
    r = _projector(rng, (9, 5))
    return [table], lambda: _project(ad.take_rows(table, ids), r)


def _chk_slice_rows(rng):
    x = _leaf(rng, (8, 4))
    r = _projector(rng, (4, 4))
    return [x], lambda: _project(ad.slice_rows(x, 2, 6), r)


def _chk_concat(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (5, 4))
    r = _projector(rng, (8, 4))
    return [a, b], lambda: _project(ad.concat([a, b], axis=0), r)


def _chk_reshape_transpose(rng):
    x = _leaf(rng, (3, 4, 2))
    r = _projector(rng, (6, 4))
    return [x], lambda: _project(
        ad.reshape(ad.transpose(x, (2, 0, 1)), (6, 4)), r)


def _chk_upsample(rng):
    x = _leaf(rng, (3, 4, 4))
    r = _projector(rng, (3, 8, 8))
    return [x], lambda: _project(ad.upsample2x(x), r)


def _chk_sum(rng):
    x = _leaf(rng, (4, 5))
    r = _projector(rng, (5,))
    return [x], lambda: ad.add(ad.tsum(x), _project(ad.tsum(x, axis=0), r))


def _chk_mean(rng):
    x = _leaf(rng, (4, 5))
    r = _projector(rng, (4,))
    return [x], lambda: ad.add(ad.tmean(x), _project(ad.tmean(x, axis=1), r))


def _chk_smooth_l1(rng):
    target = rng.uniform(-1.0, 1.0, size=(3, 6))
    d = rng.uniform(-2.0, 2.0, size=(3, 6))
    d[np.abs(np.abs(d) - 1.0) < 0.05] += 0.12  # stay off the branch switch
    pred = Tensor((target + d).astype(ad.default_dtype()), requires_grad=True)
    target_t = Tensor(target.astype(ad.default_dtype()), requires_grad=True)
    r = _projector(rng, (3, 6))
    return [pred, target_t], lambda: _project(ad.smooth_l1(pred, target_t), r)


def _chk_cross_entropy(rng):
    logits = _leaf(rng, (6, 9), -2.0, 2.0)
    labels = rng.integers(0, 9, size=6)
    return [logits], lambda: ad.cross_entropy(logits, labels)


# -- loss-head checks --------------------------------------------------------

_TOY_DIMS = (4, 6, 8, 10)


def _toy_states(rng, image_size=32):
    states = []
    grid = image_size
    for d in _TOY_DIMS:
        grid //= 2 if states else 4
        states.append(_leaf(rng, (d, grid, grid), -0.5, 0.5))
    return states


def _chk_recon_loss(rng):
    target = rng.uniform(0, 1, size=(3, 12, 12))
    d = rng.uniform(-1.8, 1.8, size=(3, 12, 12))
    d[np.abs(np.abs(d) - 1.0) < 0.05] += 0.12
    pred = Tensor((target + d).astype(ad.default_dtype()), requires_grad=True)
    mask = np.zeros((12, 12), dtype=bool)
    mask[::2] = True

    def fn():
        return ad.add(reconstruction_loss(pred, target),
                      reconstruction_loss(pred, target, pixel_mask=mask))

    return [pred], fn


def _chk_recon_decoder(rng):
    states = _toy_states(rng)
    decoder = ReconDecoder(_TOY_DIMS, rng)
    params = dict(decoder.named_parameters())
    if ad.default_dtype() == np.float64:
        target = rng.uniform(0, 1, size=(3, 32, 32))
        checked = [params["fuse3.weight"], params["project.weight"],
                   states[0], states[3]]
        return checked, lambda: reconstruction_loss(decoder(states), target)
    # float32: per-coordinate effects on a 3072-pixel mean sit at the
    # rounding floor for eps=1e-3, so check the decoder Jacobian through a
    # random projection whose gradients are measurable instead
    r = _projector(rng, (3, 32, 32))
    checked = [params["fuse3.weight"], params["project.weight"],
               params["project.bias"]]
    return checked, lambda: _project(decoder(states), r)


def _chk_match_head(rng):
    t4 = _leaf(rng, (6, 10))
    head = MatchHead(10, rng)
    w = head.fc.weight
    label = int(rng.integers(2))
    return [t4, w], lambda: match_loss(head(t4), label)


def _chk_mlm_head(rng):
    t4 = _leaf(rng, (6, 10))
    head = MlmHead(10, 13, rng)
    positions = np.array([1, 3, 4])
    labels = rng.integers(0, 13, size=3)
    return [t4, head.fc.weight], lambda: masked_token_loss(head, t4, positions, labels)


def _chk_model_end_to_end(rng):
    cfg = RunConfig.toy(vocab_size=24, stage_layers=(1, 1, 1, 1))
    model = PretrainModel(cfg, 24, rng)
    image = _leaf(rng, (3, 32, 32), 0.0, 1.0)
    target = rng.uniform(0, 1, size=(3, 32, 32))
    ids = rng.integers(0, 24, size=cfg.length)
    ids[0] = 1
    valid = np.ones(cfg.length, dtype=bool)
    valid[10:] = False
    positions = np.array([2, 5])
    labels = rng.integers(4, 24, size=2)
    params = dict(model.named_parameters())
    checked = [params["mlm.fc.weight"], params["match.fc.weight"]]
    if ad.default_dtype() == np.float64:
        # input and early-conv paths flow through the whole-image mean,
        # below the float32 measurement floor
        checked += [image, params["encoder.stages.0.vis.conv.weight"]]

    def fn():
        lang, vis = model.encoder.forward(image, ids, valid)
        mir = reconstruction_loss(model.decoder(vis), target)
        itm = match_loss(model.match(lang[-1]), 1)
        mlm = masked_token_loss(model.mlm, lang[-1], positions, labels)
        return total_loss(mir, itm, mlm)[0]

    return checked, fn


CHECKS = {
    "add": _chk_add,
    "add-bias": _chk_add_bias,
    "sub": _chk_sub,
    "mul": _chk_mul,
    "scale": _chk_scale,
    "matmul": _chk_matmul,
    "conv2d": _chk_conv2d,
    "layer-norm": _chk_layer_norm,
    "softmax": _chk_softmax,
    "gelu": _chk_gelu,
    "sigmoid": _chk_sigmoid,
    "log": _chk_log,
    "clip": _chk_clip,
    "attention": _chk_attention,
    "attention-masked": _chk_attention_masked,
    "embedding-lookup": _chk_embedding,
    "slice-rows": _chk_slice_rows,
    "concat": _chk_concat,
    "reshape-transpose": _chk_reshape_transpose,
    "upsample2x": _chk_upsample,
    "sum": _chk_sum,
    "mean": _chk_mean,
    "smooth-l1": _chk_smooth_l1,
    "cross-entropy": _chk_cross_entropy,
    "recon-loss": _chk_recon_loss,
    "recon-decoder": _chk_recon_decoder,
    "match-head": _chk_match_head,
    "mlm-head": _chk_mlm_head,
    "model-end-to-end": _chk_model_end_to_end,
}

_LIGHT_COORDS = 16
_HEAVY = {"recon-loss": 10, "recon-decoder": 6, "match-head": 10,
          "mlm-head": 10, "model-end-to-end": 4}

# composite many-layer checks need a coarser step in float32: at 1e-3 the
# secant numerator falls within accumulated forward rounding
_F32_EPS = {"recon-decoder": 3e-2, "model-end-to-end": 1e-2}


def run_suite(dtype: str = "float32", instances: int = 20, seed: int = 0,
              names=None) -> dict:
    """Max relative error per check over ``instances`` random instances."""
    results = {}
    with ad.precision(dtype):
        for name, make in CHECKS.items():
            if names is not None and name not in names:
                continue
            coords = _HEAVY.get(name, _LIGHT_COORDS)
            eps = _F32_EPS.get(name, EPS) if dtype == "float32" else EPS
            worst = 0.0
            for i in range(instances):
                rng = np.random.default_rng([seed, i, zlib.crc32(name.encode())])
                worst = max(worst, check_gradients(make, rng, eps, coords))
            results[name] = worst
    return results
