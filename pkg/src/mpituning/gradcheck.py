"""Finite-difference gradient suites.

Each check reduces an operation to a scalar through a random weighting (plain
sums would give identically-zero gradients for normalising ops) and compares
the analytic gradient of every input with central differences.  Inputs of
non-smooth ops are kept at least ``10 * h`` away from their kinks.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .detector import DetectorConfig, DetectorOutput, ToyGroundedDetector
from .losses import LossWeights, Target, giou_tensor, sigmoid_focal_loss, total_loss
from .mhp import InsertionPoint, MHPEncoder, insert, tiny_mlp_forward, TinyMLP

H = 1e-5
TOLERANCE = 1e-4
SUITES = ("ops", "mhp", "loss", "end2end")


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(0.0, 1.0, shape)
    return np.sign(x) * (np.abs(x) + margin)


def _leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def _weighted(fn, rng, out_shape):
    w = Tensor(rng.normal(0.0, 1.0, out_shape))
    return lambda *args: (fn(*args) * w).sum()


def _check_all(fn, inputs, h=H, max_elements=None, rng=None) -> float:
    """Max error over every input tensor; the others stay fixed."""
    worst = 0.0
    for k, x in enumerate(inputs):
        def f(v, k=k):
            args = list(inputs)
            args[k] = v
            return fn(*args)
        for t in inputs:
            t.grad = None
        worst = max(worst, grad_check(f, x, h, max_elements=max_elements, rng=rng))
    return worst


def op_cases(rng) -> dict:
    """name -> (scalar function, input tensors)."""
    cases = {}

    def add_case(name, fn, *arrays):
        inputs = [_leaf(a) for a in arrays]
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
        cases[name] = (_weighted(fn, rng, out_shape), inputs)

    n = lambda *s: rng.normal(0.0, 1.0, s)  # noqa: E731
    add_case("matmul", ad.matmul, n(4, 5), n(5, 3))
    add_case("batched_matmul", ad.matmul, n(2, 3, 4, 5), n(2, 3, 5, 2))
    add_case("linear", ad.linear, n(2, 3, 5), n(5, 4), n(4))
    add_case("add_broadcast", ad.add, n(3, 4), n(1, 4))
    add_case("sub_broadcast", ad.sub, n(2, 3, 4), n(4))
    add_case("mul_broadcast", ad.mul, n(3, 4), n(3, 1))
    add_case("div", ad.div, n(3, 4), _away_from_zero(rng, (3, 4), 0.5))
    add_case("maximum", ad.maximum, n(3, 4), n(3, 4) + 0.0)
    add_case("minimum", ad.minimum, n(3, 4), n(3, 4) + 0.0)
    add_case("neg", ad.neg, n(3, 4))
    add_case("power", lambda x: ad.power(x, 3.0), n(3, 4))
    add_case("exp", ad.exp, n(3, 4))
    add_case("log", ad.log, np.abs(n(3, 4)) + 0.5)
    add_case("absolute", ad.absolute, _away_from_zero(rng, (3, 4)))
    add_case("sigmoid", ad.sigmoid, n(3, 4) * 3)
    add_case("swish", ad.swish, n(3, 4) * 3)
    add_case("relu", ad.relu, _away_from_zero(rng, (3, 4)))
    add_case("softmax", lambda x: ad.softmax(x, axis=-1), n(3, 5))
    add_case("softmax_axis0", lambda x: ad.softmax(x, axis=0), n(4, 3))
    add_case("layer_norm", lambda x, g, b: ad.layer_norm(x, g, b, 1e-5), n(3, 8), n(8), n(8))
    add_case("reduce_sum", lambda x: ad.reduce_sum(x, axis=1, keepdims=True), n(3, 4, 2))
    add_case("reduce_mean", lambda x: ad.reduce_mean(x, axis=(0, 2)), n(3, 4, 2))
    add_case("reshape", lambda x: ad.reshape(x, (6, 4)), n(2, 3, 4))
    add_case("transpose", lambda x: ad.transpose(x, (2, 0, 1)), n(2, 3, 4))
    add_case("getitem_slice", lambda x: x[1:, ::2], n(4, 5))
    add_case("getitem_gather", lambda x: x[np.array([0, 2, 2, 1])], n(3, 4))
    add_case("concat", lambda a, b: ad.concat([a, b], axis=1), n(3, 2), n(3, 4))
    add_case("stack", lambda a, b: ad.stack([a, b], axis=0), n(3, 2), n(3, 2))
    focal_targets = (n(4, 3) > 0.5).astype(np.float64)
    add_case("focal", lambda x: sigmoid_focal_loss(x, focal_targets), n(4, 3) * 2)
    add_case("layer_norm_swish", lambda x, g, b: ad.swish(ad.layer_norm(x, g, b)), n(3, 8), n(8), n(8))
    return cases


def check_ops(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    return {name: _check_all(fn, inputs) for name, (fn, inputs) in op_cases(rng).items()}


def _random_points(rng, dims=(6, 5, 7), tokens=(3, 5, 4)) -> list:
    return [InsertionPoint(id=i, name=f"p{i}", host="test", dim=d,
                           positions=rng.permutation(8)[:t])
            for i, (d, t) in enumerate(zip(dims, tokens))]


def check_mhp(seed: int, max_elements: int = 12) -> dict:
    """Full path: table -> tiny MLPs -> mixer -> g_i -> insertion -> scalar."""
    rng = np.random.default_rng(seed)
    store = ad.ParamStore()
    points = _random_points(rng)
    enc = MHPEncoder(store, points, M=2, D=8, L=64, rng=rng)
    for name in store:
        store[name].data[...] = rng.normal(0.0, 0.7, store[name].shape)
    hosts = [Tensor(rng.normal(0, 1, (2, p.tokens, p.dim))) for p in points]
    weights = [Tensor(rng.normal(0, 1, (2, p.tokens, p.dim))) for p in points]

    def scalar(_):
        P = enc()
        total = None
        for pt, h, w in zip(points, hosts, weights):
            term = (insert(h, P[pt.name], pt.id) * w).sum()
            total = term if total is None else total + term
        return total

    out = {}
    for name in store:
        store.zero_grad()
        out[name] = grad_check(scalar, store[name], H, max_elements=max_elements, rng=rng)
    mlp_store = ad.ParamStore()
    mlp = TinyMLP(mlp_store, "mlp", 8, rng)
    x = Tensor(rng.normal(0, 1, (5, 8)))
    w = Tensor(rng.normal(0, 1, (5, 8)))
    for name in mlp_store:
        mlp_store.zero_grad()
        out[f"tiny_mlp/{name}"] = grad_check(lambda _: (tiny_mlp_forward(mlp, x) * w).sum(),
                                            mlp_store[name], H)
    return out


def _random_output(rng, B=2, K=5, T=3):
    raw_boxes = _leaf(rng.normal(0.0, 0.8, (B, K, 4)) + np.array([0, 0, -1.0, -1.0]))
    logits = _leaf(rng.normal(0.0, 1.5, (B, K, T)))
    targets = []
    for _ in range(B):
        g = int(rng.integers(1, 4))
        c = rng.uniform(0.25, 0.75, (g, 2))
        wh = rng.uniform(0.1, 0.35, (g, 2))
        targets.append(Target(np.concatenate([c, wh], axis=1), rng.integers(0, T, g)))
    return raw_boxes, logits, targets


def _overlapping_pairs(rng, n):
    """cxcywh box pairs overlapping partially on both axes.

    Containment along an axis makes some coordinate gradients exactly zero,
    where a relative error only measures round-off.
    """
    pred = np.empty((n, 4))
    tgt = np.empty((n, 4))
    for i in range(n):
        for axis in range(2):
            a1, b1, a2, b2 = np.sort(rng.uniform(0.1, 0.9, 4))
            if min(b1 - a1, a2 - b1, b2 - a2) < 0.02:
                a1, b1, a2, b2 = 0.2, 0.35, 0.55, 0.75
            p, t = ((a1, a2), (b1, b2)) if rng.random() < 0.5 else ((b1, b2), (a1, a2))
            pred[i, axis], pred[i, axis + 2] = (p[0] + p[1]) / 2, p[1] - p[0]
            tgt[i, axis], tgt[i, axis + 2] = (t[0] + t[1]) / 2, t[1] - t[0]
    return pred, tgt


def check_loss(seed: int) -> dict:
    """total_loss with its matching frozen, w.r.t. raw box parameters and logits."""
    rng = np.random.default_rng(seed)
    raw_boxes, logits, targets = _random_output(rng)
    aux_raw = _leaf(rng.normal(0.0, 0.8, raw_boxes.shape) - np.array([0, 0, 1.0, 1.0]))
    aux_logits = _leaf(rng.normal(0.0, 1.5, logits.shape))
    w = LossWeights()

    def build(rb, lg, arb, alg):
        return DetectorOutput(boxes=ad.sigmoid(rb), logits=lg, aux=[(ad.sigmoid(arb), alg)])

    _, info = total_loss(build(raw_boxes, logits, aux_raw, aux_logits), targets, w)
    frozen = info["matches"]

    def loss_of(rb, lg, arb, alg):
        loss, _ = total_loss(build(rb, lg, arb, alg), targets, w, matches=frozen)
        return loss

    out = {"total_loss": _check_all(loss_of, [raw_boxes, logits, aux_raw, aux_logits])}
    pred, tgt = _overlapping_pairs(rng, 6)
    pred = _leaf(pred)
    wt = Tensor(rng.normal(0, 1, 6))
    out["giou"] = grad_check(lambda p: (giou_tensor(p, tgt) * wt).sum(), pred)
    return out


def tiny_detector_config(**kw) -> DetectorConfig:
    base = dict(image_size=16, patch_size=4, d=8, heads=2, fe_blocks=1, dec_blocks=1,
                num_queries=4, ffn_hidden=8, categories=("disc", "square", "ring"))
    base.update(kw)
    return DetectorConfig(**base)


# Entries with smaller gradients sit under the round-off floor of a central
# difference on an O(10) loss at h=1e-5 (about 1e-10 absolute).
E2E_MIN_GRAD = 1e-5


def check_end2end(seed: int, max_elements: int = 4) -> dict:
    """Frozen tiny detector + MPI encoder, loss with frozen matching, w.r.t. encoder params.

    Sampled entries are restricted to those whose analytic gradient exceeds
    ``E2E_MIN_GRAD``.
    """
    rng = np.random.default_rng(seed)
    det = ToyGroundedDetector(tiny_detector_config(seed=seed))
    det.store.freeze_all()
    enc = MHPEncoder(det.store, det.points, M=2, D=4, L=64, rng=rng)
    for name in det.store.names("mhp."):
        det.store[name].data[...] = rng.normal(0.0, 0.3, det.store[name].shape)
    images = rng.uniform(0, 1, (2, 16, 16, 1))
    targets = []
    for _ in range(2):
        c = rng.uniform(0.2, 0.8, (2, 2))
        targets.append(Target(np.concatenate([c, rng.uniform(0.1, 0.3, (2, 2))], 1),
                              rng.integers(0, 3, 2)))
    out = det.forward(images, mhp=enc)
    _, info = total_loss(out, targets, grid=det.cfg.grid)
    frozen = info["matches"]
    selected = out.selected

    def loss_of(_):
        o = det.forward(images, mhp=enc)
        if not np.array_equal(o.selected, selected):
            return Tensor(np.nan)
        loss, _ = total_loss(o, targets, grid=det.cfg.grid, matches=frozen)
        return loss

    det.store.zero_grad()
    ad.backward(loss_of(None))
    out = {}
    for name in det.store.names("mhp."):
        big = np.flatnonzero(np.abs(det.store[name].grad) > E2E_MIN_GRAD)
        det.store.zero_grad()
        out[name] = grad_check(loss_of, det.store[name], H, max_elements=max_elements,
                               rng=rng, indices=big)
    return out


CHECKS = {"ops": check_ops, "mhp": check_mhp, "loss": check_loss, "end2end": check_end2end}


def run_suite(suite: str, seeds=range(10)) -> dict:
    """Max error per check name across seeds."""
    worst: dict = {}
    for seed in seeds:
        for name, err in CHECKS[suite](seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
