"""Registered gradient checks for every differentiable op and composite block.

Each check draws its inputs from the given seed. Inputs that feed a kink
(ReLU, hinge, max) are kept at least ``KINK_GAP`` away from it, so a
central-difference step never straddles one.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import augmenter, nn, refiner
from . import tensor as T
from .extractor import FeatureBatch, SmallCNN, embed
from .gradcheck import GradCheckReport, grad_check
from .nn import Mode
from .tensor import Tensor

KINK_GAP = 1e-3
TOL = 1e-4


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap, x)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return T.reduce_sum(T.hadamard(out, Tensor(w)))


def _relu_safe(x: Tensor, fn: Callable[[Tensor], Tensor]) -> bool:
    """True when every pre-activation ``fn(x)`` sits clear of zero."""
    with T.no_grad():
        return bool(np.all(np.abs(fn(x).data) > KINK_GAP))


def _draw(rng, make, ok, tries: int = 200):
    for _ in range(tries):
        value = make(rng)
        if ok(value):
            return value
    raise RuntimeError("could not draw a kink-free input")


def _op_checks(seed: int) -> dict[str, Callable[[], GradCheckReport]]:
    rng = np.random.default_rng([seed, 11])
    checks: dict[str, Callable[[], GradCheckReport]] = {}

    def binary(name, fn):
        a = Tensor(rng.normal(size=(3, 4)))
        b = Tensor(rng.normal(size=(1, 4)))  # broadcast operand
        w = rng.normal(size=(3, 4))
        checks[f"{name}[lhs]"] = lambda: grad_check(lambda x: _weighted(fn(x, b), w), a)
        checks[f"{name}[rhs]"] = lambda: grad_check(lambda y: _weighted(fn(a, y), w), b)

    binary("add", T.add)
    binary("sub", T.sub)
    binary("hadamard", T.hadamard)

    def unary(name, fn, x):
        with T.no_grad():
            w = rng.normal(size=fn(Tensor(x)).shape)
        checks[name] = lambda: grad_check(lambda t: _weighted(fn(t), w), Tensor(x))

    unary("scalar_mul", lambda t: T.scalar_mul(t, -1.7), rng.normal(size=(2, 3)))
    unary("relu", T.relu, _away_from_zero(rng, (2, 5)))
    unary("max_with_zero", T.max_with_zero, _away_from_zero(rng, (2, 5)))
    unary("sigmoid", T.sigmoid, rng.normal(size=(2, 5)) * 3)
    unary("exp", T.exp, rng.normal(size=(2, 5)))
    unary("log", T.log, rng.uniform(0.2, 3.0, size=(2, 5)))
    unary("sum", lambda t: T.reduce_sum(t, [0, 2]), rng.normal(size=(2, 3, 4)))
    unary("mean", lambda t: T.reduce_mean(t, [1]), rng.normal(size=(2, 3, 4)))
    unary("max", lambda t: T.reduce_max(t, [1]), rng.permutation(24).reshape(2, 12) * 0.1)
    unary("softmax", lambda t: T.softmax(t, axis=1), rng.normal(size=(3, 5)))
    unary("l2_normalize", lambda t: T.l2_normalize(t, axis=1), rng.normal(size=(3, 4)))
    unary("adaptive_avg_pool", lambda t: T.adaptive_avg_pool(t, (2, 3)), rng.normal(size=(2, 2, 5, 7)))
    unary("take", lambda t: T.take(t, (np.array([0, 2, 2]), np.array([1, 0, 1]))), rng.normal(size=(3, 2)))
    unary("transpose", lambda t: T.transpose(t, (2, 0, 1)), rng.normal(size=(2, 3, 4)))

    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 2)))
    wm = rng.normal(size=(3, 2))
    checks["matmul[lhs]"] = lambda: grad_check(lambda x: _weighted(T.matmul(x, b), wm), a)
    checks["matmul[rhs]"] = lambda: grad_check(lambda y: _weighted(T.matmul(a, y), wm), b)

    x2 = Tensor(rng.normal(size=(2, 2, 5, 5)))
    k2 = Tensor(rng.normal(size=(3, 2, 3, 3)))
    b2 = Tensor(rng.normal(size=3))
    w2 = rng.normal(size=(2, 3, 3, 3))
    conv2 = lambda x, k, b: T.conv2d(x, k, b, stride=2, padding=1)  # noqa: E731
    checks["conv2d[input]"] = lambda: grad_check(lambda t: _weighted(conv2(t, k2, b2), w2), x2)
    checks["conv2d[kernel]"] = lambda: grad_check(lambda t: _weighted(conv2(x2, t, b2), w2), k2)
    checks["conv2d[bias]"] = lambda: grad_check(lambda t: _weighted(conv2(x2, k2, t), w2), b2)

    x1 = Tensor(rng.normal(size=(2, 2, 7)))
    k1 = Tensor(rng.normal(size=(3, 2, 3)))
    b1 = Tensor(rng.normal(size=3))
    w1 = rng.normal(size=(2, 3, 7))
    conv1 = lambda x, k, b: T.conv1d(x, k, b, padding=1)  # noqa: E731
    checks["conv1d[input]"] = lambda: grad_check(lambda t: _weighted(conv1(t, k1, b1), w1), x1)
    checks["conv1d[kernel]"] = lambda: grad_check(lambda t: _weighted(conv1(x1, t, b1), w1), k1)

    xb = Tensor(rng.normal(size=(3, 2, 2, 2)) * 2 + 1)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=2))
    beta = Tensor(rng.normal(size=2))
    wb = rng.normal(size=xb.shape)

    def bn(training):
        def f(t, g=gamma, bt=beta):
            rm, rv = Tensor(np.zeros(2)), Tensor(np.ones(2) * 1.3)
            return _weighted(T.batchnorm(t, g, bt, rm, rv, training), wb)
        return f

    checks["batchnorm[train,input]"] = lambda: grad_check(bn(True), xb)
    checks["batchnorm[train,gamma]"] = lambda: grad_check(lambda g: bn(True)(xb, g=g), gamma)
    checks["batchnorm[eval,input]"] = lambda: grad_check(bn(False), xb)

    ys = rng.integers(0, 3, size=4)

    def xent(t):
        p = T.softmax(t, axis=1)
        return augmenter.recognition_loss(p, ys)

    logits = Tensor(rng.normal(size=(4, 3)))
    checks["softmax_cross_entropy"] = lambda: grad_check(xent, logits, tol=1e-5)
    return checks


def _block_checks(seed: int) -> dict[str, Callable[[], GradCheckReport]]:
    rng = np.random.default_rng([seed, 23])
    checks: dict[str, Callable[[], GradCheckReport]] = {}
    params: nn.Params = {}
    nn.init_conv_bn(params, "b2", 2, 3, 3, rng)
    nn.init_conv(params, "s2", 2, 1, 3, rng)
    nn.init_conv_bn(params, "b1", 1, 4, 3, rng, dims=1)
    nn.init_conv(params, "s1", 4, 1, 3, rng, dims=1)
    nn.init_linear(params, "classifier", 5, 3, rng)

    def pre_bn2(t):
        return _bn_fresh(T.conv2d(t, params["b2.conv.weight"], params["b2.conv.bias"], 1, 1), params, "b2.bn")

    x2 = _draw(rng, lambda r: Tensor(r.normal(size=(2, 2, 4, 4))), lambda t: _relu_safe(t, pre_bn2))
    w2 = rng.normal(size=(2, 3, 4, 4))
    checks["conv_bn_relu_2d"] = lambda: grad_check(
        lambda t: _weighted(nn.conv_bn_relu_2d(t, params, "b2", Mode.TRAIN), w2), x2
    )
    xs, ws = Tensor(rng.normal(size=(2, 2, 4, 4))), rng.normal(size=(2, 1, 4, 4))
    checks["conv_sigmoid_2d"] = lambda: grad_check(lambda t: _weighted(nn.conv_sigmoid_2d(t, params, "s2"), ws), xs)

    def pre_bn1(t):
        return _bn_fresh(T.conv1d(t, params["b1.conv.weight"], params["b1.conv.bias"], 1, 1), params, "b1.bn")

    x1 = _draw(rng, lambda r: Tensor(r.normal(size=(2, 1, 6))), lambda t: _relu_safe(t, pre_bn1))
    w1 = rng.normal(size=(2, 4, 6))
    checks["conv_bn_relu_1d"] = lambda: grad_check(
        lambda t: _weighted(nn.conv_bn_relu_1d(t, params, "b1", Mode.TRAIN), w1), x1
    )
    xsm, wsm = Tensor(rng.normal(size=(2, 4, 6))), rng.normal(size=(2, 1, 6))
    checks["conv_softmax_1d"] = lambda: grad_check(lambda t: _weighted(nn.conv_softmax_1d(t, params, "s1"), wsm), xsm)
    xc, yc = Tensor(rng.normal(size=(4, 5))), rng.integers(0, 3, size=4)
    checks["classify"] = lambda: grad_check(lambda t: augmenter.recognition_loss(nn.classify(t, params)[1], yc), xc)
    return checks


def _bn_fresh(y: Tensor, params, prefix: str) -> Tensor:
    c = y.shape[1]
    return T.batchnorm(
        y, params[f"{prefix}.gamma"], params[f"{prefix}.beta"], Tensor(np.zeros(c)), Tensor(np.ones(c)), True
    )


def _refiner_clear_of_kinks(f: Tensor, params) -> bool:
    n, c = f.shape[:2]
    with T.no_grad():
        y = T.conv2d(f, params["refiner.local.reduce.conv.weight"], params["refiner.local.reduce.conv.bias"], 1, 1)
        z = _bn_fresh(y, params, "refiner.local.reduce.bn")
        v = T.reshape(T.adaptive_avg_pool(f, (1, 1)), (n, 1, c))
        y1 = T.conv1d(v, params["refiner.global.expand.conv.weight"], params["refiner.global.expand.conv.bias"], 1, 1)
        z1 = _bn_fresh(y1, params, "refiner.global.expand.bn")
    return bool(np.all(np.abs(z.data) > KINK_GAP) and np.all(np.abs(z1.data) > KINK_GAP))


def _mechanism_checks(seed: int) -> dict[str, Callable[[], GradCheckReport]]:
    rng = np.random.default_rng([seed, 37])
    checks: dict[str, Callable[[], GradCheckReport]] = {}

    # full refiner, train-mode batch statistics, 2-sample batch
    rp: nn.Params = {}
    refiner.init_refiner(rp, 8, rng)
    f = _draw(rng, lambda r: Tensor(r.uniform(-1, 1, size=(2, 8, 3, 3))), lambda t: _refiner_clear_of_kinks(t, rp))
    wr = rng.normal(size=f.shape)
    checks["refiner"] = lambda: grad_check(lambda t: _weighted(refiner.refine(t, rp, Mode.TRAIN).refined, wr), f)

    # augmenter loss path: similarity -> pairs -> virtual mixing -> both losses
    cp: nn.Params = {}
    nn.init_linear(cp, "classifier", 6, 3, rng)
    labels = np.array([0, 0, 0, 1, 1, 1, 2, 2])
    mix_seed = int(rng.integers(2**31))

    def hinge_margins(maps: Tensor):
        with T.no_grad():
            sim = augmenter.similarity_matrix(embed(maps))
            pairs = augmenter.search_pairs(sim, labels)
            psi = augmenter.dynamic_intensity(pairs, augmenter.benchmark_distance(pairs), 1.0)
            idx = augmenter.eligible_anchors(pairs, psi)
            m = pairs.s_inter_hard[idx] + psi[idx] - pairs.s_inner_hard[idx]
            s = np.sort(sim.data, axis=1)
        gaps_ok = np.all(np.diff(s, axis=1) > KINK_GAP)  # no near-ties in the pair choice
        return m, psi, gaps_ok

    def ok(maps):
        m, _, gaps_ok = hinge_margins(maps)
        return gaps_ok and np.any(m > KINK_GAP) and np.all(np.abs(m) > KINK_GAP)

    maps = _draw(rng, lambda r: Tensor(r.normal(size=(8, 6, 2, 2)) + 0.5), ok)
    _, psi_fixed, _ = hinge_margins(maps)

    def aug_loss(t: Tensor) -> Tensor:
        batch = FeatureBatch(t, embed(t), labels)
        sim = augmenter.similarity_matrix(batch.embeddings)
        pairs = augmenter.search_pairs(sim, labels)
        virtuals = augmenter.synthesize_virtual(batch, pairs, np.random.default_rng(mix_seed))
        allmaps = T.concat([t, T.stack([v.map for v in virtuals])])
        pooled = T.reshape(T.adaptive_avg_pool(allmaps, (1, 1)), (allmaps.shape[0], 6))
        _, probs = nn.classify(pooled, cp)
        n = len(labels)
        l_reg = augmenter.recognition_loss(probs[:n], labels, probs[n:], virtuals)
        l_ada = augmenter.adaptive_loss(pairs, psi_fixed)
        return augmenter.total_loss(l_reg, l_ada).l_total

    checks["augmenter_loss"] = lambda: grad_check(aug_loss, maps)

    # extractor -> refiner -> recognition loss on a 2-sample batch
    bb = SmallCNN(channels=(4, 4, 4))
    ep: nn.Params = {}
    bb.init_params(ep, rng)
    refiner.init_refiner(ep, 4, rng)
    nn.init_linear(ep, "classifier", 4, 2, rng)
    y2 = np.array([0, 1])

    def pipeline(t: Tensor) -> Tensor:
        maps = bb(t, ep, Mode.TRAIN)
        out = refiner.refine(maps, ep, Mode.TRAIN).refined
        pooled = T.reshape(T.adaptive_avg_pool(out, (1, 1)), (2, 4))
        return augmenter.recognition_loss(nn.classify(T.l2_normalize(pooled, axis=1), ep)[1], y2)

    def pipeline_ok(t: Tensor) -> bool:
        with T.no_grad():
            x = t
            for i in range(3):
                pre = f"extractor.stage{i + 1}"
                y = T.conv2d(x, ep[f"{pre}.conv.weight"], ep[f"{pre}.conv.bias"], 2, 1)
                z = _bn_fresh(y, ep, f"{pre}.bn")
                if np.any(np.abs(z.data) < KINK_GAP):
                    return False
                x = T.relu(z)
            return _refiner_clear_of_kinks(x, ep)

    img = _draw(rng, lambda r: Tensor(r.uniform(0, 1, size=(2, 1, 24, 24))), pipeline_ok)
    checks["extractor_refiner_loss"] = lambda: grad_check(pipeline, img)
    return checks


def registered_checks(seed: int) -> dict[str, Callable[[], GradCheckReport]]:
    checks = {}
    checks.update(_op_checks(seed))
    checks.update(_block_checks(seed))
    checks.update(_mechanism_checks(seed))
    return checks


def run_suite(seed: int, names=None) -> list[tuple[str, GradCheckReport]]:
    out = []
    for name, check in registered_checks(seed).items():
        if names is None or name in names:
            out.append((name, check()))
    return out
