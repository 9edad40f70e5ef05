"""Network fragments for finite-difference checks.

Each case builds fresh float64 leaves and returns (fn, leaves, wrt, pin_masks).
Probe losses are a weighted sum with fixed random weights, so every output
element contributes a distinct gradient.
"""
import numpy as np

from userkws import tensor as T
from userkws.model import ModelConfig, build_model
from userkws.tensor import Parameter, Tensor


def _p(a):
    return Parameter(np.asarray(a, np.float64), dtype=np.float64)


def _probe(out, rng):
    return T.weighted_sum(out, rng.standard_normal(out.shape))


def conv2d(rng):
    x, k, b = _p(rng.standard_normal((2, 7, 6, 3))), _p(rng.standard_normal((3, 3, 3, 4))), _p(rng.standard_normal(4))
    w = rng.standard_normal((2, 4, 3, 4))
    return (lambda: T.weighted_sum(T.conv2d(x, k, b, (2, 2), (1, 1)), w)), [x, k, b], None, False


def first_conv(rng):
    x, k, b = _p(rng.standard_normal((1, 49, 10, 1))), _p(rng.standard_normal((10, 4, 1, 3))), _p(np.zeros(3))
    w = rng.standard_normal((1, 25, 5, 3))
    return (lambda: T.weighted_sum(T.conv2d(x, k, b, (2, 2), (5, 1)), w)), [x, k, b], None, False


def depthwise(rng):
    x, k, b = _p(rng.standard_normal((2, 6, 5, 3))), _p(rng.standard_normal((3, 3, 3))), _p(rng.standard_normal(3))
    w = rng.standard_normal((2, 6, 5, 3))
    return (lambda: T.weighted_sum(T.depthwise_conv2d(x, k, b, (1, 1), (1, 1)), w)), [x, k, b], None, False


def batchnorm_train(rng):
    x = _p(rng.standard_normal((4, 3, 3, 5)) * 2 + 1)
    g, b = _p(rng.uniform(0.5, 2, 5)), _p(rng.standard_normal(5))
    w = rng.standard_normal((4, 3, 3, 5))
    fn = lambda: T.weighted_sum(T.batchnorm(x, g, b, True, None, None), w)
    return fn, [x, g, b], None, False


def batchnorm_infer(rng):
    x = _p(rng.standard_normal((4, 3, 3, 5)))
    g, b = _p(rng.uniform(0.5, 2, 5)), _p(rng.standard_normal(5))
    rm, rv = rng.standard_normal(5), rng.uniform(0.5, 2, 5)
    w = rng.standard_normal((4, 3, 3, 5))
    fn = lambda: T.weighted_sum(T.batchnorm(x, g, b, False, rm, rv), w)
    return fn, [x, g, b], None, False


def relu(rng):
    # keep every input at least 0.1 away from the kink (> 10x the probe step)
    v = rng.uniform(0.1, 2.0, (6, 7)) * rng.choice([-1, 1], (6, 7))
    x = _p(v)
    w = rng.standard_normal((6, 7))
    return (lambda: T.weighted_sum(T.relu(x), w)), [x], None, False


def avgpool(rng):
    x = _p(rng.standard_normal((3, 4, 5, 6)))
    w = rng.standard_normal((3, 6))
    return (lambda: T.weighted_sum(T.avgpool_global(x), w)), [x], None, False


def linear(rng):
    x, wt, b = _p(rng.standard_normal((5, 12))), _p(rng.standard_normal((12, 10))), _p(rng.standard_normal(10))
    w = rng.standard_normal((5, 10))
    return (lambda: T.weighted_sum(T.linear(x, wt, b), w)), [x, wt, b], None, False


def fusion(mode):
    def case(rng):
        a = _p(rng.standard_normal((4, 8)))
        table = _p(rng.standard_normal((3, 8)))
        rows = np.array([0, 2, 2, 1])
        op = {"add": T.add, "mul": T.mul, "concat": T.concat}[mode]
        w = rng.standard_normal((4, 16 if mode == "concat" else 8))
        return (lambda: T.weighted_sum(op(a, T.embedding(table, rows)), w)), [a, table], None, False
    case.__name__ = f"fusion_{mode}"
    return case


def cross_entropy(rng):
    z = _p(rng.standard_normal((8, 10)) * 3)
    labels = rng.integers(0, 10, 8)
    return (lambda: T.softmax_cross_entropy(z, labels)), [z], None, False


LAYERS = [conv2d, first_conv, depthwise, batchnorm_train, batchnorm_infer, relu, avgpool, linear,
          fusion("add"), fusion("mul"), fusion("concat"), cross_entropy]


def full_model(training, fusion_mode="mul", seed=0):
    """DS-CNN S forward + cross-entropy on a random batch of two."""
    def case(rng):
        m = build_model(ModelConfig("S", 10, fusion_mode), seed=seed, speakers=["a", "b"], dtype=np.float64)
        x = Tensor(rng.standard_normal((2, 49, 10, 1)), dtype=np.float64)
        y = rng.integers(0, 10, 2)
        fn = lambda: T.softmax_cross_entropy(m.forward(x, ["a", "b"], training=training), y)
        return fn, [x] + m.parameters(), m.parameters(), True
    case.__name__ = f"dscnn_s_{'train' if training else 'infer'}"
    return case
