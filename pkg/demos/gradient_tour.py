"""Check the hand-written backward passes against finite differences.

Each layer is differentiated analytically in float32 and float64 and compared
to central differences computed in float64, then the whole small DS-CNN with its
loss is checked the same way in training and inference mode.

    python demos/gradient_tour.py
"""
import numpy as np

from userkws import tensor as T
from userkws.gradcheck import gradient_check
from userkws.model import ModelConfig, build_model
from userkws.tensor import Parameter, Tensor

rng = np.random.default_rng(0)


def leaf(shape, scale=1.0):
    return Parameter(rng.standard_normal(shape) * scale, dtype=np.float64)


def probe(op, shape):
    # a fixed random projection turns the output into a scalar with dense gradients
    w = rng.standard_normal(shape)
    return lambda: T.weighted_sum(op(), w)


# NHWC activations; conv kernels are (kh, kw, in, out), depthwise (kh, kw, channels)
x, k, b = leaf((2, 7, 5, 3)), leaf((3, 3, 3, 4), 0.3), leaf((4,))
dk, db = leaf((3, 3, 3), 0.3), leaf((3,))
gamma, beta = leaf((3,)), leaf((3,))
cases = {
    "conv2d": (probe(lambda: T.conv2d(x, k, b, (2, 2), (1, 1)), (2, 4, 3, 4)), [x, k, b]),
    "depthwise": (probe(lambda: T.depthwise_conv2d(x, dk, db, (1, 1), (1, 1)), (2, 7, 5, 3)), [x, dk, db]),
    "batchnorm": (probe(lambda: T.batchnorm(x, gamma, beta, True, None, None), (2, 7, 5, 3)), [x, gamma, beta]),
    "avgpool": (probe(lambda: T.avgpool_global(x), (2, 3)), [x]),
}
for name, (fn, leaves) in cases.items():
    errs = [gradient_check(fn, leaves, analytic_dtype=d) for d in (np.float32, np.float64)]
    print(f"{name:10s} fp32 {errs[0]:.1e}   fp64 {errs[1]:.1e}")

model = build_model(ModelConfig("S", 10, "mul"), seed=0, speakers=["a", "b"], dtype=np.float64)
inp = Tensor(rng.standard_normal((2, 49, 10, 1)), dtype=np.float64)
labels = np.array([3, 7])
for training in (False, True):
    fn = lambda: T.softmax_cross_entropy(model.forward(inp, ["a", "b"], training=training), labels)
    errs = [gradient_check(fn, [inp] + model.parameters(), model.parameters(), analytic_dtype=d)
            for d in (np.float32, np.float64)]
    print(f"DS-CNN S {'train' if training else 'infer'}  fp32 {errs[0]:.1e}   fp64 {errs[1]:.1e}")
