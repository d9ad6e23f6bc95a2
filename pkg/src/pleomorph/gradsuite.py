"""Finite-difference checks over every differentiable op and the full network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baseline import normal_baseline_loss
from .numerics import (
    GradCheckReport,
    Tensor,
    add,
    avg_pool2d,
    batch_norm,
    conv2d,
    cosine_similarity,
    dense_concat,
    flatten,
    global_avg_pool,
    grad_check_report,
    linear,
    matmul,
    max_pool2d,
    mean,
    mul,
    relu,
    reshape,
    smooth_l1,
    split_channels,
    sub,
    sum_all,
)
from .regressor import RegressionNetConfig, build_regression_net

LINEAR_TOL = 1e-6
NONLINEAR_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.report.max_rel_error < self.tolerance


def _projected(rng, op):
    """Scalarize an op output with a fixed random projection."""
    cache = {}

    def f(x):
        out = op(x)
        if "w" not in cache:
            cache["w"] = rng.standard_normal(out.shape)
        return sum_all(mul(out, cache["w"]))
    return f


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale)


def op_checks(seed: int = 0, h: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    other = rng.standard_normal((3, 4))
    w_mat = rng.standard_normal((4, 5))
    w_lin, b_lin = Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal(5))
    w_conv, b_conv = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3), Tensor(rng.standard_normal(4))
    gamma, beta = Tensor(rng.uniform(0.5, 1.5, 3)), Tensor(rng.standard_normal(3))
    run_mean, run_var = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    extra = Tensor(rng.standard_normal((2, 2, 4, 4)))
    target = rng.uniform(1, 3, 6)
    vec = rng.standard_normal((4, 8))
    refs = np.array([1.0, 1.5, 2.5, 3.0])

    cases = [
        ("add", LINEAR_TOL, (3, 4), lambda x: add(x, other)),
        ("sub", LINEAR_TOL, (3, 4), lambda x: sub(other, x)),
        ("mul", LINEAR_TOL, (3, 4), lambda x: mul(x, other)),
        ("matmul", LINEAR_TOL, (3, 4), lambda x: matmul(x, Tensor(w_mat))),
        ("linear", LINEAR_TOL, (3, 4), lambda x: linear(x, w_lin, b_lin)),
        ("linear_weight", LINEAR_TOL, (5, 4), lambda w: linear(Tensor(other), w, b_lin)),
        ("reshape", LINEAR_TOL, (3, 4), lambda x: reshape(x, (2, 6))),
        ("flatten", LINEAR_TOL, (2, 3, 2), flatten),
        ("sum_all", LINEAR_TOL, (3, 4), sum_all),
        ("mean", LINEAR_TOL, (3, 4), mean),
        ("conv2d", LINEAR_TOL, (2, 3, 6, 6), lambda x: conv2d(x, w_conv, b_conv, stride=1, padding=1)),
        ("conv2d_strided", LINEAR_TOL, (2, 3, 7, 7), lambda x: conv2d(x, w_conv, b_conv, stride=2, padding=0)),
        ("conv2d_weight", LINEAR_TOL, (4, 3, 3, 3),
         lambda w: conv2d(Tensor(np.linspace(-1, 1, 2 * 3 * 5 * 5).reshape(2, 3, 5, 5)), w, None, 2, 1)),
        ("avg_pool2d", LINEAR_TOL, (2, 3, 5, 4), lambda x: avg_pool2d(x, 2)),
        ("global_avg_pool", LINEAR_TOL, (2, 3, 4, 4), global_avg_pool),
        ("dense_concat", LINEAR_TOL, (2, 3, 4, 4), lambda x: dense_concat([x, extra])),
        ("split_channels", LINEAR_TOL, (2, 5, 3, 3), lambda x: mul(split_channels(x, [2, 3])[1], 2.0)),
        ("relu", NONLINEAR_TOL, (3, 4), relu),
        ("max_pool2d", NONLINEAR_TOL, (2, 3, 4, 6), lambda x: max_pool2d(x, 2)),
        ("batch_norm_train", NONLINEAR_TOL, (4, 3, 3, 3),
         lambda x: batch_norm(x, gamma, beta, run_mean.copy(), run_var.copy(), training=True)),
        ("batch_norm_eval", LINEAR_TOL, (4, 3, 3, 3),
         lambda x: batch_norm(x, gamma, beta, run_mean.copy(), run_var.copy(), training=False)),
        ("batch_norm_gamma", NONLINEAR_TOL, (3,),
         lambda g: batch_norm(Tensor(np.linspace(-2, 2, 108).reshape(4, 3, 3, 3) ** 3), g, beta,
                              run_mean.copy(), run_var.copy(), training=True)),
        ("smooth_l1", NONLINEAR_TOL, (6,), lambda x: smooth_l1(add(x, 2.0), target, 1.0)),
        ("cosine_similarity", NONLINEAR_TOL, (4, 8), lambda x: cosine_similarity(x, Tensor(vec))),
        ("normal_baseline_loss", NONLINEAR_TOL, (4, 8), lambda x: normal_baseline_loss(x, Tensor(vec), refs)),
    ]
    results = []
    for name, tol, shape, op in cases:
        point = _t(rng, *shape)
        report = grad_check_report(_projected(rng, op), point, h=h)
        results.append(CheckResult(name, report, tol))
    return results


def network_checks(seed: int = 0, h: float = 1e-5, coords_per_tensor: int = 4,
                   config: RegressionNetConfig | None = None) -> list[CheckResult]:
    """Full regression network composed with smooth-L1, in double precision.

    Every parameter tensor and the input image are checked at a random
    subset of coordinates.
    """
    rng = np.random.default_rng([seed, 1])
    net = build_regression_net(config, seed=seed, dtype=np.float64)
    size = net.config.input_size
    images = Tensor(rng.uniform(0, 1, (2, 3, size, size)))
    targets = rng.uniform(1.5, 2.5, 2)

    def loss(_):
        return mean(smooth_l1(net(images), targets))

    results = []
    named = [("input", images)] + list(net.named_parameters())
    for name, tensor in named:
        coords = rng.choice(tensor.data.size, min(coords_per_tensor, tensor.data.size), replace=False)
        was = tensor.requires_grad
        report = grad_check_report(loss, tensor, h=h, coords=coords)
        tensor.requires_grad = was
        results.append(CheckResult(f"network:{name}", report, NONLINEAR_TOL))
    net.zero_grad()
    return results


def all_checks(seed: int = 0) -> list[CheckResult]:
    return op_checks(seed) + network_checks(seed)
