"""Normal-epithelium baseline: embedding network, cosine loss and joint training.

A tumor patch's penultimate regression features are compared with the
embedding of a normal patch from the same case. The reference score sets
the sign and size of the pull: low scores ask for features similar to
the normal embedding, high scores for dissimilar ones, and a score of 2
is neutral.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import SCORE_MAX, SCORE_MIN
from .errors import InvalidConfigError, InvalidInputError, TrainingDivergedError
from .numerics import (
    Adam,
    BatchNorm,
    Conv2d,
    Linear,
    Module,
    Tape,
    Tensor,
    add,
    conv_output_size,
    cosine_similarity,
    flatten,
    max_pool2d,
    mean,
    mul,
    relu,
    smooth_l1,
)
from .regressor import (
    TRAIN_STREAM,
    VAL_STREAM,
    PatchSample,
    RegressionNet,
    Roi,
    TrainConfig,
    TrainResult,
    augment_patch,
    batch_arrays,
    batch_rng,
    check_pools,
    fit_with_early_stopping,
    make_balanced_batch,
    sample_training_patch,
)

NORMAL_STREAM = 2

# (kernel, stride, padding, out_channels)
FULL_LAYERS = ((7, 3, 0, 32), (5, 2, 0, 64), (3, 3, 0, 64), (3, 3, 0, 128))
DESK_LAYERS = ((5, 2, 2, 16), (3, 1, 1, 32), (3, 1, 1, 64), (3, 1, 1, 64))


@dataclass(frozen=True)
class EmbeddingNetConfig:
    input_size: int = 64
    layers: tuple = DESK_LAYERS
    hidden_features: int = 256
    output_width: int = 128
    fc_input: int | None = None  # checked against the shape walk when given

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(tuple(int(v) for v in layer) for layer in self.layers))
        if not self.layers or any(len(layer) != 4 for layer in self.layers):
            raise InvalidConfigError("layers must be (kernel, stride, padding, channels) tuples")
        if min(self.input_size, self.hidden_features, self.output_width) < 1:
            raise InvalidConfigError("sizes must be positive")
        walked = self.flatten_width
        if self.fc_input is not None and self.fc_input != walked:
            raise InvalidConfigError(
                f"first fully-connected input {self.fc_input} does not match the flatten width {walked}")

    def shape_walk(self) -> list[tuple[int, bool]]:
        """Spatial size after each conv+pool stage and whether the pool ran.

        A 2x2 max pool over a 1x1 map has no output, so it is skipped.
        """
        size = self.input_size
        out = []
        for k, s, p, _ in self.layers:
            size = conv_output_size(size, k, s, p)
            if size < 1:
                raise InvalidConfigError(f"convolution ({k},{s},{p}) leaves no spatial extent")
            pooled = size >= 2
            if pooled:
                size //= 2
            out.append((size, pooled))
        return out

    @property
    def flatten_width(self) -> int:
        return self.layers[-1][3] * self.shape_walk()[-1][0] ** 2

    @classmethod
    def full_scale(cls, fc_input: int | None = None):
        return cls(input_size=512, layers=FULL_LAYERS, hidden_features=256, output_width=1024, fc_input=fc_input)


class EmbeddingStage(Module):
    def __init__(self, cin, spec, pool, rng, dtype):
        k, s, p, cout = spec
        self.conv = Conv2d(cin, cout, k, s, p, rng=rng, dtype=dtype)
        self.norm = BatchNorm(cout, dtype=dtype)
        self.pool = pool

    def __call__(self, x):
        h = self.conv(x)
        if self.pool:
            h = max_pool2d(h, 2)
        return self.norm(relu(h))


class EmbeddingNet(Module):
    forward_calls = 0  # class-wide, lets tests prove inference never runs this net

    def __init__(self, config: EmbeddingNetConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng([seed, 31])
        self.stages = []
        cin = 3
        for spec, (_, pooled) in zip(config.layers, config.shape_walk()):
            self.stages.append(EmbeddingStage(cin, spec, pooled, rng, dtype))
            cin = spec[3]
        self.fc1 = Linear(config.flatten_width, config.hidden_features, rng=rng, dtype=dtype)
        self.fc2 = Linear(config.hidden_features, config.output_width, rng=rng, dtype=dtype)

    @property
    def dtype(self):
        return self.fc1.weight.dtype

    def __call__(self, x) -> Tensor:
        type(self).forward_calls += 1
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        size = self.config.input_size
        if x.data.ndim != 4 or x.shape[1:] != (3, size, size):
            raise InvalidInputError(f"expected (N, 3, {size}, {size}) input, got {x.shape}")
        h = x
        for stage in self.stages:
            h = stage(h)
        return relu(self.fc2(relu(self.fc1(flatten(h)))))


def build_embedding_net(config: EmbeddingNetConfig | None = None, seed: int = 0, dtype=np.float32) -> EmbeddingNet:
    return EmbeddingNet(config or EmbeddingNetConfig(), seed, dtype)


def phi(reference) -> float:
    y = float(reference)
    if not (SCORE_MIN <= y <= SCORE_MAX):
        raise InvalidInputError(f"reference score {y!r} outside [{SCORE_MIN}, {SCORE_MAX}]")
    return 0.5 * y - 1.0


def phi_array(references) -> np.ndarray:
    return np.array([phi(r) for r in np.atleast_1d(references)], dtype=np.float64)


def normal_baseline_loss(tumor_features, normal_embedding, reference):
    """max(0, phi(y) * cos(f, g)), per row.

    With Tensor inputs the result is a Tensor of shape (N,) on the tape;
    with plain 1-D vectors it is a float.
    """
    if isinstance(tumor_features, Tensor) or isinstance(normal_embedding, Tensor):
        f = tumor_features if isinstance(tumor_features, Tensor) else Tensor(tumor_features)
        g = normal_embedding if isinstance(normal_embedding, Tensor) else Tensor(normal_embedding)
        if f.shape != g.shape:
            raise InvalidInputError(f"feature widths differ: {f.shape} vs {g.shape}")
        weights = phi_array(reference).astype(f.dtype)
        return relu(mul(cosine_similarity(f, g), weights))
    f = np.asarray(tumor_features, dtype=np.float64)
    g = np.asarray(normal_embedding, dtype=np.float64)
    if f.shape != g.shape:
        raise InvalidInputError(f"feature widths differ: {f.shape} vs {g.shape}")
    cos = cosine_similarity(Tensor(f.reshape(1, -1)), Tensor(g.reshape(1, -1))).data[0]
    return max(0.0, phi(reference) * float(cos))


@dataclass(frozen=True)
class JointLossWeights:
    weight_t: float = 1.0
    weight_n: float = 1.0

    def __post_init__(self):
        if self.weight_t < 0 or self.weight_n < 0 or not (math.isfinite(self.weight_t) and math.isfinite(self.weight_n)):
            raise InvalidConfigError("loss weights must be finite and non-negative")
        if self.weight_t == 0 and self.weight_n == 0:
            raise InvalidConfigError("at least one loss weight must be positive")


def _check_widths(net: RegressionNet, emb: EmbeddingNet):
    if net.config.head_features != emb.config.output_width:
        raise InvalidConfigError(
            f"regression head width {net.config.head_features} differs from embedding width {emb.config.output_width}")


def joint_losses(net: RegressionNet, emb: EmbeddingNet, tumor_images, normal_images, targets, alpha=1.0):
    """Per-sample smooth-L1 and normal-baseline losses as tape Tensors."""
    if len(tumor_images) != len(normal_images) or len(tumor_images) != len(targets):
        raise InvalidInputError(
            f"tumor ({len(tumor_images)}), normal ({len(normal_images)}) and reference ({len(targets)}) "
            "batches must have equal length")
    out = net.forward_all(tumor_images)
    loss_t = smooth_l1(out.score, np.asarray(targets, dtype=net.dtype), alpha)
    loss_n = normal_baseline_loss(out.penultimate, emb(normal_images), targets)
    return loss_t, loss_n


def joint_train_step(net: RegressionNet, emb: EmbeddingNet, optimizer_t: Adam, optimizer_n: Adam,
                     tumor_images, normal_images, targets, weights: JointLossWeights = JointLossWeights(),
                     alpha: float = 1.0) -> tuple[float, float]:
    """One Adam step on each network for weight_t*mean(loss_t) + weight_n*mean(loss_n)."""
    _check_widths(net, emb)
    net.train()
    emb.train()
    with Tape() as tape:
        loss_t, loss_n = joint_losses(net, emb, tumor_images, normal_images, targets, alpha)
        mean_t, mean_n = mean(loss_t), mean(loss_n)
        # zero-weight terms stay off the graph so the other term's gradient is untouched
        terms = []
        if weights.weight_t:
            terms.append(mean_t if weights.weight_t == 1 else mul(mean_t, weights.weight_t))
        if weights.weight_n:
            terms.append(mean_n if weights.weight_n == 1 else mul(mean_n, weights.weight_n))
        total = terms[0] if len(terms) == 1 else add(terms[0], terms[1])
    values = (mean_t.item(), mean_n.item())
    if not all(math.isfinite(v) for v in values):
        return values
    net.zero_grad()
    emb.zero_grad()
    tape.backward(total)
    optimizer_t.step()
    optimizer_n.step()
    return values


def normal_partners(batch: Sequence[PatchSample], pool_by_id: dict, normals: Sequence[Roi], rng,
                    patch_size: int, augment: bool) -> list[PatchSample]:
    """A normal patch for every tumor patch, from the same case when it has one."""
    out = []
    for sample in batch:
        normal = pool_by_id[sample.roi_id].normal
        if normal is None:
            normal = normals[int(rng.integers(len(normals)))]
        p = sample_training_patch(normal, normal.density, rng, patch_size)
        out.append(augment_patch(p, rng) if augment else p)
    return out


def _normals(pool):
    normals = [r.normal for r in pool if r.normal is not None]
    if not normals:
        raise InvalidInputError("joint training needs normal ROIs attached to the pool")
    return normals


def joint_batches(pool, pool_by_id, normals, config: TrainConfig, stream: int, epoch: int, index: int, patch: int):
    # the tumor half uses the same generator as plain training, so batches match
    tumor = make_balanced_batch(pool, config.batch_size, batch_rng(config.seed, stream, epoch, index),
                                patch, augment=config.augment)
    normal_rng = batch_rng(config.seed, NORMAL_STREAM + stream, epoch, index)
    normal = normal_partners(tumor, pool_by_id, normals, normal_rng, patch, config.augment)
    return tumor, normal


def evaluate_joint(net, emb, val_pool, config: TrainConfig) -> tuple[float, float]:
    net.eval()
    emb.eval()
    by_id = {r.roi_id: r for r in val_pool}
    normals = _normals(val_pool)
    lt, ln = [], []
    for i in range(config.val_iters_per_epoch):
        tumor, normal = joint_batches(val_pool, by_id, normals, config, VAL_STREAM, 0, i, net.config.input_size)
        t_img, targets = batch_arrays(tumor, net.dtype)
        n_img, _ = batch_arrays(normal, emb.dtype)
        loss_t, loss_n = joint_losses(net, emb, t_img, n_img, targets, config.alpha)
        lt.append(mean(loss_t).item())
        ln.append(mean(loss_n).item())
    net.train()
    emb.train()
    return float(np.mean(lt)), float(np.mean(ln))


def train_joint(net: RegressionNet, emb: EmbeddingNet, pool: Sequence[Roi], val_pool: Sequence[Roi],
                config: TrainConfig, weights: JointLossWeights = JointLossWeights(), progress=None) -> TrainResult:
    """Joint training; early stopping follows the validation regression loss."""
    check_pools(pool, val_pool)
    _check_widths(net, emb)
    pool_by_id = {r.roi_id: r for r in pool}
    normals = _normals(pool)
    _normals(val_pool)
    opt_t = Adam(net.parameters(), learning_rate=config.learning_rate)
    opt_n = Adam(emb.parameters(), learning_rate=config.learning_rate)
    patch = net.config.input_size

    def run_epoch(epoch):
        lt, ln = [], []
        for it in range(config.train_iters_per_epoch):
            tumor, normal = joint_batches(pool, pool_by_id, normals, config, TRAIN_STREAM, epoch, it, patch)
            t_img, targets = batch_arrays(tumor, net.dtype)
            n_img, _ = batch_arrays(normal, emb.dtype)
            a, b = joint_train_step(net, emb, opt_t, opt_n, t_img, n_img, targets, weights, config.alpha)
            if not (math.isfinite(a) and math.isfinite(b)):
                raise TrainingDivergedError(epoch)
            lt.append(a)
            ln.append(b)
        return float(np.mean(lt)), float(np.mean(ln))

    history, best_epoch = fit_with_early_stopping(
        [net, emb], config, run_epoch, lambda: evaluate_joint(net, emb, val_pool, config), progress)
    return TrainResult(net, history, best_epoch, embedding_net=emb)
