"""Dense-block regression network, density-guided patch sampling and training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .core import PleomorphismScore, quantize
from .errors import InvalidConfigError, InvalidInputError, InvalidShapeError, TrainingDivergedError
from .inference import DensityMap
from .numerics import (
    Adam,
    BatchNorm,
    Conv2d,
    Linear,
    Module,
    Tape,
    Tensor,
    avg_pool2d,
    dense_concat,
    global_avg_pool,
    max_pool2d,
    mean,
    relu,
    reshape,
    smooth_l1,
)

log = logging.getLogger(__name__)


# network ---------------------------------------------------------------------

@dataclass(frozen=True)
class RegressionNetConfig:
    input_size: int = 64
    stem_channels: int = 16
    blocks: tuple[tuple[int, int], ...] = ((4, 12), (4, 12))
    transition_compression: float = 0.5
    head_features: int = 128
    stem_kernel: int = 3
    stem_stride: int = 2
    stem_pool: int = 2
    output_bias: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple((int(a), int(b)) for a, b in self.blocks))
        if not self.blocks or any(n < 1 or g < 1 for n, g in self.blocks):
            raise InvalidConfigError(f"blocks must be non-empty (layers, growth) pairs, got {self.blocks}")
        if not 0 < self.transition_compression <= 1:
            raise InvalidConfigError("transition_compression must lie in (0, 1]")
        if min(self.input_size, self.stem_channels, self.head_features, self.stem_stride, self.stem_pool) < 1:
            raise InvalidConfigError("sizes must be positive")
        if self.input_size % self.downsampling:
            raise InvalidConfigError(
                f"input size {self.input_size} is not a multiple of the downsampling factor {self.downsampling}")

    @property
    def downsampling(self) -> int:
        return self.stem_stride * self.stem_pool * 2 ** (len(self.blocks) - 1)

    @classmethod
    def full_scale(cls):
        return cls(input_size=512, stem_channels=64, blocks=((6, 32), (12, 32), (24, 32), (16, 32)),
                   head_features=1024, stem_kernel=7)


class NetOutput(NamedTuple):
    score: Tensor          # (N,)
    penultimate: Tensor    # (N, head_features), pre-activation
    block_maps: Tensor     # last dense block output, (N, C, h, w)


class DenseLayer(Module):
    def __init__(self, cin, growth, rng, dtype):
        self.norm = BatchNorm(cin, dtype=dtype)
        self.conv = Conv2d(cin, growth, 3, 1, 1, bias=False, rng=rng, dtype=dtype)

    def __call__(self, x):
        return self.conv(relu(self.norm(x)))


class DenseBlock(Module):
    """Each layer sees the concatenation of the block input and all earlier layer outputs."""

    def __init__(self, cin, n_layers, growth, rng, dtype):
        self.layers = [DenseLayer(cin + i * growth, growth, rng, dtype) for i in range(n_layers)]
        self.out_channels = cin + n_layers * growth

    def __call__(self, x):
        features = [x]
        for layer in self.layers:
            inp = features[0] if len(features) == 1 else dense_concat(features)
            features.append(layer(inp))
        return dense_concat(features)


class Transition(Module):
    def __init__(self, cin, cout, rng, dtype):
        self.norm = BatchNorm(cin, dtype=dtype)
        self.conv = Conv2d(cin, cout, 1, bias=False, rng=rng, dtype=dtype)

    def __call__(self, x):
        return avg_pool2d(self.conv(relu(self.norm(x))), 2)


class RegressionNet(Module):
    def __init__(self, config: RegressionNetConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config.stem_channels
        self.stem = Conv2d(3, c, config.stem_kernel, config.stem_stride, config.stem_kernel // 2,
                           bias=False, rng=rng, dtype=dtype)
        self.stem_norm = BatchNorm(c, dtype=dtype)
        self.blocks = []
        self.transitions = []
        self.block_out_channels = []
        for i, (n_layers, growth) in enumerate(config.blocks):
            block = DenseBlock(c, n_layers, growth, rng, dtype)
            self.blocks.append(block)
            c = block.out_channels
            self.block_out_channels.append(c)
            if i < len(config.blocks) - 1:
                cout = max(1, int(math.floor(c * config.transition_compression)))
                self.transitions.append(Transition(c, cout, rng, dtype))
                c = cout
        self.final_norm = BatchNorm(c, dtype=dtype)
        self.head = Linear(c, config.head_features, rng=rng, dtype=dtype)
        self.out = Linear(config.head_features, 1, rng=rng, dtype=dtype, gain=1.0)
        self.out.bias.data[:] = config.output_bias
        self.feature_channels = c

    @property
    def dtype(self):
        return self.stem.weight.dtype

    def forward_all(self, x) -> NetOutput:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        size = self.config.input_size
        if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
            raise InvalidShapeError(f"expected (N, 3, {size}, {size}) input, got {x.shape}")
        h = relu(self.stem_norm(self.stem(x)))
        if self.config.stem_pool > 1:
            h = max_pool2d(h, self.config.stem_pool)
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i < len(self.transitions):
                h = self.transitions[i](h)
        block_maps = h
        pooled = global_avg_pool(relu(self.final_norm(h)))
        penultimate = self.head(pooled)
        score = self.out(relu(penultimate))
        n = score.shape[0]
        return NetOutput(reshape(score, (n,)), penultimate, block_maps)

    def __call__(self, x) -> Tensor:
        return self.forward_all(x).score

    def predict(self, images, batch_size: int = 32) -> np.ndarray:
        """Raw scores for an (N, 3, H, W) array, in inference mode, without a tape."""
        images = np.asarray(images)
        was_training = self.training
        self.eval()
        try:
            out = [self(images[i:i + batch_size].astype(self.dtype, copy=False)).data
                   for i in range(0, len(images), batch_size)]
        finally:
            self.train(was_training)
        return np.concatenate(out).astype(np.float64) if out else np.zeros(0)


def build_regression_net(config: RegressionNetConfig | None = None, seed: int = 0, dtype=np.float32) -> RegressionNet:
    return RegressionNet(config or RegressionNetConfig(), seed, dtype)


# samples ---------------------------------------------------------------------

@dataclass
class PatchSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    reference_score: float
    roi_id: str


@dataclass
class Roi:
    """A tumor (or normal) region with its reference score and cell-density map."""

    roi_id: str
    case_id: str
    image: np.ndarray  # (H, W, 3) float32
    reference_score: float
    density: DensityMap
    severity: float | None = None
    normal: "Roi | None" = None

    @property
    def category(self) -> int:
        return quantize(self.reference_score, 3)


def forward_score(net: RegressionNet, patch: PatchSample | np.ndarray) -> PleomorphismScore:
    image = np.asarray(getattr(patch, "image", patch))
    size = net.config.input_size
    if image.shape != (3, size, size):
        raise InvalidShapeError(f"patch shape {image.shape} does not match network input (3, {size}, {size})")
    return PleomorphismScore(float(net.predict(image[None])[0]))


def window_probabilities(density: DensityMap, patch_size: int) -> np.ndarray:
    """P(top-left = (y, x)) proportional to the density mass under the window."""
    d = density.values
    h, w = d.shape
    if h < patch_size or w < patch_size:
        raise InvalidInputError(f"ROI {h}x{w} is smaller than the {patch_size}px patch")
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = d.cumsum(0).cumsum(1)
    p = patch_size
    mass = integral[p:, p:] - integral[:-p, p:] - integral[p:, :-p] + integral[:-p, :-p]
    mass = np.maximum(mass, 0.0)
    total = mass.sum()
    if not total > 0:
        raise InvalidInputError("density map has no mass under any patch window")
    return mass / total


def sample_training_patch(roi: Roi, density: DensityMap | None, rng, patch_size: int = 64) -> PatchSample:
    density = density if density is not None else roi.density
    if density.shape != roi.image.shape[:2]:
        raise InvalidInputError("density map extent does not match the ROI")
    probs = window_probabilities(density, patch_size)
    flat = int(rng.choice(probs.size, p=probs.reshape(-1)))
    y, x = divmod(flat, probs.shape[1])
    crop = roi.image[y:y + patch_size, x:x + patch_size].transpose(2, 0, 1)
    return PatchSample(np.ascontiguousarray(crop, dtype=np.float32), float(roi.reference_score), roi.roi_id)


def balanced_category_counts(batch_size: int, rng, k: int = 3) -> np.ndarray:
    counts = np.full(k, batch_size // k)
    extra = rng.choice(k, batch_size % k, replace=False)
    counts[extra] += 1
    return counts


def group_by_category(pool: Sequence[Roi], k: int = 3) -> dict:
    groups = {c: [] for c in range(1, k + 1)}
    for roi in pool:
        groups[quantize(roi.reference_score, k)].append(roi)
    missing = [c for c, rois in groups.items() if not rois]
    if missing:
        raise InvalidInputError(f"pool has no ROI in quantized categories {missing}")
    return groups


def make_balanced_batch(pool: Sequence[Roi], batch_size: int, rng, patch_size: int = 64,
                        augment: bool = True) -> list[PatchSample]:
    """Patches whose quantized reference scores differ in count by at most one."""
    groups = group_by_category(pool)
    counts = balanced_category_counts(batch_size, rng)
    cats = np.repeat(np.arange(1, 4), counts)
    rng.shuffle(cats)
    batch = []
    for c in cats:
        rois = groups[int(c)]
        roi = rois[int(rng.integers(len(rois)))]
        sample = sample_training_patch(roi, roi.density, rng, patch_size)
        batch.append(augment_patch(sample, rng) if augment else sample)
    return batch


# augmentation ----------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    dihedral: int = 0                         # 0-3 rotations by 90 deg, 4-7 the same after a horizontal flip
    gain: tuple = (1.0, 1.0, 1.0)
    offset: tuple = (0.0, 0.0, 0.0)
    hue_angle: float = 0.0                    # radians, rotation about the grey axis
    blur_sigma: float | None = None


def draw_augment_params(rng, blur_probability: float = 0.25) -> AugmentParams:
    dihedral = int(rng.integers(8))
    gain = tuple(float(g) for g in rng.uniform(0.8, 1.25, 3))
    offset = tuple(float(o) for o in rng.uniform(-0.08, 0.08, 3))
    hue = float(rng.uniform(-0.1, 0.1))
    blur = float(rng.uniform(0.5, 1.5)) if rng.random() < blur_probability else None
    return AugmentParams(dihedral, gain, offset, hue, blur)


def apply_dihedral(image: np.ndarray, k: int) -> np.ndarray:
    out = np.rot90(image, k % 4, axes=(1, 2))
    if k >= 4:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, :, ::-1])


def _grey_axis_rotation(angle):
    u = np.ones(3) / math.sqrt(3)
    ux = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    return math.cos(angle) * np.eye(3) + math.sin(angle) * ux + (1 - math.cos(angle)) * np.outer(u, u)


def apply_augment(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = apply_dihedral(image, params.dihedral) if params.dihedral else image.copy()
    if params.gain != (1.0, 1.0, 1.0) or params.offset != (0.0, 0.0, 0.0):
        out = out * np.asarray(params.gain, dtype=out.dtype)[:, None, None] \
            + np.asarray(params.offset, dtype=out.dtype)[:, None, None]
        out = np.clip(out, 0.0, 1.0)
    if params.hue_angle:
        rot = _grey_axis_rotation(params.hue_angle).astype(out.dtype)
        out = np.clip(np.tensordot(rot, out, axes=(1, 0)), 0.0, 1.0)
    if params.blur_sigma:
        out = ndimage.gaussian_filter(out, sigma=(0, params.blur_sigma, params.blur_sigma), mode="reflect")
    return out.astype(np.float32, copy=False)


def augment_patch(patch: PatchSample, rng, params: AugmentParams | None = None) -> PatchSample:
    params = params if params is not None else draw_augment_params(rng)
    return replace(patch, image=apply_augment(patch.image, params))


# training --------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 12
    train_iters_per_epoch: int = 200
    val_iters_per_epoch: int = 500
    patience_epochs: int = 10
    alpha: float = 1.0
    seed: int = 0
    max_epochs: int = 100
    augment: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InvalidConfigError("learning rate must be >= 0")
        for name in ("batch_size", "train_iters_per_epoch", "val_iters_per_epoch", "patience_epochs", "max_epochs"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be positive")
        if not self.alpha > 0:
            raise InvalidConfigError("alpha must be > 0")

    @classmethod
    def desk(cls, **overrides):
        base = dict(train_iters_per_epoch=50, val_iters_per_epoch=8, patience_epochs=10, max_epochs=120)
        base.update(overrides)
        return cls(**base)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_loss_n: float | None = None
    val_loss_n: float | None = None


@dataclass
class TrainResult:
    net: RegressionNet
    history: list = field(default_factory=list)
    best_epoch: int = 0
    embedding_net: Module | None = None


def batch_arrays(batch: Sequence[PatchSample], dtype=np.float32):
    images = np.stack([p.image for p in batch]).astype(dtype, copy=False)
    targets = np.array([p.reference_score for p in batch], dtype=dtype)
    return images, targets


def batch_loss(net: RegressionNet, images, targets, alpha: float = 1.0) -> Tensor:
    return mean(smooth_l1(net(images), targets, alpha))


def train_step(net: RegressionNet, optimizer: Adam, images, targets, alpha: float = 1.0) -> float:
    net.train()
    with Tape() as tape:
        loss = batch_loss(net, images, targets, alpha)
    value = loss.item()
    if not math.isfinite(value):
        return value
    net.zero_grad()
    tape.backward(loss)
    optimizer.step()
    return value


def batch_rng(seed: int, stream: int, epoch: int, index: int):
    """Independent generator per batch, so batches can be prepared ahead."""
    return np.random.default_rng([seed, stream, epoch, index])


VAL_STREAM, TRAIN_STREAM = 1, 0


def validation_batches(val_pool, config: TrainConfig, patch_size: int):
    # the same batches every epoch so validation losses are comparable
    for i in range(config.val_iters_per_epoch):
        yield make_balanced_batch(val_pool, config.batch_size, batch_rng(config.seed, VAL_STREAM, 0, i),
                                  patch_size, augment=config.augment)


def evaluate_loss(net: RegressionNet, val_pool, config: TrainConfig) -> float:
    net.eval()
    losses = []
    for batch in validation_batches(val_pool, config, net.config.input_size):
        images, targets = batch_arrays(batch, net.dtype)
        losses.append(batch_loss(net, images, targets, config.alpha).item())
    net.train()
    return float(np.mean(losses))


def check_pools(pool, val_pool):
    if not pool or not val_pool:
        raise InvalidInputError("training and validation pools must be non-empty")
    group_by_category(pool)
    group_by_category(val_pool)


def fit_with_early_stopping(modules: Sequence[Module], config: TrainConfig, run_epoch, validate,
                            progress=None) -> tuple[list, int]:
    """Shared epoch loop.

    ``run_epoch(epoch)`` returns the mean training loss (or a tuple of
    losses); ``validate()`` likewise, with the first entry driving early
    stopping. Modules are restored to their best-validation state.
    """
    best, best_states, best_epoch, stale = math.inf, None, 0, 0
    history = []
    for epoch in range(config.max_epochs):
        train_losses = np.atleast_1d(run_epoch(epoch)).astype(float)
        val_losses = np.atleast_1d(validate()).astype(float)
        if not (np.isfinite(train_losses).all() and np.isfinite(val_losses).all()):
            raise TrainingDivergedError(epoch)
        record = EpochRecord(epoch, float(train_losses[0]), float(val_losses[0]),
                             float(train_losses[1]) if train_losses.size > 1 else None,
                             float(val_losses[1]) if val_losses.size > 1 else None)
        history.append(record)
        log.info("epoch %d train %.4f val %.4f", epoch, record.train_loss, record.val_loss)
        if progress:
            progress(record)
        if record.val_loss < best:
            best, best_epoch, stale = record.val_loss, epoch, 0
            best_states = [{k: v.copy() for k, v in m.state_dict().items()} for m in modules]
        else:
            stale += 1
            if stale >= config.patience_epochs:
                break
    if best_states is not None:
        for m, state in zip(modules, best_states):
            m.load_state_dict(state)
    for m in modules:
        m.eval()
    return history, best_epoch


def train(net: RegressionNet, pool: Sequence[Roi], val_pool: Sequence[Roi], config: TrainConfig,
          progress=None) -> TrainResult:
    """Epochs of balanced-batch Adam steps with early stopping on validation loss.

    Returns the network restored to its best-validation state.
    """
    check_pools(pool, val_pool)
    optimizer = Adam(net.parameters(), learning_rate=config.learning_rate)
    patch = net.config.input_size

    def run_epoch(epoch):
        losses = []
        for it in range(config.train_iters_per_epoch):
            batch = make_balanced_batch(pool, config.batch_size, batch_rng(config.seed, TRAIN_STREAM, epoch, it),
                                        patch, augment=config.augment)
            images, targets = batch_arrays(batch, net.dtype)
            value = train_step(net, optimizer, images, targets, config.alpha)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch)
            losses.append(value)
        return float(np.mean(losses))

    history, best_epoch = fit_with_early_stopping([net], config, run_epoch,
                                                  lambda: evaluate_loss(net, val_pool, config), progress)
    return TrainResult(net, history, best_epoch)
