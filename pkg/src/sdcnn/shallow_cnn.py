"""Shallow patch-regression CNN mapping 15×15 input patches to 3×3 output patches.

Architecture (stride 1, no padding)::

    15×15×1 --conv 7×7, 10 filters, ReLU--> 9×9×10
            --conv 7×7, 10 filters, ReLU--> 3×3×10
            --conv 1×1, 1 filter, linear--> 3×3×1

5421 trainable parameters, trained with plain mini-batch SGD on the mean squared
error. Forward and backward passes are written out with numpy; arrays are laid out
``(batch, channel, row, column)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from logging import getLogger
from pathlib import Path
from typing import TYPE_CHECKING, NamedTuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from sdcnn import checks, contract, schemas
from sdcnn._lib import atomic_write_bytes, atomic_write_json
from sdcnn.errors import (
    ConfigurationError,
    ShapeError,
    TrainingDivergenceError,
    WeightLoadError,
)
from sdcnn.imagecore import ImageGrid

if TYPE_CHECKING:  # pragma: no cover
    import os
    from collections.abc import Sequence

logger = getLogger(__name__)

INPUT_SIZE = 15
OUTPUT_SIZE = 3
LAYER_NAMES = ("layer1", "layer2", "output_layer")
#: Kernel shapes ``(out_channels, in_channels, kh, kw)`` per layer.
KERNEL_SHAPES = {
    "layer1": (10, 1, 7, 7),
    "layer2": (10, 10, 7, 7),
    "output_layer": (1, 10, 1, 1),
}
MODEL_FORMAT = "sdcnn-shallow-cnn"


@dataclass(frozen=True, eq=False)
class ConvLayerParams:
    """Kernels ``[out][in][kh][kw]`` and biases ``[out]`` of one convolution."""

    kernels: np.ndarray
    biases: np.ndarray

    def __post_init__(self) -> None:
        kernels = np.array(self.kernels, dtype=np.float64, copy=True)
        biases = np.array(self.biases, dtype=np.float64, copy=True)
        if kernels.ndim != 4 or biases.shape != (kernels.shape[0],):  # noqa: PLR2004
            msg = f"inconsistent layer shapes {kernels.shape} / {biases.shape}"
            raise ShapeError(msg)
        if not (np.isfinite(kernels).all() and np.isfinite(biases).all()):
            raise ConfigurationError("layer parameters must be finite")
        kernels.setflags(write=False)
        biases.setflags(write=False)
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "biases", biases)

    @property
    def size(self) -> int:
        """Number of trainable values."""
        return int(self.kernels.size + self.biases.size)


@dataclass(frozen=True, eq=False)
class ShallowCnnModel:
    """Parameters of the three convolution layers."""

    layer1: ConvLayerParams
    layer2: ConvLayerParams
    output_layer: ConvLayerParams
    rng_seed: int = 0

    def __post_init__(self) -> None:
        for name, layer in zip(LAYER_NAMES, self.layers()):
            if layer.kernels.shape != KERNEL_SHAPES[name]:
                msg = (
                    f"{name}: kernels {layer.kernels.shape},"
                    f" expected {KERNEL_SHAPES[name]}"
                )
                raise ShapeError(msg)

    def layers(self) -> tuple[ConvLayerParams, ConvLayerParams, ConvLayerParams]:
        """Layers in forward order."""
        return (self.layer1, self.layer2, self.output_layer)

    def flat(self) -> np.ndarray:
        """All parameters in canonical order (per layer: kernels, then biases)."""
        return np.concatenate(
            [
                a.ravel()
                for layer in self.layers()
                for a in (layer.kernels, layer.biases)
            ]
        )

    @classmethod
    def from_flat(cls, values: np.ndarray, rng_seed: int = 0) -> ShallowCnnModel:
        """Inverse of :meth:`flat`."""
        values = np.asarray(values, dtype=np.float64)
        expected = sum(int(np.prod(s)) + s[0] for s in KERNEL_SHAPES.values())
        if values.shape != (expected,):
            msg = f"expected {expected} parameters, got {values.shape}"
            raise ShapeError(msg)
        layers = []
        pos = 0
        for name in LAYER_NAMES:
            shape = KERNEL_SHAPES[name]
            n_k = int(np.prod(shape))
            kernels = values[pos : pos + n_k].reshape(shape)
            biases = values[pos + n_k : pos + n_k + shape[0]]
            pos += n_k + shape[0]
            layers.append(ConvLayerParams(kernels, biases))
        return cls(*layers, rng_seed=rng_seed)


class ModelGradient(NamedTuple):
    """Gradient of the loss, laid out like :class:`ShallowCnnModel`."""

    layer1: ConvLayerParams
    layer2: ConvLayerParams
    output_layer: ConvLayerParams

    def flat(self) -> np.ndarray:
        """All components in the canonical parameter order."""
        return np.concatenate(
            [a.ravel() for layer in self for a in (layer.kernels, layer.biases)]
        )


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch SGD settings.

    ``patience`` stops training once the validation MSE has not improved for that
    many epochs; ``None`` disables early stopping.
    """

    learning_rate: float = 0.01
    batch_size: int = 128
    epochs: int = 50
    rng_seed: int = 0
    patience: int | None = 10

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            msg = f"learning_rate must be >= 0, got {self.learning_rate}"
            raise ConfigurationError(msg)
        if self.batch_size < 1:
            msg = f"batch_size must be >= 1, got {self.batch_size}"
            raise ConfigurationError(msg)
        if self.epochs < 0:
            msg = f"epochs must be >= 0, got {self.epochs}"
            raise ConfigurationError(msg)
        if self.patience is not None and self.patience < 1:
            msg = f"patience must be >= 1, got {self.patience}"
            raise ConfigurationError(msg)


@dataclass(frozen=True, eq=False)
class PatchPair:
    """A 15×15 input patch and the 3×3 target patch at the same centre."""

    input: ImageGrid
    target: ImageGrid

    def __post_init__(self) -> None:
        _check_shape(self.input.data, (INPUT_SIZE, INPUT_SIZE), "input patch")
        _check_shape(self.target.data, (OUTPUT_SIZE, OUTPUT_SIZE), "target patch")


class EpochRecord(NamedTuple):
    """Mean training loss and validation MSE after one epoch."""

    epoch: int
    train_loss: float
    validation_mse: float | None


class TrainResult(NamedTuple):
    """Trained model and its per-epoch history."""

    model: ShallowCnnModel
    history: tuple[EpochRecord, ...]


def _check_shape(arr: np.ndarray, shape: tuple[int, ...], what: str) -> None:
    if arr.shape != shape:
        msg = f"{what} must have shape {shape}, got {arr.shape}"
        raise ShapeError(msg)


def init_model(rng_seed: int) -> ShallowCnnModel:
    """Glorot-uniform kernels, zero biases, deterministic in *rng_seed*."""
    rng = np.random.default_rng(rng_seed)
    layers = []
    for name in LAYER_NAMES:
        out_c, in_c, kh, kw = KERNEL_SHAPES[name]
        limit = np.sqrt(6.0 / (in_c * kh * kw + out_c * kh * kw))
        kernels = rng.uniform(-limit, limit, size=KERNEL_SHAPES[name])
        layers.append(ConvLayerParams(kernels, np.zeros(out_c)))
    return ShallowCnnModel(*layers, rng_seed=rng_seed)


def parameter_count(model: ShallowCnnModel) -> int:
    """Number of trainable parameters (5421 for the fixed architecture)."""
    return sum(layer.size for layer in model.layers())


def _conv(x: np.ndarray, layer: ConvLayerParams) -> np.ndarray:
    _, _, kh, kw = layer.kernels.shape
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", windows, layer.kernels, optimize=True)
    return out + layer.biases[None, :, None, None]


def _conv_kernel_grad(x: np.ndarray, dout: np.ndarray, kh: int, kw: int) -> np.ndarray:
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return np.einsum("nchwij,nohw->ocij", windows, dout, optimize=True)


def _conv_input_grad(dout: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    _, _, kh, kw = kernels.shape
    padded = np.pad(dout, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    flipped = kernels[:, :, ::-1, ::-1]
    return np.einsum("nohwij,ocij->nchw", windows, flipped, optimize=True)


class _Activations(NamedTuple):
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    out: np.ndarray


def _forward(model: ShallowCnnModel, x: np.ndarray) -> _Activations:
    z1 = _conv(x, model.layer1)
    a1 = np.maximum(z1, 0.0)
    z2 = _conv(a1, model.layer2)
    a2 = np.maximum(z2, 0.0)
    return _Activations(x, z1, a1, z2, a2, _conv(a2, model.output_layer))


def _backward(
    model: ShallowCnnModel, acts: _Activations, dout: np.ndarray
) -> ModelGradient:
    grads = []
    d_z = dout
    layer_inputs = (acts.x, acts.a1, acts.a2)
    pre_activations = (acts.z1, acts.z2)
    for idx in (2, 1, 0):
        layer = model.layers()[idx]
        _, _, kh, kw = layer.kernels.shape
        grads.append(
            ConvLayerParams(
                _conv_kernel_grad(layer_inputs[idx], d_z, kh, kw),
                d_z.sum(axis=(0, 2, 3)),
            )
        )
        if idx > 0:
            # ReLU subgradient at 0 is 0
            d_z = _conv_input_grad(d_z, layer.kernels) * (pre_activations[idx - 1] > 0)
    return ModelGradient(*reversed(grads))


def _stack_inputs(inputs: np.ndarray) -> np.ndarray:
    arr = np.asarray(inputs, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[1:] != (INPUT_SIZE, INPUT_SIZE):  # noqa: PLR2004
        msg = f"inputs must have shape (N, 15, 15), got {arr.shape}"
        raise ShapeError(msg)
    return arr[:, None, :, :]


def forward_batch(model: ShallowCnnModel, inputs: np.ndarray) -> np.ndarray:
    """Predict ``(N, 3, 3)`` patches for ``(N, 15, 15)`` inputs."""
    return _forward(model, _stack_inputs(inputs)).out[:, 0]


def forward(model: ShallowCnnModel, input_patch: ImageGrid) -> ImageGrid:
    """Predict the 3×3 patch for one 15×15 input patch."""
    _check_shape(input_patch.data, (INPUT_SIZE, INPUT_SIZE), "input patch")
    return ImageGrid(forward_batch(model, input_patch.data[None])[0])


def loss_mse(pred: ImageGrid, target: ImageGrid) -> float:
    """Mean squared difference over the nine output pixels.

    >>> loss_mse(ImageGrid(np.ones((3, 3))), ImageGrid(np.zeros((3, 3))))
    1.0
    """
    _check_shape(pred.data, (OUTPUT_SIZE, OUTPUT_SIZE), "prediction")
    _check_shape(target.data, (OUTPUT_SIZE, OUTPUT_SIZE), "target")
    return float(np.mean((pred.data - target.data) ** 2))


def batch_gradient(
    model: ShallowCnnModel, inputs: np.ndarray, targets: np.ndarray
) -> tuple[float, ModelGradient]:
    """Mean loss and mean gradient over a batch.

    :param inputs: ``(N, 15, 15)`` input patches.
    :param targets: ``(N, 3, 3)`` target patches.
    """
    x = _stack_inputs(inputs)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != (x.shape[0], OUTPUT_SIZE, OUTPUT_SIZE):
        msg = f"targets must have shape ({x.shape[0]}, 3, 3), got {y.shape}"
        raise ShapeError(msg)
    acts = _forward(model, x)
    diff = acts.out - y[:, None]
    loss = float(np.mean(diff**2))
    dout = 2.0 * diff / diff.size
    return loss, _backward(model, acts, dout)


def backward(
    model: ShallowCnnModel, input_patch: ImageGrid, target: ImageGrid
) -> ModelGradient:
    """Exact gradient of :func:`loss_mse` of one sample w.r.t. every parameter."""
    _check_shape(input_patch.data, (INPUT_SIZE, INPUT_SIZE), "input patch")
    _check_shape(target.data, (OUTPUT_SIZE, OUTPUT_SIZE), "target")
    return batch_gradient(model, input_patch.data[None], target.data[None])[1]


def stack_pairs(pairs: Sequence[PatchPair]) -> tuple[np.ndarray, np.ndarray]:
    """Stack pairs into ``(N, 15, 15)`` inputs and ``(N, 3, 3)`` targets."""
    if not pairs:
        return np.empty((0, INPUT_SIZE, INPUT_SIZE)), np.empty((0, 3, 3))
    return (
        np.stack([p.input.data for p in pairs]),
        np.stack([p.target.data for p in pairs]),
    )


def evaluate_mse(model: ShallowCnnModel, pairs: Sequence[PatchPair]) -> float:
    """Mean squared error of the model over *pairs*."""
    inputs, targets = stack_pairs(pairs)
    return float(np.mean((forward_batch(model, inputs) - targets) ** 2))


def train(
    model: ShallowCnnModel,
    pairs: Sequence[PatchPair],
    config: TrainConfig,
    validation: Sequence[PatchPair] = (),
) -> TrainResult:
    """Mini-batch SGD over *pairs*.

    Each epoch shuffles the pairs with a generator seeded by ``config.rng_seed``,
    walks them in batches of ``config.batch_size`` (the last one may be smaller)
    and applies ``θ ← θ − lr · mean gradient``. The recorded training loss is the
    mean per-sample loss seen during the epoch. With a validation set and early stopping
    enabled, the weights of the best validation epoch are returned.

    Raises :class:`~sdcnn.errors.TrainingDivergenceError` as soon as a batch loss or
    an updated parameter is not finite.
    """
    if not pairs:
        raise ConfigurationError("training needs at least one patch pair")
    inputs, targets = stack_pairs(pairs)
    n = len(inputs)
    rng = np.random.default_rng(config.rng_seed)
    history: list[EpochRecord] = []
    best_model, best_mse, stale = model, np.inf, 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grad = batch_gradient(model, inputs[idx], targets[idx])
                theta = model.flat() - config.learning_rate * grad.flat()
            loss_sum += loss * len(idx)
            if not (np.isfinite(loss) and np.isfinite(theta).all()):
                msg = (
                    f"training diverged in epoch {epoch} "
                    f"(batch loss {loss:.6g}, learning rate {config.learning_rate})"
                )
                raise TrainingDivergenceError(msg)
            model = ShallowCnnModel.from_flat(theta, rng_seed=model.rng_seed)
        val_mse = evaluate_mse(model, validation) if validation else None
        history.append(EpochRecord(epoch, loss_sum / n, val_mse))
        logger.info(
            "epoch %d: train loss %.6g, validation MSE %s",
            epoch,
            loss_sum / n,
            "n/a" if val_mse is None else f"{val_mse:.6g}",
        )
        if val_mse is None or config.patience is None:
            continue
        if val_mse < best_mse:
            best_model, best_mse, stale = model, val_mse, 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info(
                    "validation MSE did not improve for %d epochs; stopping at %d",
                    stale,
                    epoch,
                )
                break
    if validation and config.patience is not None and history:
        model = best_model
    return TrainResult(model, tuple(history))


@contract.result(schemas.LOSS_HISTORY, checks.same_length_as("history"))
def history_frame(history: Sequence[EpochRecord]) -> pd.DataFrame:
    """Loss history as a table (``epoch, train_loss, validation_mse``)."""
    return pd.DataFrame(
        {
            "epoch": pd.Series([r.epoch for r in history], dtype=int),
            "train_loss": pd.Series([r.train_loss for r in history], dtype=float),
            "validation_mse": pd.Series(
                [
                    np.nan if r.validation_mse is None else r.validation_mse
                    for r in history
                ],
                dtype=float,
            ),
        }
    )


def save_model(
    path: str | os.PathLike[str],
    model: ShallowCnnModel,
    config: TrainConfig | None = None,
) -> Path:
    """Write a JSON manifest at *path* and a float64 blob ``<name>.bin`` next to it.

    The blob holds, little-endian, the kernels then biases of ``layer1``,
    ``layer2`` and ``output_layer`` in that order.
    """
    path = Path(path)
    blob = path.with_name(path.name + ".bin")
    atomic_write_bytes(blob, model.flat().astype("<f8").tobytes())
    manifest = {
        "format": MODEL_FORMAT,
        "version": 1,
        "dtype": "<f8",
        "blob": blob.name,
        "rng_seed": model.rng_seed,
        "layers": [
            {
                "name": name,
                "kernels_shape": list(KERNEL_SHAPES[name]),
                "biases_shape": [KERNEL_SHAPES[name][0]],
            }
            for name in LAYER_NAMES
        ],
        "config": asdict(config) if config is not None else None,
    }
    return atomic_write_json(path, manifest)


def load_model(path: str | os.PathLike[str]) -> ShallowCnnModel:
    """Read a model written by :func:`save_model`."""
    path = Path(path)
    manifest = json.loads(path.read_text("utf-8"))
    if manifest.get("format") != MODEL_FORMAT:
        msg = f"{path}: not a shallow CNN manifest"
        raise WeightLoadError(msg)
    for entry in manifest["layers"]:
        if tuple(entry["kernels_shape"]) != KERNEL_SHAPES.get(entry["name"]):
            msg = f"{path}: unexpected shape for {entry['name']}"
            raise WeightLoadError(msg)
    raw = (path.parent / manifest["blob"]).read_bytes()
    values = np.frombuffer(raw, dtype="<f8")
    return ShallowCnnModel.from_flat(values, rng_seed=int(manifest["rng_seed"]))
