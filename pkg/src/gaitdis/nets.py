"""Encoder, decoder, pose LSTM, and the two identity classifiers.

The encoder maps a 64x32x3 frame to a 320-d vector split, in fixed order, into
appearance (128), canonical (128), and pose (64) features. The decoder maps
the 320-d concatenation back to a frame through a sigmoid output. A 3-layer
LSTM with 256 hidden units aggregates pose features over time. Classifiers
are single linear layers used only during training.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .containers import read_container, write_container
from .errors import InvalidInputError, NumericFaultError

APPEARANCE_DIM = 128
CANONICAL_DIM = 128
POSE_DIM = 64
FEATURE_DIM = APPEARANCE_DIM + CANONICAL_DIM + POSE_DIM  # 320
LSTM_HIDDEN = 256
LSTM_LAYERS = 3
CHECKPOINT_VERSION = 1

LEAKY_SLOPE = 0.2


@dataclass
class DisentangledFeatures:
    """Per-frame feature triple; arrays are (n, dim)."""

    f_a: np.ndarray
    f_c: np.ndarray
    f_p: np.ndarray


def split_features(feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Split the 320-d encoder output as [appearance | canonical | pose]."""
    f_a = feat[..., :APPEARANCE_DIM]
    f_c = feat[..., APPEARANCE_DIM : APPEARANCE_DIM + CANONICAL_DIM]
    f_p = feat[..., APPEARANCE_DIM + CANONICAL_DIM :]
    return f_a, f_c, f_p


class FrameEncoder(nn.Module):
    """Conv stack: 3x3 convs with max pooling down to a 320-d feature.

    With `large_model` an extra stride-2 conv is inserted before the last
    pool; it is omitted by default to avoid overfitting small training sets.
    """

    def __init__(self, large_model: bool = False):
        super().__init__()
        self.large_model = large_model
        layers = [
            ("conv1", nn.Conv2d(3, 64, 3, stride=1, padding=1)),
            ("bn1", nn.BatchNorm2d(64)),
            ("act1", nn.LeakyReLU(LEAKY_SLOPE)),
            ("pool1", nn.MaxPool2d(3, stride=2, padding=1)),
            ("conv2", nn.Conv2d(64, 256, 3, stride=1, padding=1)),
            ("bn2", nn.BatchNorm2d(256)),
            ("act2", nn.LeakyReLU(LEAKY_SLOPE)),
            ("pool2", nn.MaxPool2d(3, stride=2, padding=1)),
            ("conv3", nn.Conv2d(256, 512, 3, stride=2, padding=1)),
            ("bn3", nn.BatchNorm2d(512)),
            ("act3", nn.LeakyReLU(LEAKY_SLOPE)),
        ]
        if large_model:
            layers += [
                ("conv4", nn.Conv2d(512, 512, 3, stride=2, padding=1)),
                ("bn4", nn.BatchNorm2d(512)),
                ("act4", nn.LeakyReLU(LEAKY_SLOPE)),
            ]
        layers += [("pool3", nn.MaxPool2d(3, stride=2, padding=1))]
        self.features = nn.Sequential()
        for name, mod in layers:
            self.features.add_module(name, mod)
        spatial = 2 * 1 if large_model else 4 * 2
        self.fc = nn.Linear(512 * spatial, FEATURE_DIM)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        return self.fc(h.flatten(1))


class FrameDecoder(nn.Module):
    """FC to 4x2x512 then four stride-2 transposed convs up to 64x32x3."""

    def __init__(self):
        super().__init__()
        self.fc = nn.Linear(FEATURE_DIM, 4 * 2 * 512)
        self.net = nn.Sequential()
        for name, mod in [
            ("tconv1", nn.ConvTranspose2d(512, 256, 3, stride=2, padding=1, output_padding=1)),
            ("bn1", nn.BatchNorm2d(256)),
            ("act1", nn.LeakyReLU(LEAKY_SLOPE)),
            ("tconv2", nn.ConvTranspose2d(256, 128, 3, stride=2, padding=1, output_padding=1)),
            ("bn2", nn.BatchNorm2d(128)),
            ("act2", nn.LeakyReLU(LEAKY_SLOPE)),
            ("tconv3", nn.ConvTranspose2d(128, 64, 3, stride=2, padding=1, output_padding=1)),
            ("bn3", nn.BatchNorm2d(64)),
            ("act3", nn.LeakyReLU(LEAKY_SLOPE)),
            ("tconv4", nn.ConvTranspose2d(64, 3, 3, stride=2, padding=1, output_padding=1)),
            ("out", nn.Sigmoid()),
        ]:
            self.net.add_module(name, mod)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        h = self.fc(feat).view(-1, 512, 4, 2)
        return self.net(h)


class GaitModel(nn.Module):
    """Bundle of all trainable parts plus the label mapping metadata."""

    def __init__(self, n_train_subjects: int, large_model: bool = False):
        super().__init__()
        if n_train_subjects < 1:
            raise InvalidInputError("n_train_subjects must be >= 1")
        self.n_train_subjects = n_train_subjects
        self.large_model = large_model
        self.encoder = FrameEncoder(large_model=large_model)
        self.decoder = FrameDecoder()
        self.lstm = nn.LSTM(POSE_DIM, LSTM_HIDDEN, LSTM_LAYERS)
        self.classifier_sg = nn.Linear(CANONICAL_DIM, n_train_subjects)
        self.classifier_dg = nn.Linear(LSTM_HIDDEN, n_train_subjects)

    def lstm_outputs(self, pose_seq: torch.Tensor) -> torch.Tensor:
        """Run the pose sequence (T, B, 64) or (T, 64) through the LSTM.

        Output h_t at each step depends only on inputs up to t. State is
        zero-initialized for every sequence.
        """
        if pose_seq.shape[0] < 1:
            raise InvalidInputError("pose sequence must contain at least one step")
        squeeze = pose_seq.dim() == 2
        if squeeze:
            pose_seq = pose_seq.unsqueeze(1)
        out, _ = self.lstm(pose_seq)
        return out.squeeze(1) if squeeze else out


def init_weights(model: GaitModel, seed: int) -> GaitModel:
    """Deterministic initialization.

    Convolutions and linear layers draw from a zero-mean normal with the gain
    for leaky-ReLU slope 0.2; recurrent weights are orthogonal; all biases
    (including the classifiers') start at zero.
    """
    gen = torch.Generator().manual_seed(seed)

    def normal_(tensor, fan_in):
        gain = nn.init.calculate_gain("leaky_relu", LEAKY_SLOPE)
        std = gain / (fan_in**0.5)
        with torch.no_grad():
            tensor.copy_(torch.randn(tensor.shape, generator=gen, dtype=tensor.dtype) * std)

    for mod in model.modules():
        if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
            normal_(mod.weight, fan_in)
            if mod.bias is not None:
                nn.init.zeros_(mod.bias)
        elif isinstance(mod, nn.Linear):
            normal_(mod.weight, mod.in_features)
            nn.init.zeros_(mod.bias)
        elif isinstance(mod, nn.BatchNorm2d):
            nn.init.ones_(mod.weight)
            nn.init.zeros_(mod.bias)
        elif isinstance(mod, nn.LSTM):
            for name, param in mod.named_parameters():
                if name.startswith("weight"):
                    # orthogonalize each of the four gate blocks
                    with torch.no_grad():
                        for block in param.chunk(4, 0):
                            w = torch.empty(block.shape, dtype=param.dtype)
                            torch.nn.init.orthogonal_(w, gain=1.0, generator=gen)
                            block.copy_(w)
                else:
                    nn.init.zeros_(param)
    # masked person frames are mostly black; start the sigmoid output at the
    # background prior so reconstruction gradients focus on the figure
    with torch.no_grad():
        model.decoder.net.tconv4.bias.fill_(-3.0)
    return model


def _check_finite_layers(module: nn.Sequential, x: torch.Tensor) -> torch.Tensor:
    for name, layer in module.named_children():
        x = layer(x)
        if not torch.isfinite(x).all():
            raise NumericFaultError("non-finite activation", layer=name)
    return x


def _frames_to_tensor(frames: np.ndarray, like: nn.Module) -> torch.Tensor:
    param = next(like.parameters())
    arr = np.ascontiguousarray(frames, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(param.dtype)


def encode_frames(model: GaitModel, frames: np.ndarray) -> DisentangledFeatures:
    """Encode frames (n, 64, 32, 3) into the per-frame feature triple.

    Runs in evaluation mode with per-layer finiteness checks; raises
    NumericFaultError naming the faulty layer otherwise.
    """
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = _frames_to_tensor(frames, model)
            h = _check_finite_layers(model.encoder.features, x)
            feat = model.encoder.fc(h.flatten(1))
            if not torch.isfinite(feat).all():
                raise NumericFaultError("non-finite activation", layer="fc")
            f_a, f_c, f_p = split_features(feat)
            return DisentangledFeatures(
                f_a=f_a.numpy().astype(np.float32),
                f_c=f_c.numpy().astype(np.float32),
                f_p=f_p.numpy().astype(np.float32),
            )
    finally:
        model.train(was_training)


def decode_features(
    model: GaitModel, f_a: np.ndarray, f_c: np.ndarray, f_p: np.ndarray
) -> np.ndarray:
    """Decode feature triples back to frames (n, 64, 32, 3) in (0, 1)."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            param = next(model.parameters())
            parts = []
            for arr, dim in ((f_a, APPEARANCE_DIM), (f_c, CANONICAL_DIM), (f_p, POSE_DIM)):
                t = torch.as_tensor(np.asarray(arr, dtype=np.float32), dtype=param.dtype)
                if t.dim() == 1:
                    t = t.unsqueeze(0)
                if t.shape[-1] != dim:
                    raise InvalidInputError(f"feature width {t.shape[-1]} != expected {dim}")
                parts.append(t)
            feat = torch.cat(parts, dim=-1)
            h = model.decoder.fc(feat).view(-1, 512, 4, 2)
            if not torch.isfinite(h).all():
                raise NumericFaultError("non-finite activation", layer="fc")
            out = _check_finite_layers(model.decoder.net, h)
            return out.permute(0, 2, 3, 1).numpy().astype(np.float32)
    finally:
        model.train(was_training)


def classify(classifier: nn.Linear, features: torch.Tensor) -> torch.Tensor:
    """Softmax class probabilities; raises on input width mismatch."""
    if features.shape[-1] != classifier.in_features:
        raise InvalidInputError(
            f"classifier expects width {classifier.in_features}, got {features.shape[-1]}"
        )
    return torch.softmax(classifier(features), dim=-1)


def parameter_count(model: GaitModel) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(path: str | Path, model: GaitModel, iteration: int, subjects: list[str]) -> None:
    """Write the model as named float32 arrays under a JSON header."""
    arrays = {}
    int_keys = []
    for key, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype != np.float32:
            int_keys.append(key)  # e.g. BatchNorm num_batches_tracked
            arr = arr.astype(np.float32)
        arrays[key] = np.ascontiguousarray(arr, dtype=np.float32)
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "large_model": model.large_model,
        "n_train_subjects": model.n_train_subjects,
        "iteration": iteration,
        "subjects": list(subjects),
        "int_keys": int_keys,
    }
    write_container(path, kind="checkpoint", meta=meta, arrays=arrays)


def load_checkpoint(path: str | Path) -> tuple[GaitModel, dict]:
    """Rebuild a GaitModel from a checkpoint; returns (model, meta)."""
    meta, arrays = read_container(path, expected_kind="checkpoint")
    model = GaitModel(
        n_train_subjects=int(meta["n_train_subjects"]),
        large_model=bool(meta["large_model"]),
    )
    state = {}
    int_keys = set(meta.get("int_keys", []))
    reference = model.state_dict()
    for key, arr in arrays.items():
        if key not in reference:
            raise InvalidInputError(f"checkpoint array {key!r} does not match the architecture")
        tensor = torch.from_numpy(arr.astype(np.int64) if key in int_keys else arr)
        state[key] = tensor
    model.load_state_dict(state)
    model.eval()
    return model, meta
