"""Arousal detection network: channel mixing, a strided conv pyramid, a
bidirectional recurrent block, and twin anchor heads.

Data flow for a segment of C channels and T samples (batch axis N):

    input (N, 1, C, T)
      -> mixing conv, kernel (C, 1), C maps, ReLU        (N, C, 1, T)
      -> n_blocks x [conv (1, k) stride (1, s) + BN + ReLU]
                                                         (N, F, 1, T')
      -> bidirectional GRU over time                     (N, F, 2, T')
      -> average-pool time by anchor_pool                (N, F, 2, T'')
      -> classification head, (2, 1) conv, softmax       (N, W, n_classes + 1)
      -> localization head,   (2, 1) conv, linear        (N, W, 2)

where T' = T / s^n_blocks, F = base_maps * 2^n_blocks, T'' = T' / anchor_pool
and W = T'' * windows_per_anchor.  Each of the W windows carries a class
distribution (class 0 is background) and a (center offset, log duration
ratio) regression pair.

Conv blocks pad the time axis by (kernel - stride) total so the decimation
is exactly T / s per block.  Average pooling happens *before* the heads, so
each anchor's scores summarize its whole pooled span.

Transfer surgery (``replace_input_layers``) re-instantiates the mixing layer
and the first conv block (convolution + batch norm, including running
statistics) for a new channel count and copies every other parameter
bit-exactly.  Freeze policies implement from-scratch / frozen-trunk /
fine-tune training modes; a frozen batch-norm runs in eval mode off its
stored statistics.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import nncore
from .nncore import ops
from .nncore.tensor import ShapeError, Tensor


class ConfigurationError(ValueError):
    """Model geometry violates a divisibility or positivity constraint."""


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int
    segment_samples: int
    base_maps: int = 4
    kernel_size: int = 3
    stride: int = 2
    n_blocks: int = 6
    n_classes: int = 1
    windows_per_anchor: int = 1
    anchor_pool: int = 15

    def __post_init__(self):
        for label in (
            "in_channels",
            "segment_samples",
            "base_maps",
            "kernel_size",
            "stride",
            "n_blocks",
            "n_classes",
            "windows_per_anchor",
            "anchor_pool",
        ):
            if getattr(self, label) < 1:
                raise ConfigurationError(f"{label} must be >= 1")
        if self.kernel_size < self.stride:
            raise ConfigurationError(
                f"kernel_size {self.kernel_size} < stride {self.stride}: "
                "blocks would skip samples"
            )
        decim = self.stride ** self.n_blocks
        if self.segment_samples % decim:
            raise ConfigurationError(
                f"segment_samples {self.segment_samples} not divisible by "
                f"stride^n_blocks = {decim}"
            )
        if self.decimated_len % self.anchor_pool:
            raise ConfigurationError(
                f"decimated length {self.decimated_len} not divisible by "
                f"anchor_pool {self.anchor_pool}"
            )

    @property
    def decimated_len(self) -> int:
        return self.segment_samples // self.stride ** self.n_blocks

    @property
    def feature_maps(self) -> int:
        return self.base_maps * 2 ** self.n_blocks

    @property
    def n_anchor_positions(self) -> int:
        return self.decimated_len // self.anchor_pool

    @property
    def n_windows(self) -> int:
        return self.n_anchor_positions * self.windows_per_anchor


@dataclass
class NetworkOutput:
    """Per-window class probabilities and box regressions (Tensors)."""

    p: Tensor  # (N, W, n_classes + 1), rows sum to 1
    y: Tensor  # (N, W, 2)


def _block_maps(config: ModelConfig, k: int) -> int:
    """Feature maps produced by conv block k (1-based)."""
    return config.base_maps * 2 ** k


class DetectionModel:
    INPUT_BLOCKS = ("mix", "block1")

    def __init__(self, config: ModelConfig, seed: int, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.provenance: dict | None = None
        c, k, s = config.in_channels, config.kernel_size, config.stride
        pad_total = k - s
        pad = ((0, 0), (pad_total // 2, pad_total - pad_total // 2))
        self.mix = nncore.Conv2d(
            "mix", 1, c, kernel=(c, 1), seed=seed, dtype=dtype
        )
        self.blocks = []
        in_maps = c
        for i in range(1, config.n_blocks + 1):
            out_maps = _block_maps(config, i)
            conv = nncore.Conv2d(
                f"conv{i}",
                in_maps,
                out_maps,
                kernel=(1, k),
                stride=(1, s),
                padding=pad,
                seed=seed,
                dtype=dtype,
            )
            bn = nncore.BatchNorm2d(f"bn{i}", out_maps, dtype=dtype)
            self.blocks.append((conv, bn))
            in_maps = out_maps
        f = config.feature_maps
        self.rec = nncore.BiGRU("rec", f, f, seed=seed, dtype=dtype)
        self.clf_head = nncore.Conv2d(
            "clf",
            f,
            (config.n_classes + 1) * config.windows_per_anchor,
            kernel=(2, 1),
            seed=seed,
            dtype=dtype,
        )
        self.loc_head = nncore.Conv2d(
            "loc",
            f,
            2 * config.windows_per_anchor,
            kernel=(2, 1),
            seed=seed,
            dtype=dtype,
        )

    # -- structure ---------------------------------------------------------

    def named_blocks(self) -> dict:
        blocks = {"mix": [self.mix]}
        for i, (conv, bn) in enumerate(self.blocks, start=1):
            blocks[f"block{i}"] = [conv, bn]
        blocks["rec"] = [self.rec]
        blocks["clf"] = [self.clf_head]
        blocks["loc"] = [self.loc_head]
        return blocks

    def parameters(self) -> list:
        return [
            p for layers in self.named_blocks().values() for layer in layers
            for p in layer.parameters()
        ]

    def batchnorms(self) -> list:
        return [bn for _, bn in self.blocks]

    def parameter_census(self) -> dict:
        """name -> (size, frozen) for every parameter, in graph order."""
        return {
            p.name: (int(p.data.size), p.frozen) for p in self.parameters()
        }

    def trainable_parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters() if not p.frozen)

    # -- forward -----------------------------------------------------------

    def forward(self, x: Tensor, training: bool = False) -> NetworkOutput:
        cfg = self.config
        expected = (1, cfg.in_channels, cfg.segment_samples)
        if x.data.ndim != 4 or x.data.shape[1:] != expected:
            raise ShapeError(
                f"expected input (N, 1, {cfg.in_channels}, {cfg.segment_samples}), "
                f"got {x.data.shape}"
            )
        n = x.data.shape[0]
        h = ops.relu(self.mix(x))  # (N, C, 1, T)
        for conv, bn in self.blocks:
            bn_training = training and not bn.gamma.frozen
            h = ops.relu(bn(conv(h), training=bn_training))
        f, t_prime = cfg.feature_maps, cfg.decimated_len
        h = ops.reshape(h, (n, f, t_prime))
        h = self.rec(h)  # (N, F, 2, T')
        h = ops.avgpool1d(h, cfg.anchor_pool)  # (N, F, 2, T'')
        t2 = cfg.n_anchor_positions
        nd, kc = cfg.windows_per_anchor, cfg.n_classes + 1
        logits = self.clf_head(h)  # (N, nd*kc, 1, T'')
        logits = ops.reshape(logits, (n, nd, kc, t2))
        logits = ops.transpose(logits, (0, 3, 1, 2))  # (N, T'', nd, kc)
        logits = ops.reshape(logits, (n, t2 * nd, kc))
        p = ops.softmax(logits, axis=-1)
        boxes = self.loc_head(h)  # (N, nd*2, 1, T'')
        boxes = ops.reshape(boxes, (n, nd, 2, t2))
        boxes = ops.transpose(boxes, (0, 3, 1, 2))
        boxes = ops.reshape(boxes, (n, t2 * nd, 2))
        return NetworkOutput(p=p, y=boxes)

    __call__ = forward

    # -- training policies ---------------------------------------------------

    def set_trainable(self, policy: str) -> None:
        if policy == "all":
            for p in self.parameters():
                p.frozen = False
        elif policy == "input_layers_only":
            keep = {
                p.name
                for name in self.INPUT_BLOCKS
                for layer in self.named_blocks()[name]
                for p in layer.parameters()
            }
            for p in self.parameters():
                p.frozen = p.name not in keep
        else:
            raise ValueError(f"unknown trainable policy {policy!r}")


def build(config: ModelConfig, rng_seed: int, dtype=np.float32) -> DetectionModel:
    return DetectionModel(config, rng_seed, dtype=dtype)


def replace_input_layers(
    model: DetectionModel, new_in_channels: int, rng_seed: int
) -> DetectionModel:
    """Rebuild the mixing layer and first conv block for a new channel count.

    The replacement layers get a fresh seeded initialization (and reset
    batch-norm statistics); every other parameter, buffer, and frozen flag
    is copied bit-exactly from the source model.
    """
    if new_in_channels < 1:
        raise ConfigurationError("new_in_channels must be >= 1")
    new_cfg = replace(model.config, in_channels=new_in_channels)
    out = DetectionModel(new_cfg, rng_seed, dtype=model.dtype)
    src_blocks = model.named_blocks()
    dst_blocks = out.named_blocks()
    for name, src_layers in src_blocks.items():
        if name in DetectionModel.INPUT_BLOCKS:
            continue
        for src_layer, dst_layer in zip(src_layers, dst_blocks[name]):
            for sp, dp in zip(src_layer.parameters(), dst_layer.parameters()):
                dp.tensor.data = sp.tensor.data.copy()
                dp.frozen = sp.frozen
            if isinstance(src_layer, nncore.BatchNorm2d):
                dst_layer.running_mean = src_layer.running_mean.copy()
                dst_layer.running_var = src_layer.running_var.copy()
                dst_layer.initialized = src_layer.initialized
    out.provenance = {
        "surgery": {
            "from_channels": model.config.in_channels,
            "to_channels": new_in_channels,
            "replaced": list(DetectionModel.INPUT_BLOCKS),
            "source": (model.provenance or {}).get("checkpoint_id"),
        }
    }
    return out


# -- checkpoints -------------------------------------------------------------


def save_model(model: DetectionModel, path, *, extra=None) -> None:
    entries = [
        nncore.CheckpointEntry(p.name, "param", p.data, frozen=p.frozen)
        for p in model.parameters()
    ]
    for bn in model.batchnorms():
        for name, buf in bn.buffers():
            entries.append(nncore.CheckpointEntry(name, "buffer", buf))
    nncore.save_checkpoint(
        path,
        entries,
        config=asdict(model.config),
        provenance=model.provenance,
        extra=extra,
    )


def load_model(path, dtype=np.float32) -> DetectionModel:
    ck = nncore.load_checkpoint(path)
    config = ModelConfig(**ck.config)
    model = DetectionModel(config, seed=0, dtype=dtype)
    for p in model.parameters():
        entry = ck.entries.get(p.name)
        if entry is None:
            raise nncore.CheckpointFormatError(
                f"{path}: checkpoint missing parameter {p.name!r}"
            )
        if entry.array.shape != p.data.shape:
            raise nncore.CheckpointFormatError(
                f"{path}: parameter {p.name!r} has shape {entry.array.shape}, "
                f"model expects {p.data.shape}"
            )
        p.tensor.data = entry.array.astype(dtype)
        p.frozen = entry.frozen
    for bn in model.batchnorms():
        for name, _ in bn.buffers():
            entry = ck.entries.get(name)
            if entry is None:
                raise nncore.CheckpointFormatError(
                    f"{path}: checkpoint missing buffer {name!r}"
                )
            bn.load_buffer(name, entry.array)
    model.provenance = ck.provenance
    return model


def checkpoint_id(path) -> str:
    """Content hash used to record surgery lineage."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]
