"""The dual-branch video model: shared per-frame conv encoder, temporal
convolution, and two linear heads (classifier + alignment embedding).

Parameters live in a ParamSet with a fixed iteration order and are updated
purely functionally, so inner-loop adaptation can stay differentiable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError
from .graph import GradientMap, Tensor, as_tensor
from . import ops

CHECKPOINT_MAGIC = b"LMNPRM01"


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    in_channels: int = 1
    conv_widths: tuple[int, ...] = (8, 8, 8, 8)
    temporal_kernel: int = 6
    embedding_dim: int = 64
    num_classes: int = 5
    padding: str = "same"  # "same" keeps 3x3 conv size; "valid" shrinks by 2
    norm_mode: str = "batch"  # "batch" (transductive) or "instance" (per-sample)
    aux_dim: int = 64
    bn_eps: float = 1e-5

    def validate(self) -> None:
        if self.frames < self.temporal_kernel:
            raise ConfigError(f"frames={self.frames} must be >= temporal kernel {self.temporal_kernel}")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.norm_mode not in ("batch", "instance"):
            raise ConfigError(f"norm_mode must be 'batch' or 'instance', got {self.norm_mode!r}")
        if len(self.conv_widths) != 4 or any(w < 1 for w in self.conv_widths):
            raise ConfigError(f"conv_widths must be 4 positive ints, got {self.conv_widths}")
        if min(self.embedding_dim, self.aux_dim, self.num_classes, self.in_channels) < 1:
            raise ConfigError("embedding_dim, aux_dim, num_classes, in_channels must be positive")
        h, w = self.height, self.width
        for i in range(4):
            if self.padding == "valid":
                h, w = h - 2, w - 2
            if h < 2 or w < 2 or h % 2 or w % 2:
                raise ConfigError(
                    f"spatial size {h}x{w} before pooling in block {i + 1} must be even and >= 2 "
                    f"(input {self.height}x{self.width}, padding={self.padding})")
            h, w = h // 2, w // 2

    def encoder_output_hw(self) -> tuple[int, int]:
        h, w = self.height, self.width
        for _ in range(4):
            if self.padding == "valid":
                h, w = h - 2, w - 2
            h, w = h // 2, w // 2
        return h, w

    @property
    def conv_padding(self) -> int:
        return 1 if self.padding == "same" else 0


@dataclass
class ModelOutputs:
    logits: Tensor
    embedding: Tensor
    aux_embedding: Tensor


class ParamSet(Mapping[str, Tensor]):
    """Named parameter tensors with a fixed, deterministic order.

    ``replace`` returns a new ParamSet; shapes are pinned at construction
    and enforced on every replacement.
    """

    __slots__ = ("_names", "_tensors")

    def __init__(self, items: Mapping[str, Tensor] | list[tuple[str, Tensor]]):
        pairs = list(items.items()) if isinstance(items, Mapping) else list(items)
        names = [n for n, _ in pairs]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self._names = tuple(names)
        self._tensors = {n: as_tensor(t) for n, t in pairs}

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._names)

    def __len__(self) -> int:
        return len(self._names)

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    def replace(self, updates: Mapping[str, Tensor]) -> "ParamSet":
        unknown = set(updates) - set(self._names)
        if unknown:
            raise KeyError(f"unknown parameter names: {sorted(unknown)}")
        new = []
        for n in self._names:
            t = as_tensor(updates.get(n, self._tensors[n]))
            if t.shape != self._tensors[n].shape:
                raise ShapeError(f"parameter {n!r}: shape {t.shape} != {self._tensors[n].shape}")
            new.append((n, t))
        return ParamSet(new)

    def detached(self) -> "ParamSet":
        return ParamSet([(n, self._tensors[n].detach()) for n in self._names])

    def total_size(self) -> int:
        return sum(t.size for t in self._tensors.values())


def param_spec(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list defining ParamSet order for a config."""
    config.validate()
    spec: list[tuple[str, tuple[int, ...]]] = []
    cin = config.in_channels
    for i, width in enumerate(config.conv_widths, start=1):
        spec.append((f"block{i}.conv.w", (width, cin, 3, 3)))
        spec.append((f"block{i}.bn.gamma", (width,)))
        spec.append((f"block{i}.bn.beta", (width,)))
        cin = width
    spec.append(("temporal.w", (config.embedding_dim, cin, config.temporal_kernel)))
    spec.append(("temporal.b", (config.embedding_dim,)))
    spec.append(("temporal.bn.gamma", (config.embedding_dim,)))
    spec.append(("temporal.bn.beta", (config.embedding_dim,)))
    spec.append(("head_pri.w", (config.num_classes, config.embedding_dim)))
    spec.append(("head_pri.b", (config.num_classes,)))
    spec.append(("head_aux.w", (config.aux_dim, config.embedding_dim)))
    spec.append(("head_aux.b", (config.aux_dim,)))
    return spec


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def init_params(config: ModelConfig, seed: int) -> ParamSet:
    """He-uniform conv/linear weights, zero biases, unit/zero norm scales."""
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x1A17)))
    items = []
    for name, shape in param_spec(config):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            items.append((name, Tensor(_he_uniform(rng, shape, fan_in))))
        elif name.endswith(".bn.gamma"):
            items.append((name, Tensor(np.ones(shape))))
        else:
            items.append((name, Tensor(np.zeros(shape))))
    return ParamSet(items)


def forward(params: Mapping[str, Tensor], batch, config: ModelConfig) -> ModelOutputs:
    """Run the encoder and both heads on a (B, M, C, H, W) batch.

    The per-frame encoder shares weights across frames; the temporal
    convolution mixes frames; global average pooling over remaining time
    and space yields the shared embedding.
    """
    x = as_tensor(batch)
    if x.ndim != 5:
        raise ShapeError(f"forward: batch must be (B, M, C, H, W), got shape {x.shape}")
    b, m, c, h, w = x.shape
    if (m, c, h, w) != (config.frames, config.in_channels, config.height, config.width):
        raise ShapeError(f"forward: batch shape {x.shape} does not match config "
                         f"(frames={config.frames}, channels={config.in_channels}, "
                         f"{config.height}x{config.width})")

    bn_axes = (0, 2, 3) if config.norm_mode == "batch" else (2, 3)
    pad = config.conv_padding

    hcur = x.reshape((b * m, c, h, w))
    for i in range(1, 5):
        hcur = ops.conv2d(hcur, params[f"block{i}.conv.w"], padding=pad)
        hcur = ops.batchnorm(hcur, params[f"block{i}.bn.gamma"], params[f"block{i}.bn.beta"],
                             axes=bn_axes, eps=config.bn_eps)
        hcur = ops.relu(hcur)
        hcur = ops.maxpool2d(hcur)

    fh, fw = hcur.shape[2], hcur.shape[3]
    feat = hcur.reshape((b, m, hcur.shape[1], fh, fw))
    t = ops.conv3d_temporal(feat, params["temporal.w"])
    t = ops.add(t, params["temporal.b"].reshape((config.embedding_dim, 1, 1)))
    # normalization + relu follow the temporal convolution stage like the
    # 2-D blocks; channel axis is 2 in the (B, T', E, H, W) layout
    t_axes = (0, 1, 3, 4) if config.norm_mode == "batch" else (1, 3, 4)
    t = ops.batchnorm(t, params["temporal.bn.gamma"], params["temporal.bn.beta"],
                      axes=t_axes, eps=config.bn_eps, channel_axis=2)
    t = ops.relu(t)
    embedding = t.mean(axis=(1, 3, 4))

    logits = ops.add(ops.matmul(embedding, ops.transpose(params["head_pri.w"])), params["head_pri.b"])
    aux = ops.add(ops.matmul(embedding, ops.transpose(params["head_aux.w"])), params["head_aux.b"])
    return ModelOutputs(logits=logits, embedding=embedding, aux_embedding=aux)


def apply_update(params: Mapping[str, Tensor], grads, lr: float,
                 differentiable: bool) -> "ParamSet | dict[str, Tensor]":
    """One gradient-descent step, p' = p - lr * grad(p), per parameter.

    ``grads`` may be a GradientMap over the params' graph or a name->Tensor
    mapping.  In differentiable mode the updated tensors keep their graph
    dependency on the originals; otherwise they are detached values.
    """
    def grad_for(name: str, p: Tensor) -> Tensor:
        if isinstance(grads, GradientMap):
            g = grads.get(p)
        else:
            g = grads.get(name)
        if g is None:
            raise KeyError(f"missing gradient for parameter {name!r}")
        return g

    updated: dict[str, Tensor] = {}
    for name in params:
        p = params[name]
        g = grad_for(name, p)
        if differentiable:
            updated[name] = ops.sub(p, ops.mul(g, float(lr)))
        else:
            updated[name] = Tensor(p.data - lr * g.data)
    if isinstance(params, ParamSet):
        return params.replace(updated)
    return updated


def save_params(params: ParamSet) -> bytes:
    """Serialize: magic, u32-LE manifest length, JSON manifest, raw f64-LE payloads."""
    manifest = [{"name": n, "shape": list(params[n].shape)} for n in params]
    mbytes = json.dumps(manifest).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(mbytes)), mbytes]
    for n in params:
        chunks.append(params[n].data.astype("<f8").tobytes())
    return b"".join(chunks)


def load_params(blob: bytes, config: ModelConfig) -> ParamSet:
    if len(blob) < len(CHECKPOINT_MAGIC) + 4:
        raise CheckpointError("checkpoint truncated before header")
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:8]!r}; expected {CHECKPOINT_MAGIC!r}")
    (mlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + mlen:
        raise CheckpointError("checkpoint truncated inside manifest")
    try:
        manifest = json.loads(blob[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from exc

    expected = param_spec(config)
    if [m["name"] for m in manifest] != [n for n, _ in expected]:
        raise CheckpointError(
            f"checkpoint parameters {[m['name'] for m in manifest]} do not match config")
    for m, (name, shape) in zip(manifest, expected):
        if tuple(m["shape"]) != shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint has {tuple(m['shape'])}, "
                f"config expects {shape}")

    items = []
    offset = 12 + mlen
    for name, shape in expected:
        nbytes = int(np.prod(shape)) * 8
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"checkpoint truncated in payload of {name!r}")
        items.append((name, Tensor(np.frombuffer(chunk, dtype="<f8").reshape(shape))))
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after payloads")
    return ParamSet(items)
