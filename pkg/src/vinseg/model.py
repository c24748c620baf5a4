"""ResFCN and the boundary-aware two-branch variant (B-ResFCN).

The backbone is an original-ordering ResNet (conv-BN-ReLU-conv-BN, add the
skip, ReLU) with a 7x7/2 stem and 3x3/2 max-pool, followed by three stages
whose first block strides by 2. Outputs of the three stages (strides 8, 16
and 32) each go through a 1x1 conv to a single logit channel, are upsampled
bilinearly to the input size, summed and passed through a sigmoid. The
two-branch model owns two such heads on the same backbone features.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from .tensor import (
    DTYPE,
    BatchNormState,
    ShapeError,
    Tensor,
    add,
    batchnorm2d,
    bce_sum,
    conv2d,
    maxpool2d,
    relu,
    scale,
    sigmoid,
    upsample_bilinear,
)

BRANCH_NAMES = ("seg", "boundary")
LEVELS = (8, 16, 32)


@dataclass
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64)
    blocks_per_stage: tuple = (2, 2, 2)
    input_channels: int = 3

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)

    def validate(self) -> None:
        if len(self.stage_channels) != 3 or len(self.blocks_per_stage) != 3:
            raise ValueError("backbone needs exactly three stages (strides 8, 16, 32)")
        if min(self.stage_channels + (self.stem_channels, self.input_channels)) < 1:
            raise ValueError("all channel counts must be >= 1")
        if min(self.blocks_per_stage) < 1:
            raise ValueError("every stage needs at least one block")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    branches: int = 2
    lam: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        self.backbone.validate()
        if self.branches not in (1, 2):
            raise ValueError(f"branches must be 1 (ResFCN) or 2 (B-ResFCN), got {self.branches}")
        if not self.lam >= 0 or not math.isfinite(self.lam):
            raise ValueError(f"lambda must be a finite non-negative number, got {self.lam}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["stage_channels"] = list(self.backbone.stage_channels)
        d["backbone"]["blocks_per_stage"] = list(self.backbone.blocks_per_stage)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        lam = d.pop("lambda", d.pop("lam", 0.1))
        return cls(backbone=BackboneConfig(**d.pop("backbone", {})), lam=float(lam), **d)


def toy_config(branches: int = 2, seed: int = 0, lam: float = 0.1) -> ModelConfig:
    return ModelConfig(BackboneConfig(), branches=branches, lam=lam, seed=seed)


def glorot_limit(shape: tuple) -> float:
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    return math.sqrt(6.0 / (fan_in + fan_out))


@dataclass
class ConvBN:
    """Bias-free convolution followed by batch normalization."""

    weight: Tensor
    gamma: Tensor
    beta: Tensor
    state: BatchNormState
    stride: int
    pad: int

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = conv2d(x, self.weight, None, self.stride, self.pad)
        return batchnorm2d(y, self.gamma, self.beta, self.state, training)


@dataclass
class ResidualBlock:
    conv1: ConvBN
    conv2: ConvBN
    proj: Optional[ConvBN]
    in_channels: int
    out_channels: int
    stride: int


@dataclass
class BranchHead:
    """Three 1x1 convs, one per fused level, each down to a single logit."""

    weights: list
    biases: list


def residual_block_forward(x: Tensor, block: ResidualBlock, training: bool = True) -> Tensor:
    if x.shape[1] != block.in_channels:
        raise ShapeError(f"residual block expects {block.in_channels} channels, got {x.shape[1]}")
    h = relu(block.conv1(x, training))
    h = block.conv2(h, training)
    skip = x if block.proj is None else block.proj(x, training)
    if skip.shape != h.shape:
        raise ShapeError(f"identity skip {skip.shape} cannot be added to residual {h.shape}")
    return relu(add(h, skip))


def branch_logits(feats: tuple, head: BranchHead, out_h: int, out_w: int) -> Tensor:
    total = None
    for f, w, b in zip(feats, head.weights, head.biases):
        if f.shape[1] != w.shape[1]:
            raise ShapeError(f"head expects {w.shape[1]} channels, feature has {f.shape[1]}")
        up = upsample_bilinear(conv2d(f, w, b), out_h, out_w)
        total = up if total is None else add(total, up)
    return total


def branch_forward(f8: Tensor, f16: Tensor, f32: Tensor, head: BranchHead, out_h: int, out_w: int) -> Tensor:
    return sigmoid(branch_logits((f8, f16, f32), head, out_h, out_w))


class Model:
    """Parameters, batch-norm state and structure of a ResFCN/B-ResFCN."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.training = True
        self.params: dict[str, Tensor] = {}
        self.bn_states: dict[str, BatchNormState] = {}
        rng = np.random.default_rng(config.seed)
        bb = config.backbone

        self.stem = self._conv_bn("stem", bb.input_channels, bb.stem_channels, 7, 2, 3, rng)
        self.stages: list[list[ResidualBlock]] = []
        c_in = bb.stem_channels
        for s, (c_out, nblocks) in enumerate(zip(bb.stage_channels, bb.blocks_per_stage), start=1):
            blocks = []
            for bi in range(nblocks):
                stride = 2 if bi == 0 else 1
                prefix = f"stage{s}.block{bi}"
                conv1 = self._conv_bn(f"{prefix}.conv1", c_in, c_out, 3, stride, 1, rng)
                conv2 = self._conv_bn(f"{prefix}.conv2", c_out, c_out, 3, 1, 1, rng)
                proj = None
                if stride != 1 or c_in != c_out:
                    proj = self._conv_bn(f"{prefix}.proj", c_in, c_out, 1, stride, 0, rng)
                blocks.append(ResidualBlock(conv1, conv2, proj, c_in, c_out, stride))
                c_in = c_out
            self.stages.append(blocks)

        self.heads: dict[str, BranchHead] = {}
        for name in BRANCH_NAMES[: config.branches]:
            ws, bs = [], []
            for level, c in zip(LEVELS, bb.stage_channels):
                ws.append(self._glorot(f"head_{name}.level{level}.weight", (1, c, 1, 1), rng))
                bs.append(self._add(f"head_{name}.level{level}.bias", np.zeros(1, dtype=DTYPE)))
            self.heads[name] = BranchHead(ws, bs)

    # construction helpers -------------------------------------------------

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _glorot(self, name: str, shape: tuple, rng) -> Tensor:
        lim = glorot_limit(shape)
        return self._add(name, rng.uniform(-lim, lim, size=shape).astype(DTYPE))

    def _conv_bn(self, name, c_in, c_out, k, stride, pad, rng) -> ConvBN:
        w = self._glorot(f"{name}.weight", (c_out, c_in, k, k), rng)
        gamma = self._add(f"{name}.bn.gamma", np.ones(c_out, dtype=DTYPE))
        beta = self._add(f"{name}.bn.beta", np.zeros(c_out, dtype=DTYPE))
        state = BatchNormState.fresh(c_out)
        self.bn_states[f"{name}.bn"] = state
        return ConvBN(w, gamma, beta, state, stride, pad)

    # accessors --------------------------------------------------------------

    @property
    def branches(self) -> int:
        return self.config.branches

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every persistent array: parameters, then running statistics."""
        out = {name: p.data for name, p in self.params.items()}
        for name, st in self.bn_states.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = set(expected) - set(arrays)
        extra = set(arrays) - set(expected)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, ref in expected.items():
            arr = np.asarray(arrays[name])
            if arr.shape != ref.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != model shape {ref.shape}")
            # in place, so the BN state objects held by blocks stay bound
            ref[...] = arr

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}


def build_model(config: ModelConfig) -> Model:
    return Model(config)


def backbone_forward(model: Model, image: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    if image.data.ndim != 4:
        raise ShapeError(f"image must be (n, c, h, w), got {image.shape}")
    _, c, h, w = image.shape
    if c != model.config.backbone.input_channels:
        raise ShapeError(f"model expects {model.config.backbone.input_channels} input channels, got {c}")
    if h % 32 or w % 32:
        raise ShapeError(f"input extent {h}x{w} must be divisible by 32")
    training = model.training
    x = relu(model.stem(image, training))
    x = maxpool2d(x, 3, 2, 1)
    feats = []
    for blocks in model.stages:
        for block in blocks:
            x = residual_block_forward(x, block, training)
        feats.append(x)
    return tuple(feats)


def multitask_forward(model: Model, image: Tensor) -> tuple[Tensor, Optional[Tensor]]:
    """Shared backbone pass, then one probability map per branch."""
    f8, f16, f32 = backbone_forward(model, image)
    h, w = image.shape[2:]
    seg = branch_forward(f8, f16, f32, model.heads["seg"], h, w)
    boundary = None
    if "boundary" in model.heads:
        boundary = branch_forward(f8, f16, f32, model.heads["boundary"], h, w)
    return seg, boundary


def joint_loss(seg_prob: Tensor, boundary_prob: Optional[Tensor], y, b, lam: float) -> Tensor:
    """``L_s + lam * L_b`` with both terms summed binary cross-entropies."""
    loss_s = bce_sum(seg_prob, y)
    if boundary_prob is None:
        return loss_s
    if boundary_prob.shape != seg_prob.shape:
        raise ShapeError(f"branch outputs differ: {seg_prob.shape} vs {boundary_prob.shape}")
    return add(loss_s, scale(bce_sum(boundary_prob, b), lam))
