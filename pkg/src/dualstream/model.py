"""Dual-stream classifier: texture CNN + Sobel-edge CNN, cross-attention fusion, MLP head.

Tensors are batched throughout: images are (N, C, S, S), feature vectors
(N, d).  Single vectors of shape (d,) are accepted by the projection,
fusion and head functions as well.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .augment import AugConfig, Image, apply_geometric, apply_physics, normalize_array
from .edges import sobel_array
from .errors import DimensionError
from .tensor import BatchNormState, Tensor

SHARED_DIM = 512
N_HEADS = 8
HEAD_DIM = 64
HIDDEN_DIM = 256
EDGE_CHANNELS = (32, 64, 128, 256)


@dataclass
class ModelConfig:
    image_size: int = 64
    d1: int = 256
    backbone_channels: tuple[int, ...] = (16, 32, 64, 128)
    n_classes: int = 3
    dropout_z: float = 0.4
    dropout_hidden: float = 0.2

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if self.image_size % 16:
            raise DimensionError(f"image_size must be divisible by 16, got {self.image_size}")

    @classmethod
    def full_size(cls, image_size: int = 224) -> ModelConfig:
        return cls(image_size=image_size, d1=1536)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d


def _param(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear:
    def __init__(self, n_in: int, n_out: int, bias: bool = True):
        self.W = _param(n_out, n_in)
        self.b = _param(n_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.W, self.b)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.W", self.W
        if self.b is not None:
            yield f"{prefix}.b", self.b


class ConvStage:
    """conv3x3 -> batchnorm -> ReLU -> maxpool2x2."""

    def __init__(self, c_in: int, c_out: int):
        self.kernels = _param(c_out, c_in, 3, 3)
        self.bias = _param(c_out)
        self.gamma = Tensor(np.ones(c_out), requires_grad=True)
        self.beta = _param(c_out)
        self.bn = BatchNormState(c_out)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        y = T.conv2d(x, self.kernels, self.bias)
        y = T.batchnorm2d(y, self.gamma, self.beta, self.bn, train)
        return T.maxpool2x2(T.relu(y))

    def named_parameters(self, prefix: str):
        yield f"{prefix}.kernels", self.kernels
        yield f"{prefix}.bias", self.bias
        yield f"{prefix}.bn_gamma", self.gamma
        yield f"{prefix}.bn_beta", self.beta


class ConvStack:
    """Four conv stages followed by global average pooling."""

    def __init__(self, c_in: int, channels: tuple[int, ...]):
        self.stages = []
        for c_out in channels:
            self.stages.append(ConvStage(c_in, c_out))
            c_in = c_out
        self.out_dim = c_in

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        """(C, N, H, W) channel-major batch -> (N, out_dim) pooled features."""
        if x.shape[-1] % (2 ** len(self.stages)) or x.shape[-2] % (2 ** len(self.stages)):
            raise DimensionError(f"spatial size {x.shape[-2:]} not divisible by {2 ** len(self.stages)}")
        for stage in self.stages:
            x = stage(x, train)
        return T.transpose(T.global_avg_pool(x))

    def named_parameters(self, prefix: str):
        for i, stage in enumerate(self.stages):
            yield from stage.named_parameters(f"{prefix}.stage{i}")

    def bn_states(self, prefix: str):
        for i, stage in enumerate(self.stages):
            yield f"{prefix}.stage{i}", stage.bn


class TextureBackbone(ConvStack):
    """Small CNN standing in for the pretrained texture network; emits d1 features."""

    def __init__(self, channels: tuple[int, ...], d1: int):
        super().__init__(3, channels)
        self.fc = Linear(self.out_dim, d1)
        self.d1 = d1

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return self.fc(super().__call__(x, train))

    def named_parameters(self, prefix: str):
        yield from super().named_parameters(prefix)
        yield from self.fc.named_parameters(f"{prefix}.fc")


class EdgeCNN(ConvStack):
    def __init__(self):
        super().__init__(1, EDGE_CHANNELS)


class FusionBlock:
    """Texture features query edge features with 8 heads of width 64."""

    def __init__(self):
        self.W_Q = _param(N_HEADS, HEAD_DIM, SHARED_DIM)
        self.W_K = _param(N_HEADS, HEAD_DIM, SHARED_DIM)
        self.W_V = _param(N_HEADS, HEAD_DIM, SHARED_DIM)
        self.W_O = _param(SHARED_DIM, N_HEADS * HEAD_DIM)
        self.ln_gamma = Tensor(np.ones(SHARED_DIM), requires_grad=True)
        self.ln_beta = _param(SHARED_DIM)

    def named_parameters(self, prefix: str):
        for name in ("W_Q", "W_K", "W_V", "W_O", "ln_gamma", "ln_beta"):
            yield f"{prefix}.{name}", getattr(self, name)


class ClassifierHead:
    def __init__(self, n_classes: int):
        self.fc1 = Linear(SHARED_DIM, HIDDEN_DIM)
        self.fc2 = Linear(HIDDEN_DIM, n_classes)

    def named_parameters(self, prefix: str):
        yield from self.fc1.named_parameters(f"{prefix}.fc1")
        yield from self.fc2.named_parameters(f"{prefix}.fc2")


def expected_parameter_count(cfg: ModelConfig) -> int:
    def stack(c_in, channels):
        total = 0
        for c_out in channels:
            total += c_in * c_out * 9 + 3 * c_out
            c_in = c_out
        return total

    backbone = stack(3, cfg.backbone_channels) + cfg.backbone_channels[-1] * cfg.d1 + cfg.d1
    proj1 = SHARED_DIM * cfg.d1 + SHARED_DIM
    edge = stack(1, EDGE_CHANNELS)
    proj2 = SHARED_DIM * EDGE_CHANNELS[-1] + SHARED_DIM
    fusion = 3 * N_HEADS * HEAD_DIM * SHARED_DIM + SHARED_DIM * N_HEADS * HEAD_DIM + 2 * SHARED_DIM
    head = SHARED_DIM * HIDDEN_DIM + HIDDEN_DIM + HIDDEN_DIM * cfg.n_classes + cfg.n_classes
    return backbone + proj1 + edge + proj2 + fusion + head


class DualStreamModel:
    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg or ModelConfig()
        self.backbone = TextureBackbone(self.cfg.backbone_channels, self.cfg.d1)
        self.proj1 = Linear(self.cfg.d1, SHARED_DIM)
        self.edge_cnn = EdgeCNN()
        self.proj2 = Linear(EDGE_CHANNELS[-1], SHARED_DIM)
        self.fusion = FusionBlock()
        self.head = ClassifierHead(self.cfg.n_classes)
        params = self.named_parameters()
        if len({id(p) for p in params.values()}) != len(params):
            raise AssertionError("a parameter tensor is registered twice")
        count = sum(p.size for p in params.values())
        if count != expected_parameter_count(self.cfg):
            raise AssertionError(f"parameter count {count} != {expected_parameter_count(self.cfg)}")
        self.n_parameters = count

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, part in (
            ("backbone", self.backbone),
            ("proj1", self.proj1),
            ("edge_cnn", self.edge_cnn),
            ("proj2", self.proj2),
            ("fusion", self.fusion),
            ("head", self.head),
        ):
            out.update(part.named_parameters(prefix))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def bn_states(self) -> dict[str, BatchNormState]:
        out = dict(self.backbone.bn_states("backbone"))
        out.update(self.edge_cnn.bn_states("edge_cnn"))
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def forward_views(
        self,
        texture: np.ndarray,
        edges: np.ndarray,
        train: bool,
        rng: np.random.Generator | None = None,
        zero_edge_stream: bool = False,
    ) -> Tensor:
        """Logits (N, K) from normalized texture (N, 3, S, S) and edge maps (N, 1, S, S).

        ``zero_edge_stream`` replaces the projected edge features by zeros
        (ablation of the boundary stream).
        """
        f1 = self.backbone(Tensor(texture.transpose(1, 0, 2, 3)), train)
        f1_hat = project_texture(f1, self)
        if zero_edge_stream:
            f2_hat = Tensor(np.zeros(f1_hat.shape))
        else:
            f2 = self.edge_cnn(Tensor(edges.transpose(1, 0, 2, 3)), train)
            f2_hat = project_edge(f2, self)
        z = cross_attention_fuse(f1_hat, f2_hat, self.fusion)
        return classify(z, self.head, train, rng, self.cfg.dropout_z, self.cfg.dropout_hidden)


def project_texture(f1: Tensor, model: DualStreamModel) -> Tensor:
    if f1.shape[-1] != model.cfg.d1:
        raise DimensionError(f"texture features have length {f1.shape[-1]}, expected {model.cfg.d1}")
    return T.relu(model.proj1(f1))


def project_edge(f2: Tensor, model: DualStreamModel) -> Tensor:
    if f2.shape[-1] != EDGE_CHANNELS[-1]:
        raise DimensionError(f"edge features have length {f2.shape[-1]}, expected {EDGE_CHANNELS[-1]}")
    return T.relu(model.proj2(f2))


def cross_attention_fuse(f1_hat: Tensor, f2_hat: Tensor, fusion: FusionBlock, return_weights: bool = False):
    """Per head: query from texture, key/value from edge; residual + layernorm.

    Each head attends over a single key, so its softmax weight is exactly 1.
    """
    if f1_hat.shape[-1] != SHARED_DIM or f2_hat.shape != f1_hat.shape:
        raise DimensionError(f"fusion inputs must both be (..., {SHARED_DIM}), got {f1_hat.shape} and {f2_hat.shape}")
    lead = f1_hat.shape[:-1]
    flat = (N_HEADS * HEAD_DIM, SHARED_DIM)
    q = T.reshape(T.linear(f1_hat, T.reshape(fusion.W_Q, flat)), lead + (N_HEADS, HEAD_DIM))
    k = T.reshape(T.linear(f2_hat, T.reshape(fusion.W_K, flat)), lead + (N_HEADS, HEAD_DIM))
    v = T.reshape(T.linear(f2_hat, T.reshape(fusion.W_V, flat)), lead + (N_HEADS, HEAD_DIM))
    logits = T.mul(T.tsum(T.mul(q, k), axis=-1), 1.0 / math.sqrt(HEAD_DIM))
    weights = T.softmax(T.reshape(logits, lead + (N_HEADS, 1)), axis=-1)
    heads = T.mul(weights, v)
    concat = T.reshape(heads, lead + (N_HEADS * HEAD_DIM,))
    z = T.layernorm(T.add(T.linear(concat, fusion.W_O), f1_hat), fusion.ln_gamma, fusion.ln_beta)
    if return_weights:
        return z, weights
    return z


def classify(
    z: Tensor,
    head: ClassifierHead,
    train: bool,
    rng: np.random.Generator | None = None,
    p_z: float = 0.4,
    p_hidden: float = 0.2,
) -> Tensor:
    """Dropout -> 256 -> ReLU -> dropout -> K logits (softmax is left to the caller)."""
    if z.shape[-1] != SHARED_DIM:
        raise DimensionError(f"classifier input has length {z.shape[-1]}, expected {SHARED_DIM}")
    h = T.relu(head.fc1(T.dropout(z, p_z, train, rng)))
    return head.fc2(T.dropout(h, p_hidden, train, rng))


def init_parameters(model: DualStreamModel, rng: np.random.Generator) -> DualStreamModel:
    """Kaiming-uniform weights (fan-in, ReLU gain), zero biases, unit norm scales."""
    for name, p in model.named_parameters().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bn_gamma", "ln_gamma"):
            p.data[...] = 1.0
        elif leaf in ("b", "bias", "bn_beta", "ln_beta"):
            p.data[...] = 0.0
        else:
            fan_in = int(np.prod(p.shape[1:])) if p.ndim != 3 else p.shape[-1]
            bound = math.sqrt(6.0 / fan_in)
            p.data[...] = rng.uniform(-bound, bound, size=p.shape)
        p.grad = None
    for state in model.bn_states().values():
        state.running_mean[...] = 0.0
        state.running_var[...] = 1.0
    return model


def prepare_views(
    img: Image,
    train: bool,
    aug: AugConfig | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """(texture (3, S, S), edges (1, S, S)) arrays for one model-resolution image.

    Training applies geometric augmentation to the shared input, then physics
    augmentation to the texture view only; edges come from the physics-free image.
    """
    if train:
        aug = aug or AugConfig()
        img = apply_geometric(img, aug, rng)
        textured = apply_physics(img, aug, rng)
    else:
        textured = img
    return normalize_array(textured.pixels), sobel_array(img.pixels)[None]


def forward(
    raw: Image,
    model: DualStreamModel,
    train: bool = False,
    rng: np.random.Generator | None = None,
    aug: AugConfig | None = None,
) -> Tensor:
    """Logits (K,) for one image already at model resolution.

    Train mode augments the image, but batch norm then rejects the batch of
    one; training goes through :meth:`DualStreamModel.forward_views` with batches.
    """
    s = model.cfg.image_size
    if raw.pixels.shape != (s, s):
        raise DimensionError(f"image is {raw.pixels.shape}, model expects ({s}, {s})")
    texture, edges = prepare_views(raw, train, aug, rng)
    if train:
        logits = model.forward_views(texture[None], edges[None], True, rng)
    else:
        with T.no_grad():
            logits = model.forward_views(texture[None], edges[None], False)
    return T.reshape(logits, (model.cfg.n_classes,))
