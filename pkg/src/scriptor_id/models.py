"""Local-feature extractors (sub-region and character level) and the writer classifier head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import ShapeError, SpecError

SUB_REGION = "sub_region"
CHAR_LEVEL = "char_level"
PATCH_SIZE = 64

_BLOCKS = {SUB_REGION: 4, CHAR_LEVEL: 3}


@dataclass(frozen=True)
class NetworkSpec:
    variant: str = SUB_REGION
    block_filters: tuple[int, ...] = (32, 64, 256, 1024)
    kernel: int = 5
    pad: int = 2
    conv_stride: int = 1
    pool: int = 2
    fc_width: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "block_filters", tuple(int(f) for f in self.block_filters))
        self.validate()

    def validate(self):
        if self.variant not in _BLOCKS:
            raise SpecError(f"unknown variant {self.variant!r}; expected one of {sorted(_BLOCKS)}")
        want = _BLOCKS[self.variant]
        if len(self.block_filters) != want:
            raise SpecError(
                f"{self.variant} needs {want} conv blocks, got {len(self.block_filters)}"
            )
        if any(f <= 0 for f in self.block_filters):
            raise SpecError(f"filter counts must be positive: {self.block_filters}")
        if self.kernel < 1 or self.pad < 0 or self.conv_stride < 1 or self.pool < 1:
            raise SpecError("kernel/stride/pool must be positive and pad non-negative")
        if self.variant == CHAR_LEVEL:
            if self.fc_width is None or self.fc_width <= 0:
                raise SpecError("char_level spec needs a positive fc_width")
        elif self.fc_width is not None:
            raise SpecError("sub_region spec has no fully connected layer")

    @classmethod
    def sub_region(cls, filters=(32, 64, 256, 1024)):
        return cls(SUB_REGION, tuple(filters))

    @classmethod
    def char_level(cls, filters=(32, 64, 256), fc_width=1024):
        return cls(CHAR_LEVEL, tuple(filters), fc_width=fc_width)

    @property
    def depth(self) -> int:
        return self.fc_width if self.variant == CHAR_LEVEL else self.block_filters[-1]

    def spatial_trace(self, size: int = PATCH_SIZE) -> list[int]:
        """Spatial extent of the input and after every pooling layer."""
        trace = [size]
        for _ in self.block_filters:
            size = (size + 2 * self.pad - self.kernel) // self.conv_stride + 1
            size = -(-size // self.pool)
            trace.append(size)
        return trace

    @property
    def side(self) -> int:
        return 1 if self.variant == CHAR_LEVEL else self.spatial_trace()[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_filters"] = list(self.block_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**{**d, "block_filters": tuple(d["block_filters"])})


def param_shapes(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    c_in = 1
    for i, c_out in enumerate(spec.block_filters, start=1):
        shapes.append((f"conv{i}.weight", (c_out, c_in, spec.kernel, spec.kernel)))
        shapes.append((f"conv{i}.bias", (c_out,)))
        c_in = c_out
    if spec.variant == CHAR_LEVEL:
        side = spec.spatial_trace()[-1]
        shapes.append(("fc.weight", (spec.fc_width, c_in * side * side)))
        shapes.append(("fc.bias", (spec.fc_width,)))
    return shapes


def _init(shapes, rng) -> list[np.ndarray]:
    params = []
    for name, shape in shapes:
        if name.endswith(".bias"):
            params.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:]))
            params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
    return params


@dataclass
class Network:
    spec: NetworkSpec
    params: list[np.ndarray]

    @property
    def names(self) -> list[str]:
        return [name for name, _ in param_shapes(self.spec)]

    def forward(self, x: np.ndarray):
        """Batched forward: ``(N, 1, 64, 64)`` patches -> ``(N, L, L, D)`` local features.

        Activations run channels-last, so the output is already indexed
        ``[member, i, j, d]``. The character-level FC flattens ``(row, col, channel)``.
        """
        if x.ndim != 4 or x.shape[1:] != (1, PATCH_SIZE, PATCH_SIZE):
            raise ShapeError(f"expected patches of shape (N, 1, 64, 64), got {x.shape}")
        s = self.spec
        caches = []
        h = x.reshape(x.shape[0], PATCH_SIZE, PATCH_SIZE, 1)
        for b in range(len(s.block_filters)):
            w, bias = self.params[2 * b], self.params[2 * b + 1]
            h, conv_c = nn.conv2d_nhwc(h, w, bias, s.conv_stride, s.pad, need_input_grad=b > 0)
            h, relu_c = nn.relu(h)
            h, pool_c = nn.maxpool2d_nhwc(h, s.pool, s.pool)
            caches.append((conv_c, relu_c, pool_c))
        if s.variant == CHAR_LEVEL:
            flat_shape = h.shape
            h, fc_c = nn.linear(h.reshape(h.shape[0], -1), self.params[-2], self.params[-1])
            h, relu_c = nn.relu(h)
            caches.append((flat_shape, fc_c, relu_c))
            h = h[:, None, None, :]
        return h, caches

    def backward(self, caches, d_out: np.ndarray):
        """Gradients for ``self.params`` (same order) given ``d_out`` of shape ``(N, L, L, D)``."""
        s = self.spec
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        g = d_out
        if s.variant == CHAR_LEVEL:
            flat_shape, fc_c, relu_c = caches[-1]
            g = nn.relu_backward(relu_c, g[:, 0, 0, :]).d_input
            lg = nn.linear_backward(fc_c, g)
            grads[-2], grads[-1] = lg.d_params
            g = lg.d_input.reshape(flat_shape)
        for b in reversed(range(len(s.block_filters))):
            conv_c, relu_c, pool_c = caches[b]
            g = nn.maxpool2d_nhwc_backward(pool_c, g).d_input
            g = nn.relu_backward(relu_c, g).d_input
            lg = nn.conv2d_nhwc_backward(conv_c, g)
            grads[2 * b], grads[2 * b + 1] = lg.d_params
            g = lg.d_input
        return grads


def build_network(spec: NetworkSpec, seed: int) -> Network:
    """He-normal weights (std ``sqrt(2/fan_in)``), zero biases, drawn in declaration order."""
    spec.validate()
    rng = np.random.default_rng(seed)
    return Network(spec, _init(param_shapes(spec), rng))


@dataclass
class LocalFeatureMap:
    """``values[i, j, d]``: L x L grid of D-dimensional local features."""

    values: np.ndarray
    context: object = field(default=None, repr=False, compare=False)

    @property
    def side(self) -> int:
        return self.values.shape[0]

    @property
    def depth(self) -> int:
        return self.values.shape[2]


def extract_locals(net: Network, patches: np.ndarray):
    """Batched local features ``(N, L, L, D)`` plus the network caches."""
    return net.forward(patches)


def locals_backward(net: Network, caches, d_locals: np.ndarray) -> list[np.ndarray]:
    return net.backward(caches, d_locals)


def forward_local(net: Network, patch: np.ndarray) -> LocalFeatureMap:
    if patch.shape != (1, PATCH_SIZE, PATCH_SIZE):
        raise ShapeError(f"patch must be (1, 64, 64), got {patch.shape}")
    values, caches = extract_locals(net, patch[None])
    return LocalFeatureMap(values[0], caches)


@dataclass
class ClassifierHead:
    weight: np.ndarray
    bias: np.ndarray

    @property
    def num_writers(self) -> int:
        return self.weight.shape[0]

    @property
    def depth(self) -> int:
        return self.weight.shape[1]


def build_head(num_writers: int, depth: int, seed: int) -> ClassifierHead:
    if num_writers < 1 or depth < 1:
        raise SpecError("classifier head needs at least one writer and positive depth")
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, np.sqrt(2.0 / depth), size=(num_writers, depth))
    return ClassifierHead(w, np.zeros(num_writers))


def classify(global_feature, head: ClassifierHead) -> np.ndarray:
    g = np.asarray(getattr(global_feature, "values", global_feature), dtype=np.float64)
    if g.shape != (head.depth,):
        raise ShapeError(f"global feature of shape {g.shape} does not fit head depth {head.depth}")
    return head.weight @ g + head.bias


def predict(logits: np.ndarray) -> int:
    """Argmax; ties resolve to the lowest writer index."""
    return int(np.argmax(logits))
