"""Embedding backbones with disentangled dimension masks.

Two architectures share the building blocks:

* single input: conv block + 6 inception blocks on the mel map, then a
  dense layer to the embedding size and layer normalization;
* multi input: one branch per map (mel / cyclic tempogram / CENS, the
  latter zero-padded to 16 bins), each branch a conv block + 2 inception
  blocks pooling down to a common spatial map (16x16 by default), channel
  concatenation, then 4 shared inception blocks, dense, layer norm.

Inception blocks pair a "naive" module (parallel 1x1 / 3x3 / 5x5
convolutions plus a stride-1 3x3 max-pool branch, channel-concatenated)
with a "dimension reduction" module (1x1 bottlenecks ahead of the 3x3/5x5
paths and after the pool branch), then max-pool.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .errors import ShapeError, StateError

CHECKPOINT_MAGIC = b"MSCK"
CHECKPOINT_VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64}
LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and initialization parameters.

    The embedding is split into ``num_dims`` equal contiguous mask ranges,
    so ``embedding_size`` must be divisible by ``num_dims``.  Published
    full-scale configurations: 4 dims / 256 (single or multi input),
    6 dims / 258 (single), 6 dims / 384 (single or multi).
    """

    embedding_size: int = 384
    num_dims: int = 6
    multi_input: bool = True
    branch_channels: int = 8
    block_channels: tuple[int, ...] = (16, 24, 32, 32, 48, 48)
    branch_map: tuple[int, int] = (16, 16)
    mel_shape: tuple[int, int] = (128, 256)
    tempogram_shape: tuple[int, int] = (64, 256)
    chroma_shape: tuple[int, int] = (12, 256)
    chroma_pad_bins: int = 16
    margin: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.embedding_size <= 0 or self.num_dims <= 0:
            raise ShapeError("embedding_size and num_dims must be positive")
        if self.embedding_size % self.num_dims:
            raise ShapeError(
                f"embedding_size {self.embedding_size} is not divisible by num_dims {self.num_dims}"
            )
        if len(self.block_channels) != 6:
            raise ShapeError("block_channels must list 6 inception widths")
        if self.dtype not in _DTYPES:
            raise ShapeError(f"dtype must be one of {sorted(_DTYPES)}")
        for width in self.block_channels:
            _split_channels(width)
        if self.chroma_pad_bins < self.chroma_shape[0]:
            raise ShapeError("chroma_pad_bins must not shrink the chroma input")
        # fail early if any pooling schedule is impossible
        if self.multi_input:
            for shape in (self.mel_shape, self.tempogram_shape, (self.chroma_pad_bins, self.chroma_shape[1])):
                _branch_pools(shape, self.branch_map)
            _sequential_pools(self.branch_map, 4)
        else:
            _sequential_pools(self.mel_shape, 7)

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


def config_from_dict(data: dict) -> ModelConfig:
    kwargs = {}
    for f in dataclasses.fields(ModelConfig):
        if f.name in data:
            value = data[f.name]
            kwargs[f.name] = tuple(value) if isinstance(value, list) else value
    return ModelConfig(**kwargs)


def _log2_ratio(size: int, target: int) -> int:
    if size < target or size % target:
        raise ShapeError(f"size {size} does not reduce to {target} by halving")
    ratio = size // target
    k = ratio.bit_length() - 1
    if 1 << k != ratio:
        raise ShapeError(f"size {size} / target {target} is not a power of two")
    return k


def _branch_pools(shape: tuple[int, int], target: tuple[int, int]) -> list[tuple[int, int]]:
    """Pool factors for the 4 branch stages (conv, inception x2, final pool)."""
    kf = _log2_ratio(shape[0], target[0])
    kt = _log2_ratio(shape[1], target[1])
    if kf > 4 or kt > 4:
        raise ShapeError(f"branch input {shape} cannot reach {target} within 4 pooling stages")
    return [(2 if i < kf else 1, 2 if i < kt else 1) for i in range(4)]


def _sequential_pools(shape: tuple[int, int], stages: int) -> list[tuple[int, int]]:
    """Halve each axis per stage until it reaches 1 (axes must be powers of two)."""
    _log2_ratio(shape[0], 1)
    _log2_ratio(shape[1], 1)
    f, t = shape
    pools = []
    for _ in range(stages):
        pf = 2 if f > 1 else 1
        pt = 2 if t > 1 else 1
        pools.append((pf, pt))
        f //= pf
        t //= pt
    return pools


def _split_channels(width: int) -> tuple[int, int, int, int]:
    """Allocate an inception module's output channels to its four branches."""
    c1 = max(1, width // 4)
    c5 = max(1, width // 8)
    cp = max(1, width // 8)
    c3 = width - c1 - c5 - cp
    if c3 < 1:
        raise ShapeError(f"inception width {width} too small to split across branches")
    return c1, c3, c5, cp


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def mask_bounds(embedding_size: int, num_dims: int, dim_index: int) -> tuple[int, int]:
    """Index range [lo, hi) of the embedding assigned to one dimension."""
    if embedding_size % num_dims:
        raise ShapeError(f"embedding size {embedding_size} not divisible by {num_dims}")
    if not 0 <= dim_index < num_dims:
        raise ShapeError(f"dimension index {dim_index} outside [0, {num_dims})")
    width = embedding_size // num_dims
    return dim_index * width, (dim_index + 1) * width


@functools.lru_cache(maxsize=64)
def mask_vector(embedding_size: int, num_dims: int, dim_index: int) -> np.ndarray:
    lo, hi = mask_bounds(embedding_size, num_dims, dim_index)
    mask = np.zeros(embedding_size, dtype=np.float64)
    mask[lo:hi] = 1.0
    mask.setflags(write=False)
    return mask


def apply_mask(embedding: np.ndarray, dim_index: int, num_dims: int) -> np.ndarray:
    """Zero all entries outside the dimension's mask range (last axis)."""
    embedding = np.asarray(embedding)
    mask = mask_vector(embedding.shape[-1], num_dims, dim_index)
    return embedding * mask.astype(embedding.dtype)


# ---------------------------------------------------------------------------
# functional pieces
# ---------------------------------------------------------------------------


def conv_block(x, w, b, pool: tuple[int, int] = (2, 2)) -> Tensor:
    """3x3 convolution (stride 1, same padding) + ReLU + max pool."""
    return ag.maxpool2d(ag.relu(ag.conv2d(x, w, b)), pool)


def layer_norm(e, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each embedding vector to zero mean / unit variance (no affine)."""
    e = ag.as_tensor(e)
    mu = ag.tmean(e, axis=-1, keepdims=True)
    centered = ag.sub(e, mu)
    var = ag.tmean(ag.mul(centered, centered), axis=-1, keepdims=True)
    return ag.div(centered, ag.sqrt(ag.add(var, eps)))


def zero_pad_freq(x, rows_in: int = 12, rows_out: int = 16) -> Tensor:
    """Zero-pad the frequency axis of a (B, C, F, T) tensor from rows_in to rows_out."""
    x = ag.as_tensor(x)
    if x.data.shape[2] != rows_in:
        raise ShapeError(f"expected {rows_in} frequency rows, got {x.data.shape[2]}")
    return ag.pad_rows(x, rows_out)


class _Registry:
    """Deterministic parameter creation: He-uniform weights, zero biases."""

    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}

    def conv(self, name: str, cin: int, cout: int, k: int) -> tuple[Tensor, Tensor]:
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        w = Tensor(self.rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(self.dtype), requires_grad=True)
        b = Tensor(np.zeros(cout, dtype=self.dtype), requires_grad=True)
        self.params[f"{name}.w"] = w
        self.params[f"{name}.b"] = b
        return w, b

    def dense(self, name: str, cin: int, cout: int) -> tuple[Tensor, Tensor]:
        bound = np.sqrt(6.0 / cin)
        w = Tensor(self.rng.uniform(-bound, bound, size=(cin, cout)).astype(self.dtype), requires_grad=True)
        b = Tensor(np.zeros(cout, dtype=self.dtype), requires_grad=True)
        self.params[f"{name}.w"] = w
        self.params[f"{name}.b"] = b
        return w, b


class _Conv:
    def __init__(self, reg: _Registry, name: str, cin: int, cout: int, k: int):
        self.w, self.b = reg.conv(name, cin, cout, k)
        self.out_channels = cout

    def __call__(self, x):
        return ag.relu(ag.conv2d(x, self.w, self.b))


class _NaiveModule:
    """Inception module without bottlenecks; the pool branch passes channels through."""

    def __init__(self, reg: _Registry, name: str, cin: int, width: int):
        c1, c3, c5, _ = _split_channels(width)
        self.b1 = _Conv(reg, f"{name}.b1", cin, c1, 1)
        self.b3 = _Conv(reg, f"{name}.b3", cin, c3, 3)
        self.b5 = _Conv(reg, f"{name}.b5", cin, c5, 5)
        self.out_channels = c1 + c3 + c5 + cin

    def __call__(self, x):
        return ag.concat([self.b1(x), self.b3(x), self.b5(x), ag.maxpool3x3_same(x)], axis=1)


class _ReduceModule:
    """Inception module with 1x1 bottlenecks ahead of 3x3/5x5 and after the pool."""

    def __init__(self, reg: _Registry, name: str, cin: int, width: int):
        c1, c3, c5, cp = _split_channels(width)
        self.b1 = _Conv(reg, f"{name}.b1", cin, c1, 1)
        self.r3 = _Conv(reg, f"{name}.r3", cin, max(1, c3 // 2), 1)
        self.b3 = _Conv(reg, f"{name}.b3", self.r3.out_channels, c3, 3)
        self.r5 = _Conv(reg, f"{name}.r5", cin, max(1, c5 // 2), 1)
        self.b5 = _Conv(reg, f"{name}.b5", self.r5.out_channels, c5, 5)
        self.bp = _Conv(reg, f"{name}.bp", cin, cp, 1)
        self.out_channels = width

    def __call__(self, x):
        return ag.concat(
            [self.b1(x), self.b3(self.r3(x)), self.b5(self.r5(x)), self.bp(ag.maxpool3x3_same(x))],
            axis=1,
        )


class InceptionBlock:
    """Naive module, then dimension-reduction module, then max pooling."""

    def __init__(self, reg: _Registry, name: str, cin: int, width: int, pool: tuple[int, int] = (2, 2)):
        self.naive = _NaiveModule(reg, f"{name}.naive", cin, width)
        self.reduce = _ReduceModule(reg, f"{name}.reduce", self.naive.out_channels, width)
        self.pool = pool
        self.out_channels = width

    def __call__(self, x):
        return ag.maxpool2d(self.reduce(self.naive(x)), self.pool)


class _Branch:
    """Input branch of the multi-input network: conv block + 2 inception blocks + pool."""

    def __init__(self, reg: _Registry, name: str, config: ModelConfig, shape: tuple[int, int]):
        pools = _branch_pools(shape, config.branch_map)
        self.conv = _Conv(reg, f"{name}.conv", 1, config.branch_channels, 3)
        self.conv_pool = pools[0]
        self.block1 = InceptionBlock(reg, f"{name}.inc1", config.branch_channels, config.block_channels[0], pools[1])
        self.block2 = InceptionBlock(reg, f"{name}.inc2", config.block_channels[0], config.block_channels[1], pools[2])
        self.final_pool = pools[3]
        self.out_channels = self.block2.out_channels

    def __call__(self, x):
        x = ag.maxpool2d(self.conv(x), self.conv_pool)
        x = self.block2(self.block1(x))
        return ag.maxpool2d(x, self.final_pool)


class Model:
    """The embedding network; holds named parameters and exposes forward/backward."""

    def __init__(self, config: ModelConfig):
        self.config = config
        reg = _Registry(config.seed, config.np_dtype)
        c = config
        if c.multi_input:
            self.branches = {
                "mel": _Branch(reg, "mel", c, c.mel_shape),
                "tempogram": _Branch(reg, "tempogram", c, c.tempogram_shape),
                "chroma": _Branch(reg, "chroma", c, (c.chroma_pad_bins, c.chroma_shape[1])),
            }
            cin = sum(b.out_channels for b in self.branches.values())
            pools = _sequential_pools(c.branch_map, 4)
            self.shared = []
            for i, width in enumerate(c.block_channels[2:]):
                self.shared.append(InceptionBlock(reg, f"shared.inc{i + 3}", cin, width, pools[i]))
                cin = width
            f, t = c.branch_map
            for pf, pt in pools:
                f //= pf
                t //= pt
        else:
            pools = _sequential_pools(c.mel_shape, 7)
            self.conv = _Conv(reg, "mel.conv", 1, c.branch_channels, 3)
            self.conv_pool = pools[0]
            self.blocks = []
            cin = c.branch_channels
            for i, width in enumerate(c.block_channels):
                self.blocks.append(InceptionBlock(reg, f"inc{i + 1}", cin, width, pools[i + 1]))
                cin = width
            f, t = c.mel_shape
            for pf, pt in pools:
                f //= pf
                t //= pt
        self.dense_w, self.dense_b = reg.dense("embed", cin * f * t, c.embedding_size)
        self.params = reg.params
        self._flat_features = cin * f * t

    # -- plumbing ----------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _prepare(self, arr, shape: tuple[int, int], name: str) -> Tensor:
        if isinstance(arr, Tensor):
            arr = arr.data
        arr = np.asarray(arr, dtype=self.config.np_dtype)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim == 3:
            arr = arr[:, None]
        if arr.ndim != 4 or arr.shape[1] != 1 or arr.shape[2:] != tuple(shape):
            raise ShapeError(f"{name} input must be (B, 1, {shape[0]}, {shape[1]}), got {arr.shape}")
        return Tensor(arr)

    # -- forward / backward -------------------------------------------------

    def forward(self, mel, tempogram=None, chroma=None, return_branch_maps: bool = False):
        """Embed a batch; returns a (B, D) tensor (layer-normalized rows).

        Accepts (B, F, T), (F, T) or (B, 1, F, T) arrays per input.  The
        single-input architecture uses only the mel map.
        """
        c = self.config
        branch_maps = {}
        if c.multi_input:
            if tempogram is None or chroma is None:
                raise ShapeError("multi-input model needs mel, tempogram and chroma maps")
            mel_t = self._prepare(mel, c.mel_shape, "mel")
            tempo_t = self._prepare(tempogram, c.tempogram_shape, "tempogram")
            chroma_t = self._prepare(chroma, c.chroma_shape, "chroma")
            chroma_t = zero_pad_freq(chroma_t, c.chroma_shape[0], c.chroma_pad_bins)
            outs = []
            for name, tensor in (("mel", mel_t), ("tempogram", tempo_t), ("chroma", chroma_t)):
                out = self.branches[name](tensor)
                branch_maps[name] = out
                outs.append(out)
            x = ag.concat(outs, axis=1)
            for block in self.shared:
                x = block(x)
        else:
            mel_t = self._prepare(mel, c.mel_shape, "mel")
            x = ag.maxpool2d(self.conv(mel_t), self.conv_pool)
            for block in self.blocks:
                x = block(x)
        flat = ag.reshape(x, (x.shape[0], self._flat_features))
        emb = layer_norm(ag.add(ag.matmul(flat, self.dense_w), self.dense_b))
        if not np.all(np.isfinite(emb.data)):
            raise StateError("forward pass produced non-finite embeddings")
        if return_branch_maps:
            return emb, branch_maps
        return emb

    def embed(self, mel, tempogram=None, chroma=None) -> np.ndarray:
        """Inference-mode forward; returns a plain (B, D) array."""
        with no_grad():
            return self.forward(mel, tempogram, chroma).data.copy()

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Backpropagate a scalar loss; returns gradients keyed like params."""
        if not isinstance(loss, Tensor) or (loss._backward is None and not loss._parents):
            raise StateError("backward requires a loss produced by a recorded forward pass")
        loss.backward()
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in self.params.items()
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise ShapeError(f"checkpoint/model parameter mismatch: {sorted(missing)}")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=self.config.np_dtype)
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter {name} shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path) -> None:
    """Versioned container: JSON header (config + tensor index) + raw tensors."""
    names = sorted(model.params)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.config),
        "tensors": [{"name": n, "shape": list(model.params[n].data.shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    dt = "<f4" if model.config.dtype == "float32" else "<f8"
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype=dt).tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ShapeError(f"{path}: not a checkpoint file")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ShapeError(f"{path}: unsupported checkpoint version")
        config = config_from_dict(header["config"])
        dt = "<f4" if config.dtype == "float32" else "<f8"
        itemsize = 4 if config.dtype == "float32" else 8
        arrays = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * itemsize)
            if len(buf) != count * itemsize:
                raise ShapeError(f"{path}: truncated checkpoint payload")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dt).reshape(shape).copy()
    model = Model(config)
    model.load_state(arrays)
    return model
