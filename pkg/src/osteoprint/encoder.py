"""Convolutional embedding network with explicit forward/backward passes.

A small trainable encoder maps a radiograph to a unit-norm d-dimensional
embedding: a conv/relu/maxpool trunk followed by three fully-connected +
L2-normalization reduction pairs.  Everything is plain numpy with
hand-written gradients so the whole computation can be checked against
finite differences, and checkpointing is bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

CHECKPOINT_MAGIC = b"OSTM"
CHECKPOINT_VERSION = 1

STANDARD_DIMS = (16, 32, 64, 128)

EPS_NORM = 1e-12


class SpecError(ValueError):
    """Incompatible or malformed layer specification."""


class ShapeError(ValueError):
    """Input shape does not match the model specification."""


class NumericError(ArithmeticError):
    """Non-finite activations or gradients."""


class NormalizationError(ValueError):
    """L2 normalization of a (near-)zero vector."""


class ModelIOError(IOError):
    """Corrupt, truncated or wrong-version checkpoint."""


@dataclass(frozen=True)
class Conv:
    kh: int
    kw: int
    cin: int
    cout: int
    stride: int = 1


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    size: int = 2


@dataclass(frozen=True)
class Dense:
    din: int
    dout: int


@dataclass(frozen=True)
class L2Norm:
    pass


LayerSpec = Conv | Relu | MaxPool | Dense | L2Norm


@dataclass(frozen=True)
class EncoderSpec:
    """Layer list plus expected input resolution (height, width)."""

    input_hw: tuple[int, int]
    layers: tuple[LayerSpec, ...]

    def shapes(self) -> list[tuple]:
        """Activation shape after each layer; raises SpecError on mismatch."""
        h, w = self.input_hw
        shape: tuple = (1, h, w)
        out = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                if len(shape) != 3 or shape[0] != layer.cin:
                    raise SpecError(f"conv expects {layer.cin} channels, has {shape}")
                ph, pw = (layer.kh - 1) // 2, (layer.kw - 1) // 2
                oh = (shape[1] + 2 * ph - layer.kh) // layer.stride + 1
                ow = (shape[2] + 2 * pw - layer.kw) // layer.stride + 1
                if oh < 1 or ow < 1:
                    raise SpecError(f"conv output collapsed to {oh}x{ow}")
                shape = (layer.cout, oh, ow)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3 or shape[1] < layer.size or shape[2] < layer.size:
                    raise SpecError(f"maxpool {layer.size} too large for {shape}")
                shape = (shape[0], shape[1] // layer.size, shape[2] // layer.size)
            elif isinstance(layer, Dense):
                flat = int(np.prod(shape))
                if layer.din != flat:
                    raise SpecError(f"dense expects {layer.din} inputs, has {flat}")
                shape = (layer.dout,)
            elif isinstance(layer, (Relu, L2Norm)):
                if isinstance(layer, L2Norm) and len(shape) != 1:
                    raise SpecError("l2norm requires a flat vector input")
            else:
                raise SpecError(f"unknown layer {layer!r}")
            out.append(shape)
        if len(shape) != 1:
            raise SpecError("encoder must end in a flat embedding")
        if not isinstance(self.layers[-1], L2Norm):
            raise SpecError("encoder must end with an L2 normalization layer")
        return out

    @property
    def embedding_dim(self) -> int:
        return self.shapes()[-1][0]


def default_encoder_spec(input_hw: tuple[int, int], d: int = 32,
                         channels: tuple[int, ...] = (8, 16, 32),
                         fc_widths: tuple[int, int] = (256, 128),
                         first_stride: int = 2) -> EncoderSpec:
    """Desk-scale trunk plus the three FC+L2 reduction pairs ending at d."""
    if d not in STANDARD_DIMS:
        raise SpecError(f"embedding dimension {d} not in {STANDARD_DIMS}")
    h, w = input_hw
    layers: list[LayerSpec] = []
    cin = 1
    for i, cout in enumerate(channels):
        stride = first_stride if i == 0 else 1
        layers += [Conv(3, 3, cin, cout, stride), Relu(), MaxPool(2)]
        h = (h + 2 - 3) // stride + 1
        w = (w + 2 - 3) // stride + 1
        h, w = h // 2, w // 2
        cin = cout
    flat = cin * h * w
    widths = (*fc_widths, d)
    din = flat
    for dout in widths:
        layers += [Dense(din, dout), L2Norm()]
        din = dout
    return EncoderSpec(input_hw=tuple(input_hw), layers=tuple(layers))


@dataclass
class EncoderModel:
    spec: EncoderSpec
    params: list[np.ndarray]
    init_seed: int

    @property
    def dtype(self):
        return self.params[0].dtype if self.params else np.float32

    def astype(self, dtype) -> "EncoderModel":
        return EncoderModel(self.spec, [p.astype(dtype) for p in self.params],
                            self.init_seed)

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.spec, [p.copy() for p in self.params], self.init_seed)

    def num_params(self) -> int:
        return sum(p.size for p in self.params)


def init_model(spec: EncoderSpec, seed: int) -> EncoderModel:
    """He fan-in initialization for weights, zero biases; deterministic per seed."""
    spec.shapes()
    rng = np.random.Generator(np.random.PCG64(seed))
    params: list[np.ndarray] = []
    for layer in spec.layers:
        if isinstance(layer, Conv):
            fan_in = layer.cin * layer.kh * layer.kw
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           size=(layer.cout, layer.cin, layer.kh, layer.kw))
            params += [w.astype(np.float32), np.zeros(layer.cout, dtype=np.float32)]
        elif isinstance(layer, Dense):
            w = rng.normal(0.0, np.sqrt(2.0 / layer.din), size=(layer.din, layer.dout))
            params += [w.astype(np.float32), np.zeros(layer.dout, dtype=np.float32)]
    return EncoderModel(spec=spec, params=params, init_seed=seed)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """v / ||v||; rejects near-zero vectors instead of silently zeroing."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= EPS_NORM:
        raise NormalizationError(f"cannot normalize vector with norm {norm}")
    return v / norm


# ---------------------------------------------------------------------------
# Layer forward/backward
# ---------------------------------------------------------------------------

def _im2col(x, kh, kw, stride):
    n, c, h, w = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw), (oh, ow)


def _col2im(dcols, x_shape, kh, kw, stride, oh, ow):
    n, c, h, w = x_shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dcols.dtype)
    dcols = dcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
    return dxp[:, :, ph:ph + h, pw:pw + w]


def _conv_forward(layer, w, b, x):
    cols, (oh, ow) = _im2col(x, layer.kh, layer.kw, layer.stride)
    wmat = w.reshape(layer.cout, -1).T
    out = cols @ wmat + b
    n = x.shape[0]
    y = out.reshape(n, oh, ow, layer.cout).transpose(0, 3, 1, 2)
    return y, (cols, x.shape, oh, ow)


def _conv_backward(layer, w, dy, cache):
    cols, x_shape, oh, ow = cache
    n = x_shape[0]
    dflat = dy.transpose(0, 2, 3, 1).reshape(n * oh * ow, layer.cout)
    dw = (cols.T @ dflat).T.reshape(layer.cout, layer.cin, layer.kh, layer.kw)
    db = dflat.sum(axis=0)
    dcols = dflat @ w.reshape(layer.cout, -1)
    dx = _col2im(dcols, x_shape, layer.kh, layer.kw, layer.stride, oh, ow)
    return dx, dw, db


def _maxpool_forward(size, x):
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    xr = x[:, :, :oh * size, :ow * size].reshape(n, c, oh, size, ow, size)
    windows = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, size * size)
    idx = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape, size)


def _maxpool_backward(dy, cache):
    idx, x_shape, size = cache
    n, c, h, w = x_shape
    oh, ow = h // size, w // size
    dwindows = np.zeros((n, c, oh, ow, size * size), dtype=dy.dtype)
    np.put_along_axis(dwindows, idx[..., None], dy[..., None], axis=-1)
    dxr = dwindows.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, :, :oh * size, :ow * size] = dxr.reshape(n, c, oh * size, ow * size)
    return dx


def _l2norm_forward(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms <= EPS_NORM):
        raise NormalizationError("activation norm underflow in L2 layer")
    y = x / norms
    return y, (y, norms)


def _l2norm_backward(dy, cache):
    y, norms = cache
    return (dy - y * np.sum(y * dy, axis=1, keepdims=True)) / norms


def _forward_cached(model: EncoderModel, x: np.ndarray):
    caches = []
    p = 0
    for layer in model.spec.layers:
        if isinstance(layer, Conv):
            x, cache = _conv_forward(layer, model.params[p], model.params[p + 1], x)
            caches.append(cache)
            p += 2
        elif isinstance(layer, Relu):
            caches.append(x > 0)
            x = np.maximum(x, 0)
        elif isinstance(layer, MaxPool):
            x, cache = _maxpool_forward(layer.size, x)
            caches.append(cache)
        elif isinstance(layer, Dense):
            flat = x.reshape(x.shape[0], -1)
            caches.append((flat, x.shape))
            x = flat @ model.params[p] + model.params[p + 1]
            p += 2
        elif isinstance(layer, L2Norm):
            x, cache = _l2norm_forward(x)
            caches.append(cache)
    return x, caches


def _backward_cached(model: EncoderModel, caches, dy: np.ndarray):
    grads = [np.zeros_like(p) for p in model.params]
    p = len(model.params)
    for layer, cache in zip(reversed(model.spec.layers), reversed(caches)):
        if isinstance(layer, Conv):
            p -= 2
            dy, dw, db = _conv_backward(layer, model.params[p], dy, cache)
            grads[p] = dw
            grads[p + 1] = db
        elif isinstance(layer, Relu):
            dy = dy * cache
        elif isinstance(layer, MaxPool):
            dy = _maxpool_backward(dy, cache)
        elif isinstance(layer, Dense):
            p -= 2
            flat, x_shape = cache
            grads[p] = flat.T @ dy
            grads[p + 1] = dy.sum(axis=0)
            dy = (dy @ model.params[p].T).reshape(x_shape)
        elif isinstance(layer, L2Norm):
            dy = _l2norm_backward(dy, cache)
    return grads


def _as_batch(model: EncoderModel, images: np.ndarray):
    x = np.asarray(images)
    single = x.ndim == 2
    if single:
        x = x[None, :, :]
    if x.ndim != 3 or x.shape[1:] != model.spec.input_hw:
        raise ShapeError(
            f"input shape {x.shape[1:]} does not match spec {model.spec.input_hw}"
        )
    return x[:, None, :, :].astype(model.dtype), single


def forward(model: EncoderModel, images: np.ndarray) -> np.ndarray:
    """Unit-norm embeddings for one (H, W) image or an (N, H, W) batch."""
    x, single = _as_batch(model, images)
    emb, _ = _forward_cached(model, x)
    if not np.all(np.isfinite(emb)):
        raise NumericError("non-finite activation in forward pass")
    return emb[0] if single else emb


def backward(model: EncoderModel, images: np.ndarray,
             upstream: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients of sum_i <embedding_i, upstream_i>."""
    x, single = _as_batch(model, images)
    dy = np.asarray(upstream, dtype=model.dtype)
    if single:
        dy = dy[None, :]
    emb, caches = _forward_cached(model, x)
    if dy.shape != emb.shape:
        raise ShapeError(f"upstream shape {dy.shape} does not match embeddings {emb.shape}")
    grads = _backward_cached(model, caches, dy)
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite parameter gradient")
    return grads


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

_LAYER_TAGS = {Conv: 1, Relu: 2, MaxPool: 3, Dense: 4, L2Norm: 5}


def persist_model(model: EncoderModel, path) -> None:
    """Bit-exact binary checkpoint (magic OSTM, version, spec block, f32 params)."""
    spec = model.spec
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<B", CHECKPOINT_VERSION))
        f.write(struct.pack("<2I", *spec.input_hw))
        f.write(struct.pack("<q", model.init_seed))
        f.write(struct.pack("<I", len(spec.layers)))
        for layer in spec.layers:
            f.write(struct.pack("<B", _LAYER_TAGS[type(layer)]))
            if isinstance(layer, Conv):
                f.write(struct.pack("<5I", layer.kh, layer.kw, layer.cin,
                                    layer.cout, layer.stride))
            elif isinstance(layer, MaxPool):
                f.write(struct.pack("<I", layer.size))
            elif isinstance(layer, Dense):
                f.write(struct.pack("<2I", layer.din, layer.dout))
        for p in model.params:
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_model(path) -> EncoderModel:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ModelIOError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    if raw[4] != CHECKPOINT_VERSION:
        raise ModelIOError(f"{path}: unsupported checkpoint version {raw[4]}")
    try:
        off = 5
        h, w = struct.unpack_from("<2I", raw, off)
        off += 8
        (seed,) = struct.unpack_from("<q", raw, off)
        off += 8
        (n_layers,) = struct.unpack_from("<I", raw, off)
        off += 4
        layers: list[LayerSpec] = []
        for _ in range(n_layers):
            tag = raw[off]
            off += 1
            if tag == 1:
                kh, kw, cin, cout, stride = struct.unpack_from("<5I", raw, off)
                off += 20
                layers.append(Conv(kh, kw, cin, cout, stride))
            elif tag == 2:
                layers.append(Relu())
            elif tag == 3:
                (size,) = struct.unpack_from("<I", raw, off)
                off += 4
                layers.append(MaxPool(size))
            elif tag == 4:
                din, dout = struct.unpack_from("<2I", raw, off)
                off += 8
                layers.append(Dense(din, dout))
            elif tag == 5:
                layers.append(L2Norm())
            else:
                raise ModelIOError(f"{path}: unknown layer tag {tag}")
    except (struct.error, IndexError) as err:
        raise ModelIOError(f"{path}: truncated spec block") from err

    spec = EncoderSpec(input_hw=(h, w), layers=tuple(layers))
    try:
        spec.shapes()
    except SpecError as err:
        raise ModelIOError(f"{path}: invalid spec in checkpoint: {err}") from err

    params = []
    for layer in layers:
        if isinstance(layer, Conv):
            shapes = [(layer.cout, layer.cin, layer.kh, layer.kw), (layer.cout,)]
        elif isinstance(layer, Dense):
            shapes = [(layer.din, layer.dout), (layer.dout,)]
        else:
            continue
        for shape in shapes:
            size = 4 * int(np.prod(shape))
            if off + size > len(raw):
                raise ModelIOError(f"{path}: truncated parameter data at byte {off}")
            params.append(np.frombuffer(raw, dtype="<f4", count=int(np.prod(shape)),
                                        offset=off).reshape(shape).copy())
            off += size
    if off != len(raw):
        raise ModelIOError(f"{path}: {len(raw) - off} trailing bytes after parameters")
    return EncoderModel(spec=spec, params=params, init_seed=int(seed))
