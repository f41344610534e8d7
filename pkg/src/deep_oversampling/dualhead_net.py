"""Two-headed CNN: an embedding head ``f`` and a softmax classifier head ``g``.

The embedding is the post-ReLU activation of the last hidden fully-connected
layer. Everything below it (convolutions and hidden FC layers) is the
embedding parameter group; the final linear layer feeding the softmax is the
classifier group.

Gradient routing for multi-task batches:

* the embedding loss reaches the embedding group only (targets are constants);
* the classifier loss is computed on the *stored* neighbor embeddings, so it
  reaches the classifier group only;
* the exponential weights over neighbors are treated as constants.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import DimensionError


class DataError(ValueError):
    """Raised for malformed labels, weights or neighbor sets."""


@dataclass
class NetworkConfig:
    input_shape: tuple = (1, 28, 28)
    # (filter count, kernel size) per convolution layer
    conv_filters: list = field(default_factory=lambda: [(6, 5), (16, 5)])
    fc_widths: list = field(default_factory=lambda: [400, 120])
    n_classes: int = 10
    learning_rate: float = 0.01
    batch_size: int = 60
    alpha: float = 1.0
    stride: int = 1
    precision: int = 32

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.conv_filters = [tuple(int(v) for v in cf) for cf in self.conv_filters]
        self.fc_widths = [int(w) for w in self.fc_widths]
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be channels x height x width")
        if not self.fc_widths:
            raise ValueError("at least one hidden fully-connected layer is required")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.alpha < 0:
            raise ValueError("learning_rate and batch_size must be positive, alpha >= 0")

    @property
    def embedding_dim(self) -> int:
        return self.fc_widths[-1]

    @property
    def dtype(self) -> np.dtype:
        return nx.resolve_dtype(self.precision)

    def conv_output_shapes(self) -> list:
        c, h, w = self.input_shape
        shapes = []
        for count, k in self.conv_filters:
            h = nx.conv_output_size(h, k, self.stride)
            w = nx.conv_output_size(w, k, self.stride)
            if h < 1 or w < 1:
                raise DimensionError(f"kernel {k} too large for the feature map")
            c = count
            shapes.append((c, h, w))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["conv_filters"] = [list(cf) for cf in self.conv_filters]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def parameter_shapes(config: NetworkConfig):
    """Shapes of the embedding group and the classifier group, in layer order."""
    emb = []
    c = config.input_shape[0]
    for count, k in config.conv_filters:
        emb += [(count, c, k, k), (count,)]
        c = count
    shapes = config.conv_output_shapes()
    width = int(np.prod(shapes[-1])) if shapes else int(np.prod(config.input_shape))
    for out in config.fc_widths:
        emb += [(out, width), (out,)]
        width = out
    cls = [(config.n_classes, width), (config.n_classes,)]
    return emb, cls


@dataclass
class Parameters:
    """``embedding`` holds W_f (weights and biases interleaved per layer),
    ``classifier`` holds ``[W_g, b_g]``."""
    embedding: list
    classifier: list

    def arrays(self) -> list:
        return self.embedding + self.classifier

    def copy(self) -> "Parameters":
        return Parameters([a.copy() for a in self.embedding],
                          [a.copy() for a in self.classifier])

    def zeros_like(self) -> "Parameters":
        return Parameters([np.zeros_like(a) for a in self.embedding],
                          [np.zeros_like(a) for a in self.classifier])

    def astype(self, dtype) -> "Parameters":
        return Parameters([a.astype(dtype) for a in self.embedding],
                          [a.astype(dtype) for a in self.classifier])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_params(config: NetworkConfig, seed: int) -> Parameters:
    """Uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` for every tensor."""
    rng = nx.make_rng(seed, "init")
    emb_shapes, cls_shapes = parameter_shapes(config)

    def draw(shapes):
        out = []
        for wshape, bshape in zip(shapes[::2], shapes[1::2]):
            bound = 1.0 / np.sqrt(np.prod(wshape[1:]))
            out.append(rng.uniform(-bound, bound, wshape).astype(config.dtype))
            out.append(rng.uniform(-bound, bound, bshape).astype(config.dtype))
        return out

    return Parameters(draw(emb_shapes), draw(cls_shapes))


def _as_batch(config: NetworkConfig, x) -> np.ndarray:
    x = np.asarray(x, dtype=config.dtype)
    if x.shape == config.input_shape:
        return x[None]
    if x.ndim != 4 or x.shape[1:] != config.input_shape:
        raise DimensionError(f"input {x.shape} does not match {config.input_shape}")
    return x


def forward_embedding(config: NetworkConfig, params: Parameters, x: np.ndarray,
                      keep_cache: bool = True):
    """Batched forward pass through ``f``. Returns ``(embeddings, cache)``.

    Cache entries are ``(layer input, pre-activation, conv patches or None)``;
    the cache is None when ``keep_cache`` is false.
    """
    a = _as_batch(config, x)
    cache = []
    emb = params.embedding
    n_conv = len(config.conv_filters)
    for layer in range(n_conv):
        k, b = emb[2 * layer], emb[2 * layer + 1]
        z, cols = nx.conv2d(a, k, config.stride, return_cols=True)
        z += b[None, :, None, None]
        if keep_cache:
            cache.append((a, z, cols))
        a = nx.relu(z)
    a = a.reshape(a.shape[0], -1)
    for layer in range(n_conv, len(emb) // 2):
        w, b = emb[2 * layer], emb[2 * layer + 1]
        z = a @ w.T + b
        if keep_cache:
            cache.append((a, z, None))
        a = nx.relu(z)
    return a, (cache if keep_cache else None)


def backward_embedding(config: NetworkConfig, params: Parameters, cache, d_embed):
    """Backpropagate ``d_embed`` (gradient w.r.t. the embeddings) into W_f."""
    emb = params.embedding
    grads = [None] * len(emb)
    n_conv = len(config.conv_filters)
    n_layers = len(emb) // 2
    delta = d_embed
    for layer in range(n_layers - 1, n_conv - 1, -1):
        a_in, z, _ = cache[layer]
        dz = nx.relu_backward(z, delta)
        grads[2 * layer] = dz.T @ a_in
        grads[2 * layer + 1] = dz.sum(axis=0)
        delta = dz @ emb[2 * layer]
    if n_conv:
        delta = delta.reshape(cache[n_conv - 1][1].shape)
    for layer in range(n_conv - 1, -1, -1):
        a_in, z, cols = cache[layer]
        dz = nx.relu_backward(z, delta)
        dk, delta = nx.conv2d_backward(a_in, emb[2 * layer], dz, config.stride,
                                       need_input_grad=layer > 0, cols=cols)
        grads[2 * layer] = dk
        grads[2 * layer + 1] = dz.sum(axis=(0, 2, 3))
    return grads


def embed(config: NetworkConfig, params: Parameters, x: np.ndarray) -> np.ndarray:
    """``f(x)`` for a single input or a batch."""
    single = np.shape(x) == config.input_shape
    v, _ = forward_embedding(config, params, x, keep_cache=False)
    return v[0] if single else v


def embed_all(config: NetworkConfig, params: Parameters, xs: np.ndarray,
              chunk: int = 512) -> np.ndarray:
    if len(xs) == 0:
        return np.zeros((0, config.embedding_dim), dtype=config.dtype)
    return np.concatenate([embed(config, params, xs[i:i + chunk])
                           for i in range(0, len(xs), chunk)])


def class_logits(params: Parameters, v: np.ndarray) -> np.ndarray:
    w, b = params.classifier
    return v @ w.T + b


def classify(config: NetworkConfig, params: Parameters, v: np.ndarray) -> np.ndarray:
    """``g(v) = softmax(W_g v + b_g)`` for one embedding or a batch."""
    v = np.asarray(v, dtype=config.dtype)
    if v.shape[-1] != config.embedding_dim:
        raise DimensionError(f"embedding length {v.shape[-1]} != {config.embedding_dim}")
    return nx.softmax(class_logits(params, v))


def predict_proba(config: NetworkConfig, params: Parameters, xs: np.ndarray,
                  chunk: int = 512) -> np.ndarray:
    return classify(config, params, embed_all(config, params, xs, chunk))


def _check_labels(config: NetworkConfig, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if np.any(y < 0) or np.any(y >= config.n_classes):
        raise DataError(f"label out of range [0, {config.n_classes})")
    return y


def _head_grads(v, probs, y, row_weights):
    """Classifier-head gradient of ``sum_r row_weights[r] * H(softmax(W v_r + b), y_r)``."""
    d_logits = probs.copy()
    d_logits[np.arange(len(y)), y] -= 1
    d_logits *= row_weights[:, None]
    return d_logits, [d_logits.T @ v, d_logits.sum(axis=0)]


def backprop_stl(config: NetworkConfig, params: Parameters, xs, ys,
                 update_embedding: bool = True):
    """Gradients of the batch-mean cross-entropy ``H(g(f(x)), y)``.

    Returns ``(loss, gradients)``; with ``update_embedding=False`` the
    embedding-group gradients are zero (classifier-only fine-tuning).
    """
    xs = _as_batch(config, xs)
    ys = _check_labels(config, ys)
    if len(xs) == 0 or len(xs) != len(ys):
        raise DataError("batch must be nonempty with one label per input")
    n = len(ys)
    v, cache = forward_embedding(config, params, xs)
    probs = classify(config, params, v)
    loss = float(np.mean(-np.log(np.maximum(probs[np.arange(n), ys], 1e-12))))
    weights = np.full(n, 1.0 / n, dtype=v.dtype)
    d_logits, cls_grads = _head_grads(v, probs, ys, weights)
    if update_embedding:
        d_v = d_logits @ params.classifier[0]
        emb_grads = backward_embedding(config, params, cache, d_v)
    else:
        emb_grads = [np.zeros_like(a) for a in params.embedding]
    return loss, Parameters(emb_grads, cls_grads)


@dataclass
class MTLBatch:
    """A minibatch of weighted overloading instances in flat form.

    ``neighbors`` is a list of ``(k_i + 1, d)`` arrays and ``weights`` a list
    of matching simplex vectors.
    """
    xs: np.ndarray
    ys: np.ndarray
    neighbors: list
    weights: list


def mtl_losses(fx, neighbors, weights, probs_rows, ys, alpha):
    """Per-instance embedding losses, classifier losses and exponential weights.

    ``probs_rows`` are the classifier outputs on the concatenated neighbor
    embeddings. The exponential weights come back flat, in the same row order.
    """
    sizes = np.array([len(nb) for nb in neighbors])
    seg = np.repeat(np.arange(len(sizes)), sizes)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    flat_v = np.concatenate(neighbors)
    flat_w = np.concatenate(weights).astype(np.float64)
    sq = np.sum((fx[seg].astype(np.float64) - flat_v) ** 2, axis=1)
    lf = alpha * np.bincount(seg, flat_w * sq, minlength=len(sizes))
    # exp(-w_i d_i) / Z', shifted by the per-instance maximum
    a = -flat_w * sq
    e = np.exp(a - np.maximum.reduceat(a, starts)[seg])
    rho = e / np.bincount(seg, e, minlength=len(sizes))[seg]
    p = probs_rows[np.arange(len(seg)), np.asarray(ys)[seg]]
    lg = np.bincount(seg, rho * -np.log(np.maximum(p, 1e-12)), minlength=len(sizes))
    return lf, lg, rho


def backprop_mtl(config: NetworkConfig, params: Parameters, batch: MTLBatch):
    """Gradients of the batch mean of ``alpha * l'_f + l'_g`` under the routing
    contract described in the module docstring.

    Returns ``(mean_loss_f, mean_loss_g, gradients)``.
    """
    xs = _as_batch(config, batch.xs)
    ys = _check_labels(config, batch.ys)
    n = len(ys)
    if n == 0 or not (len(xs) == n == len(batch.neighbors) == len(batch.weights)):
        raise DataError("misaligned weighted batch")
    dtype = config.dtype
    nbs = [np.asarray(nb, dtype=dtype) for nb in batch.neighbors]
    ws = [np.asarray(w, dtype=dtype) for w in batch.weights]
    for nb, w in zip(nbs, ws):
        if nb.ndim != 2 or nb.shape[1] != config.embedding_dim:
            raise DataError(f"neighbor set of shape {nb.shape} has wrong dimension")
        if len(w) != len(nb):
            raise DataError(f"weight arity {len(w)} != neighbor count {len(nb)}")
    alpha = config.alpha
    fx, cache = forward_embedding(config, params, xs)

    flat_v = np.concatenate(nbs)
    flat_y = np.repeat(ys, [len(nb) for nb in nbs])
    probs = classify(config, params, flat_v)
    lf, lg, rho = mtl_losses(fx, nbs, ws, probs, ys, alpha)

    row_w = (rho / n).astype(dtype)
    _, cls_grads = _head_grads(flat_v, probs, flat_y, row_w)

    if alpha > 0:
        # d/dfx of alpha * sum_i w_i ||fx - v_i||^2 = 2 alpha (fx - sum_i w_i v_i)
        targets = np.stack([w @ nb for w, nb in zip(ws, nbs)])
        d_fx = (2.0 * alpha / n) * (fx - targets)
        emb_grads = backward_embedding(config, params, cache, d_fx.astype(dtype))
    else:
        emb_grads = [np.zeros_like(a) for a in params.embedding]
    return float(lf.mean()), float(lg.mean()), Parameters(emb_grads, cls_grads)


def sgd_step(params: Parameters, grads: Parameters, learning_rate: float,
             inplace: bool = False) -> Parameters:
    """``params - learning_rate * grads``; new arrays unless ``inplace``."""
    def step(ps, gs):
        out = []
        for p, g in zip(ps, gs):
            if p.shape != g.shape:
                raise DimensionError(f"gradient shape {g.shape} != parameter {p.shape}")
            if inplace:
                p -= np.asarray(learning_rate * g, dtype=p.dtype)
                out.append(p)
            else:
                out.append((p - learning_rate * g).astype(p.dtype, copy=False))
        return out
    return Parameters(step(params.embedding, grads.embedding),
                      step(params.classifier, grads.classifier))


# -- checkpoint format ------------------------------------------------------
# "DOSM" | u32 version | u32 config length | config JSON (sorted keys, UTF-8)
# | u32 tensor count | per tensor: u32 rank, u32 extents..., float32 LE data
MAGIC = b"DOSM"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config: NetworkConfig, params: Parameters) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    tensors = params.arrays()
    buf.write(struct.pack("<I", len(tensors)))
    for t in tensors:
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Read a checkpoint; returns ``(config, params)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def u32(count=1):
        nonlocal pos
        if pos + 4 * count > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(f"<{count}I", data, pos)
        pos += 4 * count
        return vals

    (version,) = u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (clen,) = u32()
    config = NetworkConfig.from_dict(json.loads(data[pos:pos + clen].decode()))
    pos += clen
    (count,) = u32()
    tensors = []
    for _ in range(count):
        (rank,) = u32()
        shape = u32(rank) if rank else ()
        size = int(np.prod(shape)) * 4
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        arr = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos)
        tensors.append(arr.reshape(shape).astype(config.dtype))
        pos += size
    emb_shapes, cls_shapes = parameter_shapes(config)
    if [t.shape for t in tensors] != [tuple(s) for s in emb_shapes + cls_shapes]:
        raise CheckpointError(f"{path}: tensor shapes do not match the stored config")
    n_emb = len(emb_shapes)
    return config, Parameters(tensors[:n_emb], tensors[n_emb:])
