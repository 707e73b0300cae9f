"""Small sequential networks with hand-written reverse-mode gradients.

Layers are described by a :class:`ModelSchema`; parameters live in a flat
list of float64 arrays (weight then bias for every parametrized layer).
Each array is one "layer" for pruning, clipping, quantization and
layer-wise encryption.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("dense", "relu", "conv3x3", "maxpool", "softmax-xent-head")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_size: int = 0  # dense: input features, conv3x3: input channels
    out_size: int = 0  # dense: output features, conv3x3: output channels

    def param_shapes(self) -> list[tuple[int, ...]]:
        if self.kind == "dense":
            return [(self.in_size, self.out_size), (self.out_size,)]
        if self.kind == "conv3x3":
            return [(self.out_size, self.in_size, 3, 3), (self.out_size,)]
        return []


@dataclass(frozen=True)
class ModelSchema:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ShapeError("layer names must be unique")
        for l in self.layers:
            if l.kind not in KINDS:
                raise ShapeError(f"unknown layer kind {l.kind!r}")
        if not self.layers or self.layers[-1].kind != "softmax-xent-head":
            raise ShapeError("the last layer must be a softmax-xent-head")
        self.output_shape  # validates composition

    @property
    def output_shape(self) -> tuple[int, ...]:
        shape = tuple(self.input_shape)
        for l in self.layers:
            shape = _out_shape(l, shape)
        return shape

    @property
    def classes(self) -> int:
        return self.output_shape[-1]

    def param_shapes(self) -> list[tuple[int, ...]]:
        return [s for l in self.layers for s in l.param_shapes()]

    def param_names(self) -> list[str]:
        out = []
        for l in self.layers:
            if l.param_shapes():
                out += [f"{l.name}.weight", f"{l.name}.bias"]
        return out

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [[l.name, l.kind, l.in_size, l.out_size] for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSchema":
        return cls(tuple(d["input_shape"]), tuple(LayerSpec(*row) for row in d["layers"]))


def _out_shape(l: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if l.kind == "dense":
        if int(np.prod(shape)) != l.in_size:
            raise ShapeError(f"{l.name}: expects {l.in_size} inputs, got shape {shape}")
        return (l.out_size,)
    if l.kind == "conv3x3":
        if len(shape) != 3 or shape[0] != l.in_size:
            raise ShapeError(f"{l.name}: expects ({l.in_size}, H, W), got {shape}")
        return (l.out_size, shape[1], shape[2])
    if l.kind == "maxpool":
        if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
            raise ShapeError(f"{l.name}: maxpool needs (C, even H, even W), got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    return shape


def mlp_schema(sizes=(784, 128, 10)) -> ModelSchema:
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(LayerSpec(f"fc{i + 1}", "dense", a, b))
        if i < len(sizes) - 2:
            layers.append(LayerSpec(f"relu{i + 1}", "relu"))
    layers.append(LayerSpec("head", "softmax-xent-head"))
    return ModelSchema((sizes[0],), tuple(layers))


def tiny_conv_schema(channels: int = 8, classes: int = 10, side: int = 8) -> ModelSchema:
    """Two 3x3 convolutions, a 2x2 max-pool and a dense classifier."""
    flat = channels * (side // 2) ** 2
    return ModelSchema(
        (1, side, side),
        (
            LayerSpec("conv1", "conv3x3", 1, channels),
            LayerSpec("relu1", "relu"),
            LayerSpec("conv2", "conv3x3", channels, channels),
            LayerSpec("relu2", "relu"),
            LayerSpec("pool", "maxpool"),
            LayerSpec("fc", "dense", flat, classes),
            LayerSpec("head", "softmax-xent-head"),
        ),
    )


def linear_schema(features: int, classes: int) -> ModelSchema:
    return ModelSchema(
        (features,), (LayerSpec("fc", "dense", features, classes), LayerSpec("head", "softmax-xent-head"))
    )


@dataclass
class Model:
    schema: ModelSchema
    params: list[np.ndarray]

    def __post_init__(self):
        shapes = self.schema.param_shapes()
        if len(shapes) != len(self.params):
            raise ShapeError(f"expected {len(shapes)} parameter tensors, got {len(self.params)}")
        self.params = [np.asarray(p, dtype=np.float64) for p in self.params]
        for s, p in zip(shapes, self.params):
            if p.shape != s:
                raise ShapeError(f"parameter shape {p.shape} != schema shape {s}")

    @classmethod
    def init(cls, schema: ModelSchema, seed: int = 0) -> "Model":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        rng = np.random.default_rng(seed)
        params = []
        for l in schema.layers:
            shapes = l.param_shapes()
            if not shapes:
                continue
            fan_in = l.in_size * (9 if l.kind == "conv3x3" else 1)
            bound = 1.0 / np.sqrt(fan_in)
            params += [rng.uniform(-bound, bound, size=s) for s in shapes]
        return cls(schema, params)

    @classmethod
    def zeros(cls, schema: ModelSchema) -> "Model":
        return cls(schema, [np.zeros(s) for s in schema.param_shapes()])

    def copy(self) -> "Model":
        return Model(self.schema, [p.copy() for p in self.params])

    def with_params(self, params) -> "Model":
        return Model(self.schema, [np.array(p, dtype=np.float64) for p in params])

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params)


def flatten_layer(model: Model, index: int) -> np.ndarray:
    return model.params[index].ravel().copy()


def unflatten_layer(model: Model, index: int, flat) -> None:
    flat = np.asarray(flat, dtype=np.float64)
    target = model.params[index]
    if flat.ndim != 1 or flat.size != target.size:
        raise ShapeError(f"layer {index} holds {target.size} values, got {flat.size}")
    model.params[index] = flat.reshape(target.shape).copy()


# --------------------------------------------------------------------------
# forward / backward


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, C*9, H*W) patches for a padded 3x3 stencil."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 9, h, w))
    for di in range(3):
        for dj in range(3):
            cols[:, :, di * 3 + dj] = xp[:, :, di : di + h, dj : dj + w]
    return cols.reshape(b, c * 9, h * w)


def _col2im(cols: np.ndarray, shape) -> np.ndarray:
    b, c, h, w = shape
    cols = cols.reshape(b, c, 9, h, w)
    xp = np.zeros((b, c, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            xp[:, :, di : di + h, dj : dj + w] += cols[:, :, di * 3 + dj]
    return xp[:, :, 1:-1, 1:-1]


def _forward(model: Model, x: np.ndarray, keep: bool):
    caches = []
    pi = 0
    for l in model.schema.layers:
        if l.kind == "dense":
            w, b = model.params[pi], model.params[pi + 1]
            pi += 2
            xin = x.reshape(x.shape[0], -1)
            caches.append((x.shape, xin) if keep else None)
            x = xin @ w + b
        elif l.kind == "conv3x3":
            w, b = model.params[pi], model.params[pi + 1]
            pi += 2
            cols = _im2col(x)
            caches.append((x.shape, cols) if keep else None)
            y = np.einsum("ok,bkp->bop", w.reshape(w.shape[0], -1), cols, optimize=True)
            x = (y + b[None, :, None]).reshape(x.shape[0], w.shape[0], x.shape[2], x.shape[3])
        elif l.kind == "relu":
            caches.append(x > 0 if keep else None)
            x = np.maximum(x, 0.0)
        elif l.kind == "maxpool":
            bsz, c, h, w_ = x.shape
            win = x.reshape(bsz, c, h // 2, 2, w_ // 2, 2).transpose(0, 1, 2, 4, 3, 5)
            win = win.reshape(bsz, c, h // 2, w_ // 2, 4)
            arg = np.argmax(win, axis=-1)
            caches.append((x.shape, arg) if keep else None)
            x = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        else:
            caches.append(None)
    return x, caches


def _check_input(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    want = tuple(model.schema.input_shape)
    if x.ndim == len(want):
        x = x[None]
    if x.shape[1:] != want:
        if x.ndim == 2 and x.shape[1] == int(np.prod(want)):
            x = x.reshape((x.shape[0],) + want)
        else:
            raise ShapeError(f"input shape {x.shape[1:]} does not match schema {want}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    return x


def forward(model: Model, inputs) -> np.ndarray:
    x = _check_input(model, inputs)
    logits, _ = _forward(model, x, keep=False)
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample softmax cross-entropy."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(labels)), labels]


def _backward(model: Model, caches, dlogits: np.ndarray, per_sample: bool = False):
    grads: list[np.ndarray] = [None] * len(model.params)  # type: ignore[list-item]
    pi = len(model.params)
    dx = dlogits
    for l, cache in zip(reversed(model.schema.layers), reversed(caches)):
        if l.kind == "dense":
            pi -= 2
            shape, xin = cache
            w = model.params[pi]
            if per_sample:
                grads[pi] = np.einsum("bi,bo->bio", xin, dx)
                grads[pi + 1] = dx.copy()
            else:
                grads[pi] = xin.T @ dx
                grads[pi + 1] = dx.sum(axis=0)
            dx = (dx @ w.T).reshape(shape)
        elif l.kind == "conv3x3":
            pi -= 2
            shape, cols = cache
            w = model.params[pi]
            dy = dx.reshape(shape[0], w.shape[0], -1)
            if per_sample:
                grads[pi] = np.einsum("bop,bkp->bok", dy, cols, optimize=True).reshape((-1,) + w.shape)
                grads[pi + 1] = dy.sum(axis=2)
            else:
                grads[pi] = np.einsum("bop,bkp->ok", dy, cols, optimize=True).reshape(w.shape)
                grads[pi + 1] = dy.sum(axis=(0, 2))
            dcols = np.einsum("ok,bop->bkp", w.reshape(w.shape[0], -1), dy, optimize=True)
            dx = _col2im(dcols, shape)
        elif l.kind == "relu":
            dx = dx * cache
        elif l.kind == "maxpool":
            shape, arg = cache
            bsz, c, h, w_ = shape
            dwin = np.zeros(arg.shape + (4,))
            np.put_along_axis(dwin, arg[..., None], dx[..., None], axis=-1)
            dwin = dwin.reshape(bsz, c, h // 2, w_ // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            dx = dwin.reshape(shape)
    return grads, dx


def loss_and_grad(model: Model, inputs, labels):
    """Mean softmax cross-entropy over the batch and its parameter gradients."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty batch")
    x = _check_input(model, inputs)
    if x.shape[0] != labels.size:
        raise ShapeError("inputs and labels differ in length")
    classes = model.schema.classes
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"labels must lie in [0, {classes})")
    logits, caches = _forward(model, x, keep=True)
    n = labels.size
    loss = float(cross_entropy(logits, labels).mean())
    d = softmax(logits)
    d[np.arange(n), labels] -= 1.0
    grads, _ = _backward(model, caches, d / n)
    return loss, grads


def per_sample_grads(model: Model, inputs, labels) -> np.ndarray:
    """Unaveraged gradient of each sample's loss, flattened: shape (batch, num_params)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    x = _check_input(model, inputs)
    if x.shape[0] != labels.size:
        raise ShapeError("inputs and labels differ in length")
    logits, caches = _forward(model, x, keep=True)
    d = softmax(logits)
    d[np.arange(labels.size), labels] -= 1.0
    grads, _ = _backward(model, caches, d, per_sample=True)
    return np.concatenate([g.reshape(labels.size, -1) for g in grads], axis=1)


# --------------------------------------------------------------------------
# optimization


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.0001
    batch_size: int = 64
    local_epochs: int = 1
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")


@dataclass
class OptimizerState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_model(cls, model: Model) -> "OptimizerState":
        return cls(0, [np.zeros_like(p) for p in model.params], [np.zeros_like(p) for p in model.params])


def optimizer_step(model: Model, grads, state: OptimizerState, cfg: TrainConfig):
    """One update; weight decay enters as an L2 term added to the gradient."""
    if len(grads) != len(model.params):
        raise ShapeError("gradient count does not match parameter count")
    if cfg.optimizer == "adam" and len(state.m) != len(model.params):
        raise ShapeError("optimizer state was not initialized for this model")
    new_params = []
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(model.params, grads)):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, parameter {p.shape}")
        g = g + cfg.weight_decay * p
        if cfg.optimizer == "sgd":
            new_params.append(p - cfg.learning_rate * g)
            continue
        state.m[i] = cfg.beta1 * state.m[i] + (1 - cfg.beta1) * g
        state.v[i] = cfg.beta2 * state.v[i] + (1 - cfg.beta2) * g * g
        m_hat = state.m[i] / (1 - cfg.beta1**t)
        v_hat = state.v[i] / (1 - cfg.beta2**t)
        new_params.append(p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps))
    model.params = new_params
    return model, state


def local_train(model: Model, inputs, labels, cfg: TrainConfig, state: OptimizerState | None = None):
    """Train a copy of ``model`` for ``cfg.local_epochs`` epochs of shuffled minibatches.

    Returns ``(weights, state)``; the input model is not modified.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty shard")
    work = model.copy()
    if state is None:
        state = OptimizerState.for_model(work)
    rng = np.random.default_rng(cfg.seed)
    n = labels.size
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grads = loss_and_grad(work, inputs[idx], labels[idx])
            optimizer_step(work, grads, state, cfg)
    return work.params, state


def predict(model: Model, inputs, batch: int = 1024) -> np.ndarray:
    x = _check_input(model, inputs)
    out = [forward(model, x[i : i + batch]) for i in range(0, x.shape[0], batch)]
    return np.concatenate(out)


def evaluate(model: Model, inputs, labels) -> tuple[float, float]:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty dataset")
    logits = predict(model, inputs)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return acc, float(cross_entropy(logits, labels).mean())


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"QCFL"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model: Model
    round_index: int
    val_acc: float
    masks: list[np.ndarray] | None = None


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    schema = json.dumps(ckpt.model.schema.to_dict()).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IId", CHECKPOINT_VERSION, ckpt.round_index, ckpt.val_acc))
    buf.write(struct.pack("<I", len(schema)))
    buf.write(schema)
    buf.write(struct.pack("<I", len(ckpt.model.params)))
    for p in ckpt.model.params:
        buf.write(struct.pack("<I", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(p.astype("<f8").tobytes())
    masks = ckpt.masks or []
    buf.write(struct.pack("<I", len(masks)))
    for m in masks:
        bits = np.asarray(m, dtype=bool).ravel()
        buf.write(struct.pack("<I", bits.size))
        buf.write(np.packbits(bits, bitorder="little").tobytes())
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    buf = io.BytesIO(data)

    def take(n):
        chunk = buf.read(n)
        if len(chunk) != n:
            raise ValueError("truncated checkpoint")
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint: bad magic, expected b'QCFL'")
    version, round_index, val_acc = struct.unpack("<IId", take(16))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (slen,) = struct.unpack("<I", take(4))
    schema = ModelSchema.from_dict(json.loads(take(slen)))
    (count,) = struct.unpack("<I", take(4))
    params = []
    for _ in range(count):
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        params.append(np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape))
    (mcount,) = struct.unpack("<I", take(4))
    masks = []
    for _ in range(mcount):
        (nbits,) = struct.unpack("<I", take(4))
        packed = np.frombuffer(take((nbits + 7) // 8), dtype=np.uint8)
        masks.append(np.unpackbits(packed, bitorder="little")[:nbits].astype(bool))
    return Checkpoint(Model(schema, params), round_index, val_acc, masks or None)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())

