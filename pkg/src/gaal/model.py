"""Two MLP encoders feeding one shared linear classifier, with manual backprop.

Parameter tensors follow the ``[out x in]`` weight convention.  The shared
head gradient is always exposed flattened as ``concat(W.ravel(), b)`` so
the surgery code can treat it as a single vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream, ShapeError, as_matrix, log_softmax_rows, relu, relu_grad, softmax_rows

MODALITIES = ("I", "T")
LOG_CLAMP = 1e-12


def check_modality(m: str) -> str:
    if m not in MODALITIES:
        raise ValueError(f"unknown modality {m!r}; expected 'I' or 'T'")
    return m


def other(m: str) -> str:
    return "T" if check_modality(m) == "I" else "I"


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("an MLP needs at least one layer and one bias per weight")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} incompatible with bias {b.shape}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(
                    f"layer {k} expects input {w.shape[1]} but layer {k - 1} emits {self.weights[k - 1].shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def tensors(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class SharedClassifier:
    weight: np.ndarray  # [Y x d_in]
    bias: np.ndarray  # [Y]

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"head weight {self.weight.shape} incompatible with bias {self.bias.shape}")

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def size(self) -> int:
        return self.weight.size + self.bias.size

    def vector(self) -> np.ndarray:
        return np.concatenate([self.weight.ravel(), self.bias])

    def with_vector(self, vec: np.ndarray) -> "SharedClassifier":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ShapeError(f"head vector has length {vec.size}, expected {self.size}")
        nw = self.weight.size
        return SharedClassifier(vec[:nw].reshape(self.weight.shape).copy(), vec[nw:].copy())

    def copy(self) -> "SharedClassifier":
        return SharedClassifier(self.weight.copy(), self.bias.copy())


@dataclass
class ModelState:
    """Encoders for both modalities plus the classifier head.

    In the alternating setting the head consumes one latent (shared across
    modalities).  The joint baseline uses a fused head over the concatenated
    latents, so its input width is twice the latent size.
    """

    encoder_image: MlpParams
    encoder_tabular: MlpParams
    head: SharedClassifier

    def __post_init__(self):
        d = self.encoder_image.out_dim
        if self.encoder_tabular.out_dim != d:
            raise ShapeError(
                f"encoders emit different latent sizes ({d} vs {self.encoder_tabular.out_dim})"
            )
        if self.head.in_dim not in (d, 2 * d):
            raise ShapeError(f"head input {self.head.in_dim} does not match latent size {d}")

    @property
    def latent_dim(self) -> int:
        return self.encoder_image.out_dim

    @property
    def fused(self) -> bool:
        return self.head.in_dim == 2 * self.latent_dim

    @property
    def n_classes(self) -> int:
        return self.head.n_classes

    def encoder(self, m: str) -> MlpParams:
        return self.encoder_image if check_modality(m) == "I" else self.encoder_tabular

    def replace(self, **kw) -> "ModelState":
        fields = {"encoder_image": self.encoder_image, "encoder_tabular": self.encoder_tabular, "head": self.head}
        fields.update(kw)
        return ModelState(**fields)

    def with_encoder(self, m: str, params: MlpParams) -> "ModelState":
        key = "encoder_image" if check_modality(m) == "I" else "encoder_tabular"
        return self.replace(**{key: params})

    def tensors(self):
        yield from self.encoder_image.tensors()
        yield from self.encoder_tabular.tensors()
        yield self.head.weight
        yield self.head.bias

    def copy(self) -> "ModelState":
        return ModelState(self.encoder_image.copy(), self.encoder_tabular.copy(), self.head.copy())

    def equals(self, other: "ModelState") -> bool:
        a, b = list(self.tensors()), list(other.tensors())
        return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class EncoderCache:
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activation of each layer


@dataclass
class BackwardResult:
    encoder_grads: MlpParams
    head_grad: SharedClassifier
    head_grad_per_sample: np.ndarray  # [B x head.size]
    loss: float
    probs: np.ndarray = field(repr=False, default=None)

    @property
    def head_vector(self) -> np.ndarray:
        return self.head_grad.vector()


# -- initialisation --------------------------------------------------------


def _init_layer(rng: RngStream, fan_out: int, fan_in: int):
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"invalid layer dims {fan_in} -> {fan_out}")
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)


def init_mlp(dims, rng: RngStream) -> MlpParams:
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError(f"an MLP needs at least input and output dims, got {dims}")
    ws, bs = [], []
    for k in range(len(dims) - 1):
        w, b = _init_layer(rng.child(k), dims[k + 1], dims[k])
        ws.append(w)
        bs.append(b)
    return MlpParams(ws, bs)


def init_params(image_dims, tabular_dims, n_classes: int, rng: RngStream, fused: bool = False) -> ModelState:
    """Fan-in scaled uniform weights, zero biases.

    ``image_dims``/``tabular_dims`` are full layer chains such as
    ``[64, 64, 32]``; both must end in the same latent size.
    """
    image_dims, tabular_dims = list(image_dims), list(tabular_dims)
    if image_dims[-1] != tabular_dims[-1]:
        raise ValueError(f"encoder chains must share a latent size: {image_dims} vs {tabular_dims}")
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    enc_i = init_mlp(image_dims, rng.child(0))
    enc_t = init_mlp(tabular_dims, rng.child(1))
    d = image_dims[-1] * (2 if fused else 1)
    w, b = _init_layer(rng.child(2), n_classes, d)
    return ModelState(enc_i, enc_t, SharedClassifier(w, b))


# -- forward ---------------------------------------------------------------


def encode(params: MlpParams, x) -> tuple[np.ndarray, EncoderCache]:
    """Forward pass; ReLU on hidden layers, identity on the last one."""
    h = as_matrix(x)
    if h.shape[1] != params.in_dim:
        raise ShapeError(f"encoder expects {params.in_dim} input features, got {h.shape[1]}")
    cache = EncoderCache([], [])
    n = len(params.weights)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        z = h @ w.T + b
        cache.pre.append(z)
        h = relu(z) if k < n - 1 else z
    return h, cache


def head_logits(head: SharedClassifier, latent: np.ndarray) -> np.ndarray:
    if latent.shape[1] != head.in_dim:
        raise ShapeError(f"head expects {head.in_dim} latent features, got {latent.shape[1]}")
    return latent @ head.weight.T + head.bias


def forward_logits(state: ModelState, modality: str, x) -> np.ndarray:
    if state.fused:
        raise ShapeError("forward_logits needs a shared head; use joint_logits for a fused head")
    u, _ = encode(state.encoder(modality), x)
    return head_logits(state.head, u)


def joint_logits(state: ModelState, x_image, x_tabular) -> np.ndarray:
    u_i, _ = encode(state.encoder_image, x_image)
    u_t, _ = encode(state.encoder_tabular, x_tabular)
    if u_i.shape[0] != u_t.shape[0]:
        raise ShapeError(f"row mismatch between modalities: {u_i.shape[0]} vs {u_t.shape[0]}")
    return head_logits(state.head, np.hstack([u_i, u_t]))


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != n_rows:
        raise ShapeError(f"expected {n_rows} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class ids")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        bad = y[(y < 0) | (y >= n_classes)][0]
        raise ValueError(f"label {bad} out of range [0, {n_classes})")
    return y


def cross_entropy(logits, labels) -> float:
    logits = as_matrix(logits)
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    logp = log_softmax_rows(logits)[np.arange(len(y)), y]
    logp = np.maximum(logp, np.log(LOG_CLAMP))
    return float(-logp.mean())


def per_sample_cross_entropy(logits, labels) -> np.ndarray:
    logits = as_matrix(logits)
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    logp = log_softmax_rows(logits)[np.arange(len(y)), y]
    return -np.maximum(logp, np.log(LOG_CLAMP))


# -- backward --------------------------------------------------------------


def logit_residual(logits: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample dL_i/dlogits (softmax minus one-hot), plus the probabilities."""
    p = softmax_rows(logits)
    r = p.copy()
    r[np.arange(len(y)), y] -= 1.0
    # clamped samples contribute no gradient
    clamped = p[np.arange(len(y)), y] < LOG_CLAMP
    if clamped.any():
        r[clamped] = 0.0
    return r, p


def encoder_backward(params: MlpParams, cache: EncoderCache, d_out: np.ndarray) -> tuple[MlpParams, np.ndarray]:
    """Backprop ``d_out`` (gradient w.r.t. the encoder output) through the MLP.

    Returns parameter gradients and the gradient w.r.t. the encoder input.
    """
    n = len(params.weights)
    gw, gb = [None] * n, [None] * n
    delta = d_out
    for k in range(n - 1, -1, -1):
        if k < n - 1:
            delta = delta * relu_grad(cache.pre[k])
        gw[k] = delta.T @ cache.inputs[k]
        gb[k] = delta.sum(axis=0)
        delta = delta @ params.weights[k]
    return MlpParams(gw, gb), delta


def backward(state: ModelState, modality: str, x, labels) -> BackwardResult:
    """Exact gradients of the mean cross-entropy for one modality branch."""
    enc = state.encoder(modality)
    u, cache = encode(enc, x)
    logits = head_logits(state.head, u)
    y = _check_labels(labels, logits.shape[0], state.n_classes)
    loss = cross_entropy(logits, y)
    r, p = logit_residual(logits, y)
    b = len(y)

    per_w = r[:, :, None] * u[:, None, :]  # [B, Y, d]
    per_sample = np.concatenate([per_w.reshape(b, -1), r], axis=1)
    head_grad = SharedClassifier(r.T @ u / b, r.sum(axis=0) / b)

    d_u = (r / b) @ state.head.weight
    enc_grads, _ = encoder_backward(enc, cache, d_u)
    return BackwardResult(enc_grads, head_grad, per_sample, loss, p)


@dataclass
class JointBackwardResult:
    image_grads: MlpParams
    tabular_grads: MlpParams
    head_grad: SharedClassifier
    loss: float
    latents: tuple = field(repr=False, default=None)
    caches: tuple = field(repr=False, default=None)
    probs: np.ndarray = field(repr=False, default=None)


def joint_backward(state: ModelState, x_image, x_tabular, labels) -> JointBackwardResult:
    """Gradients of the fused-head cross-entropy over concatenated latents."""
    if not state.fused:
        raise ShapeError("joint_backward needs a fused head over both latents")
    u_i, c_i = encode(state.encoder_image, x_image)
    u_t, c_t = encode(state.encoder_tabular, x_tabular)
    if u_i.shape[0] != u_t.shape[0]:
        raise ShapeError(f"row mismatch between modalities: {u_i.shape[0]} vs {u_t.shape[0]}")
    u = np.hstack([u_i, u_t])
    logits = head_logits(state.head, u)
    y = _check_labels(labels, logits.shape[0], state.n_classes)
    loss = cross_entropy(logits, y)
    r, p = logit_residual(logits, y)
    b = len(y)
    head_grad = SharedClassifier(r.T @ u / b, r.sum(axis=0) / b)
    d_u = (r / b) @ state.head.weight
    d = state.latent_dim
    gi, _ = encoder_backward(state.encoder_image, c_i, d_u[:, :d])
    gt, _ = encoder_backward(state.encoder_tabular, c_t, d_u[:, d:])
    return JointBackwardResult(gi, gt, head_grad, loss, (u_i, u_t), (c_i, c_t), p)


# -- checkpoint ------------------------------------------------------------

CKPT_MAGIC = "GAALCKPT"
CKPT_VERSION = "v1"


def _chain(dims) -> str:
    return "-".join(str(int(d)) for d in dims)


def save_checkpoint(state: ModelState, path) -> None:
    """Header ``GAALCKPT v1 <image chain> <tabular chain> <head in>-<Y>``
    followed by little-endian float64 tensors in declaration order."""
    header = " ".join(
        [
            CKPT_MAGIC,
            CKPT_VERSION,
            _chain(state.encoder_image.dims),
            _chain(state.encoder_tabular.dims),
            _chain([state.head.in_dim, state.n_classes]),
        ]
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        for t in state.tensors():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    parts = raw[:nl].decode("ascii", errors="replace").split()
    if len(parts) != 5 or parts[0] != CKPT_MAGIC or parts[1] != CKPT_VERSION:
        raise ValueError(f"{path}: not a {CKPT_MAGIC} {CKPT_VERSION} file")
    try:
        img = [int(d) for d in parts[2].split("-")]
        tab = [int(d) for d in parts[3].split("-")]
        head_in, n_classes = (int(d) for d in parts[4].split("-"))
    except ValueError as exc:
        raise ValueError(f"{path}: malformed dims in header") from exc
    body = raw[nl + 1 :]
    offset = 0

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape))
        if offset + 8 * n > len(body):
            raise ValueError(f"{path}: truncated checkpoint")
        a = np.frombuffer(body, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * n
        return a

    def mlp(dims):
        ws, bs = [], []
        for k in range(len(dims) - 1):
            ws.append(take((dims[k + 1], dims[k])))
            bs.append(take((dims[k + 1],)))
        return MlpParams(ws, bs)

    enc_i, enc_t = mlp(img), mlp(tab)
    head = SharedClassifier(take((n_classes, head_in)), take((n_classes,)))
    if offset != len(body):
        raise ValueError(f"{path}: {len(body) - offset} trailing bytes")
    return ModelState(enc_i, enc_t, head)
