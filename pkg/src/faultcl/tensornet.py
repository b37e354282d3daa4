"""Small convolutional network with hand-written backward passes.

Feature generator: two blocks of 3x3 valid convolution (80 filters), batch
normalisation, ReLU and 2x2 max pooling.  Classifier heads are dense
softmax layers on the flattened features.  Activations are kept NHWC.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

N_FILTERS = 80
KERNEL = 3
BN_EPS = 1e-5
BN_DECAY = 0.9

Params = dict[str, np.ndarray]


def _fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def feature_dim(image_size: int, n_filters: int = N_FILTERS) -> int:
    s = (image_size - KERNEL + 1) // 2
    s = (s - KERNEL + 1) // 2
    if s < 1:
        raise ValueError(f"image size {image_size} too small for two conv/pool blocks")
    return s * s * n_filters


# -- layer primitives ------------------------------------------------------


def _conv_forward(x, w, b):
    n, h, wd, c = x.shape
    f = w.shape[0]
    ho, wo = h - KERNEL + 1, wd - KERNEL + 1
    cols = sliding_window_view(x, (KERNEL, KERNEL), axis=(1, 2)).reshape(n * ho * wo, c * KERNEL * KERNEL)
    out = cols @ w.reshape(f, -1).T + b
    return out.reshape(n, ho, wo, f), (x.shape, cols, w)


def _conv_backward(dout, cache, need_dx=True):
    x_shape, cols, w = cache
    n, h, wd, c = x_shape
    f = w.shape[0]
    _, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, f)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(f, -1)).reshape(n, ho, wo, c, KERNEL, KERNEL)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(KERNEL):
        for j in range(KERNEL):
            dx[:, i : i + ho, j : j + wo, :] += dcols[..., i, j]
    return dx, dw, db


def _bn_forward(x, gamma, beta, mean, var):
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, gamma, inv_std)


def _bn_backward(dout, cache):
    xhat, gamma, inv_std = cache
    axes = (0, 1, 2)
    m = dout.size // dout.shape[-1]
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    dx = (gamma * inv_std / m) * (m * dout - dbeta - xhat * dgamma)
    return dx, dgamma, dbeta


def _pool_forward(x):
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    # window order is row-major; on ties the earliest candidate wins
    cand = [x[:, di : 2 * ho : 2, dj : 2 * wo : 2, :] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(cand[0], cand[1]), np.maximum(cand[2], cand[3]))
    idx = np.where(cand[0] == out, 0, np.where(cand[1] == out, 1, np.where(cand[2] == out, 2, 3))).astype(np.int8)
    return out, (x.shape, idx)


def _pool_backward(dout, cache):
    x_shape, idx = cache
    ho, wo = dout.shape[1], dout.shape[2]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, di : 2 * ho : 2, dj : 2 * wo : 2, :] = np.where(idx == k, dout, 0)
    return dx


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- network pieces --------------------------------------------------------


@dataclass
class FeatureGenerator:
    params: Params
    buffers: Params
    image_size: int

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        image_size: int = 32,
        n_filters: int = N_FILTERS,
        dtype=np.float32,
    ) -> "FeatureGenerator":
        feature_dim(image_size, n_filters)
        k2 = KERNEL * KERNEL
        params = {
            "conv1_w": _fan_in_uniform(rng, (n_filters, 1, KERNEL, KERNEL), k2, dtype),
            "conv1_b": _fan_in_uniform(rng, (n_filters,), k2, dtype),
            "bn1_gamma": np.ones(n_filters, dtype=dtype),
            "bn1_beta": np.zeros(n_filters, dtype=dtype),
            "conv2_w": _fan_in_uniform(rng, (n_filters, n_filters, KERNEL, KERNEL), n_filters * k2, dtype),
            "conv2_b": _fan_in_uniform(rng, (n_filters,), n_filters * k2, dtype),
            "bn2_gamma": np.ones(n_filters, dtype=dtype),
            "bn2_beta": np.zeros(n_filters, dtype=dtype),
        }
        buffers = {
            "bn1_mean": np.zeros(n_filters, dtype=dtype),
            "bn1_var": np.ones(n_filters, dtype=dtype),
            "bn2_mean": np.zeros(n_filters, dtype=dtype),
            "bn2_var": np.ones(n_filters, dtype=dtype),
        }
        return cls(params=params, buffers=buffers, image_size=image_size)

    @property
    def dtype(self):
        return self.params["conv1_w"].dtype

    @property
    def out_dim(self) -> int:
        return feature_dim(self.image_size, self.params["conv1_w"].shape[0])

    def _bn(self, x, layer, training, update_stats):
        gamma = self.params[f"{layer}_gamma"]
        beta = self.params[f"{layer}_beta"]
        if training:
            mean = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))
            if update_stats:
                rm, rv = self.buffers[f"{layer}_mean"], self.buffers[f"{layer}_var"]
                rm *= BN_DECAY
                rm += (1.0 - BN_DECAY) * mean
                rv *= BN_DECAY
                rv += (1.0 - BN_DECAY) * var
        else:
            mean, var = self.buffers[f"{layer}_mean"], self.buffers[f"{layer}_var"]
        return _bn_forward(x, gamma, beta, mean, var)

    def forward(self, images: np.ndarray, training: bool = False, update_stats: bool = True):
        """Map (N, S, S) images to (N, F) features; returns ``(features, cache)``."""
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim != 3 or x.shape[1:] != (self.image_size, self.image_size):
            raise ValueError(f"expected images of shape (N, {self.image_size}, {self.image_size}), got {x.shape}")
        if training and x.shape[0] < 2:
            raise ValueError("batch norm needs at least two images in training mode")
        p = self.params
        caches = []
        h = x[..., None]
        for layer in ("1", "2"):
            h, c_conv = _conv_forward(h, p[f"conv{layer}_w"], p[f"conv{layer}_b"])
            h, c_bn = self._bn(h, f"bn{layer}", training, update_stats)
            pre_relu = h
            h = np.maximum(h, 0)
            h, c_pool = _pool_forward(h)
            caches.append((c_conv, c_bn, pre_relu, c_pool))
        shape = h.shape
        return h.reshape(shape[0], -1), (caches, shape)

    def backward(self, dfeat: np.ndarray, cache) -> Params:
        caches, shape = cache
        grads: Params = {}
        d = dfeat.reshape(shape)
        for layer, (c_conv, c_bn, pre_relu, c_pool) in zip(("2", "1"), reversed(caches)):
            d = _pool_backward(d, c_pool)
            d = d * (pre_relu > 0)
            d, grads[f"bn{layer}_gamma"], grads[f"bn{layer}_beta"] = _bn_backward(d, c_bn)
            d, grads[f"conv{layer}_w"], grads[f"conv{layer}_b"] = _conv_backward(d, c_conv, need_dx=layer != "1")
        return grads

    def state(self) -> Params:
        return {**self.params, **self.buffers}


@dataclass
class ClassifierHead:
    params: Params

    @classmethod
    def create(cls, rng: np.random.Generator, in_dim: int, n_classes: int, dtype=np.float32) -> "ClassifierHead":
        if n_classes < 2:
            raise ValueError("a head needs at least two classes")
        return cls(
            params={
                "w": _fan_in_uniform(rng, (in_dim, n_classes), in_dim, dtype),
                "b": _fan_in_uniform(rng, (n_classes,), in_dim, dtype),
            }
        )

    @classmethod
    def zeros(cls, in_dim: int, n_classes: int, dtype=np.float32) -> "ClassifierHead":
        return cls(params={"w": np.zeros((in_dim, n_classes), dtype), "b": np.zeros(n_classes, dtype)})

    @property
    def n_classes(self) -> int:
        return self.params["b"].shape[0]

    def logits(self, feats: np.ndarray) -> np.ndarray:
        w = self.params["w"]
        if feats.shape[-1] != w.shape[0]:
            raise ValueError(f"head expects {w.shape[0]} features, got {feats.shape[-1]}")
        return feats @ w + self.params["b"]


def forward(fg: FeatureGenerator, head: ClassifierHead, images: np.ndarray, training: bool = False) -> np.ndarray:
    """Class probabilities for one image (S, S) or a batch (N, S, S)."""
    x = np.asarray(images)
    single = x.ndim == 2
    feats, _ = fg.forward(x[None] if single else x, training=training)
    probs = softmax(head.logits(feats))
    return probs[0] if single else probs


def predict_proba(fg: FeatureGenerator, head: ClassifierHead, images: np.ndarray, chunk: int = 128) -> np.ndarray:
    """Inference-mode probabilities, evaluated in chunks to bound memory."""
    out = [forward(fg, head, images[i : i + chunk]) for i in range(0, len(images), chunk)]
    return np.concatenate(out) if out else np.zeros((0, head.n_classes))


def multi_loss_and_grad(
    fg: FeatureGenerator,
    heads: Mapping[object, ClassifierHead],
    groups: Mapping[object, tuple[np.ndarray, np.ndarray]],
    update_stats: bool = True,
) -> tuple[float, dict[str, Params]]:
    """Mean over groups of each group's cross-entropy through its own head.

    All images share one training-mode pass of the feature generator.
    Returns ``(loss, {"fg": grads, key: head_grads, ...})``.
    """
    keys = [k for k in groups if len(groups[k][0])]
    if not keys:
        raise ValueError("empty batch")
    images = np.concatenate([np.asarray(groups[k][0]) for k in keys])
    feats, cache = fg.forward(images, training=True, update_stats=update_stats)

    dfeat = np.zeros_like(feats)
    grads: dict[str, Params] = {}
    loss = 0.0
    start = 0
    for k in keys:
        labels = np.asarray(groups[k][1], dtype=np.int64)
        head = heads[k]
        n = len(labels)
        if labels.min() < 0 or labels.max() >= head.n_classes:
            raise ValueError(f"label out of range for head {k!r}")
        f = feats[start : start + n]
        probs = softmax(head.logits(f))
        loss += -np.mean(np.log(probs[np.arange(n), labels]))
        dlogits = probs.copy()
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n * len(keys)
        grads[k] = {"w": f.T @ dlogits, "b": dlogits.sum(axis=0)}
        dfeat[start : start + n] = dlogits @ head.params["w"].T
        start += n
    loss /= len(keys)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    grads["fg"] = fg.backward(dfeat, cache)
    return float(loss), grads


def loss_and_grad(
    fg: FeatureGenerator,
    head: ClassifierHead,
    images: np.ndarray,
    labels: np.ndarray,
    update_stats: bool = True,
) -> tuple[float, Params, Params]:
    """Mean cross-entropy of one head; returns ``(loss, fg_grads, head_grads)``."""
    loss, grads = multi_loss_and_grad(fg, {0: head}, {0: (images, labels)}, update_stats=update_stats)
    return loss, grads["fg"], grads[0]


# -- optimiser ---------------------------------------------------------------


def sgd_step(params: Params, grads: Params, velocity: Params, lr: float, momentum: float = 0.9) -> None:
    """In-place momentum SGD: ``v = momentum*v - lr*g; p += v``."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for name, g in grads.items():
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(params[name])
        v *= momentum
        v -= lr * g
        params[name] += v


# -- gradient check ----------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0
    n_kinks: int = 0
    tolerance: float = 1e-3

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_error < self.tolerance


def _loss_and_pattern(fg, head, images, labels) -> tuple[float, bytes]:
    """Training-mode loss plus a digest of every ReLU mask and pool argmax."""
    feats, (caches, _) = fg.forward(images, training=True, update_stats=False)
    probs = softmax(head.logits(feats))
    labels = np.asarray(labels, dtype=np.int64)
    loss = -float(np.mean(np.log(probs[np.arange(len(labels)), labels])))
    h = hashlib.sha1()
    for _, _, pre_relu, (_, idx) in caches:
        h.update(np.packbits(pre_relu > 0).tobytes())
        h.update(idx.tobytes())
    return loss, h.digest()


def grad_check(
    fg: FeatureGenerator,
    head: ClassifierHead,
    images: np.ndarray,
    labels: np.ndarray,
    epsilon: float = 1e-4,
    tolerance: float = 1e-3,
    n_samples: int = 50,
    rng: np.random.Generator | None = None,
    abs_floor: float = 1e-7,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``n_samples`` entries of every parameter array are probed.  A probe whose
    +/- epsilon evaluations switch any ReLU or max-pool decision straddles a
    kink, where central differences are meaningless; it is counted in
    ``n_kinks`` and replaced by another entry.  The relative error is
    ``|a - n| / max(|a|, |n|, abs_floor)``; the floor keeps gradients that
    are zero by construction (conv bias ahead of batch norm) from dividing
    rounding noise by rounding noise.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    _, fg_grads, head_grads = loss_and_grad(fg, head, images, labels, update_stats=False)
    _, base_pattern = _loss_and_pattern(fg, head, images, labels)
    targets = [(fg.params, name, fg_grads[name], f"fg.{name}") for name in fg.params]
    targets += [(head.params, name, head_grads[name], f"head.{name}") for name in head.params]

    report = GradCheckReport(max_rel_error=0.0, tolerance=tolerance)
    for store, name, analytic, label in targets:
        flat = store[name].reshape(-1)
        want = min(n_samples, flat.size)
        order = rng.permutation(flat.size)
        worst, done = 0.0, 0
        for i in order:
            if done == want:
                break
            old = flat[i]
            flat[i] = old + epsilon
            lp, pat_p = _loss_and_pattern(fg, head, images, labels)
            flat[i] = old - epsilon
            lm, pat_m = _loss_and_pattern(fg, head, images, labels)
            flat[i] = old
            if pat_p != base_pattern or pat_m != base_pattern:
                report.n_kinks += 1
                continue
            num = (lp - lm) / (2.0 * epsilon)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), abs_floor))
            done += 1
        report.n_checked += done
        report.per_param[label] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report


# -- checkpoint blob ---------------------------------------------------------
# "DFNN" | u32 version | u32 n_tensors | per tensor: u16 name_len, name (utf-8),
# u8 ndim, u32 dims... | float32 little-endian payload of all tensors in
# table order, row-major.

CHECKPOINT_MAGIC = b"DFNN"
CHECKPOINT_VERSION = 1


def dump_params(params: Mapping[str, np.ndarray], fh: BinaryIO) -> None:
    names = list(params)
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(names)))
    for name in names:
        raw = name.encode("utf-8")
        shape = np.shape(params[name])
        fh.write(struct.pack("<H", len(raw)) + raw)
        fh.write(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
    for name in names:
        fh.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())


def load_params(fh: BinaryIO) -> dict[str, np.ndarray]:
    if fh.read(4) != CHECKPOINT_MAGIC:
        raise ValueError("not a DFNN checkpoint")
    version, count = struct.unpack("<II", fh.read(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    table = []
    for _ in range(count):
        (n,) = struct.unpack("<H", fh.read(2))
        name = fh.read(n).decode("utf-8")
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        table.append((name, shape))
    out = {}
    for name, shape in table:
        size = int(np.prod(shape, dtype=np.int64))
        data = fh.read(4 * size)
        if len(data) != 4 * size:
            raise ValueError(f"truncated payload for {name}")
        out[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    return out


def params_blob(params: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    dump_params(params, buf)
    return buf.getvalue()


def params_hash(params: Mapping[str, np.ndarray]) -> str:
    return hashlib.sha256(params_blob(params)).hexdigest()


def save_params(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        dump_params(params, fh)


def read_params(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return load_params(fh)
