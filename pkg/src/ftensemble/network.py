"""Trainable feature extractor and soft-max classifier with exact analytic
gradients, plus the three training losses and SGD with momentum.

Two desk-scale backbones share one parameter layout:

* vector mode — a ReLU multi-layer perceptron ending in a linear feature
  layer (so an identity-weight single layer reproduces its input exactly);
* image mode — a small stack of 3x3 conv + ReLU + 2x2 average-pool blocks
  followed by a linear feature layer.

Losses: mean cross-entropy; the spectral penalty on a feature batch, i.e.
the sum of squared singular values of the batch feature matrix, computed in
its exact Frobenius form sum(A**2) (the SVD route stays a test oracle); and
mean Shannon prediction entropy. ``backward`` differentiates the composite
ce + lambda * spectral(support features) + beta * entropy(query predictions)
objective through an optional fixed orthogonal projection of the features.

Checkpoint file (External interface): magic b"FTEM", u32 version, u32
length-prefixed JSON config echo, then raw little-endian float64 payloads
for every array in declaration order (backbone weight/bias pairs, then
classifier weight and bias).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, DataError

__all__ = [
    "BackboneConfig",
    "NetParams",
    "OptState",
    "LossSpec",
    "init_params",
    "init_classifier",
    "forward_features",
    "classify",
    "softmax",
    "loss_ce",
    "loss_bsr",
    "loss_entropy",
    "composite_loss",
    "backward",
    "sgd_step",
    "save_params",
    "load_params",
]

PROB_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"FTEM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture of the feature extractor.

    ``input_shape`` is (d,) for vector mode or (C, H, W) for image mode.
    ``feature_dim`` is the width m of the extracted features; it must be at
    least 2 because the ensemble's projections drop one dimension.
    """

    input_shape: tuple[int, ...]
    hidden_widths: tuple[int, ...] = (64,)
    conv_channels: tuple[int, ...] = (8, 16)
    feature_dim: int = 32

    def __post_init__(self):
        if len(self.input_shape) not in (1, 3):
            raise ContractError(
                f"input_shape must be (d,) or (C, H, W), got {self.input_shape}"
            )
        if any(n < 1 for n in self.input_shape):
            raise ContractError(f"input_shape entries must be >= 1: {self.input_shape}")
        if self.feature_dim < 2:
            raise ContractError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if any(w < 1 for w in self.hidden_widths):
            raise ContractError(f"hidden widths must be >= 1: {self.hidden_widths}")
        if self.is_image:
            if len(self.conv_channels) < 1:
                raise ContractError("image mode needs at least one conv block")
            shrink = 2 ** len(self.conv_channels)
            if self.input_shape[1] < shrink or self.input_shape[2] < shrink:
                raise ContractError(
                    f"image {self.input_shape[1]}x{self.input_shape[2]} too small "
                    f"for {len(self.conv_channels)} pooling stages"
                )

    @property
    def is_image(self) -> bool:
        return len(self.input_shape) == 3

    def flat_dim_after_conv(self) -> int:
        c, h, w = self.input_shape
        for _ in self.conv_channels:
            h //= 2
            w //= 2
        return self.conv_channels[-1] * h * w


@dataclass
class NetParams:
    """Backbone weight/bias arrays in declaration order plus the classifier.

    Gradients reuse this container (same shapes, gradient values).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    clf_w: np.ndarray
    clf_b: np.ndarray

    def copy(self) -> "NetParams":
        return NetParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.clf_w.copy(),
            self.clf_b.copy(),
        )

    def arrays(self):
        """Yield (array, is_bias) over every parameter, declaration order."""
        for w, b in zip(self.weights, self.biases):
            yield w, False
            yield b, True
        yield self.clf_w, False
        yield self.clf_b, True


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_classifier(rng: np.random.Generator, n_classes: int, in_dim: int):
    w = _glorot(rng, (n_classes, in_dim), in_dim, n_classes)
    return w, np.zeros(n_classes)


def init_params(
    cfg: BackboneConfig,
    n_classes: int,
    rng: np.random.Generator,
    clf_in_dim: int | None = None,
) -> NetParams:
    """Glorot-uniform weights, zero biases.

    ``clf_in_dim`` defaults to the feature width; branch networks pass the
    post-projection width (feature_dim - 1).
    """
    weights: list[np.ndarray] = []
    biases: list[np.ndarray] = []
    if cfg.is_image:
        c_in = cfg.input_shape[0]
        for c_out in cfg.conv_channels:
            fan_in, fan_out = c_in * 9, c_out * 9
            weights.append(_glorot(rng, (c_out, c_in, 3, 3), fan_in, fan_out))
            biases.append(np.zeros(c_out))
            c_in = c_out
        d = cfg.flat_dim_after_conv()
    else:
        d = cfg.input_shape[0]
        for width in cfg.hidden_widths:
            weights.append(_glorot(rng, (width, d), d, width))
            biases.append(np.zeros(width))
            d = width
    weights.append(_glorot(rng, (cfg.feature_dim, d), d, cfg.feature_dim))
    biases.append(np.zeros(cfg.feature_dim))
    clf_dim = cfg.feature_dim if clf_in_dim is None else clf_in_dim
    clf_w, clf_b = init_classifier(rng, n_classes, clf_dim)
    return NetParams(weights, biases, clf_w, clf_b)


# ---------------------------------------------------------------------------
# forward / backward


def _im2col(x: np.ndarray) -> np.ndarray:
    # (b, C, H, W) -> (b, H*W, C*9) with zero padding 1 for 3x3 kernels
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, c * 9))


def _col2im(dcols: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    b, c, h, w = shape
    d = dcols.reshape(b, h, w, c, 3, 3).transpose(0, 3, 1, 2, 4, 5)
    dp = np.zeros((b, c, h + 2, w + 2))
    for ky in range(3):
        for kx in range(3):
            dp[:, :, ky : ky + h, kx : kx + w] += d[:, :, :, :, ky, kx]
    return dp[:, :, 1 : 1 + h, 1 : 1 + w]


def _avgpool2(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    t = x[:, :, : h2 * 2, : w2 * 2].reshape(b, c, h2, 2, w2, 2)
    return t.mean(axis=(3, 5))


def _avgpool2_backward(d_out: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    b, c, h, w = in_shape
    h2, w2 = h // 2, w // 2
    d_in = np.zeros(in_shape)
    d_in[:, :, : h2 * 2, : w2 * 2] = (
        np.repeat(np.repeat(d_out, 2, axis=2), 2, axis=3) * 0.25
    )
    return d_in


def _check_inputs(cfg: BackboneConfig, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[1:] != cfg.input_shape:
        raise ContractError(
            f"input shape {x.shape[1:]} does not match backbone {cfg.input_shape}"
        )
    return x


def _forward_backbone(params: NetParams, cfg: BackboneConfig, x: np.ndarray):
    """Features plus the caches backward needs."""
    cache = []
    if cfg.is_image:
        h = x
        for w_k, b_k in zip(params.weights[:-1], params.biases[:-1]):
            c_out = w_k.shape[0]
            patches = _im2col(h)
            z = patches @ w_k.reshape(c_out, -1).T + b_k
            bsz, hw, _ = z.shape
            hh, ww = h.shape[2], h.shape[3]
            z = z.transpose(0, 2, 1).reshape(bsz, c_out, hh, ww)
            r = np.maximum(z, 0.0)
            cache.append((patches, z > 0.0, h.shape, r.shape))
            h = _avgpool2(r)
        flat = h.reshape(h.shape[0], -1)
    else:
        flat = x
        for w_k, b_k in zip(params.weights[:-1], params.biases[:-1]):
            z = flat @ w_k.T + b_k
            cache.append((flat, z > 0.0))
            flat = np.maximum(z, 0.0)
    cache.append(flat)
    feats = flat @ params.weights[-1].T + params.biases[-1]
    return feats, cache


def _backward_backbone(
    params: NetParams, cfg: BackboneConfig, cache, d_feats: np.ndarray
):
    """Gradients of all backbone arrays given d loss / d features."""
    g_w = [np.zeros_like(w) for w in params.weights]
    g_b = [np.zeros_like(b) for b in params.biases]
    flat = cache[-1]
    g_w[-1] = d_feats.T @ flat
    g_b[-1] = d_feats.sum(axis=0)
    d = d_feats @ params.weights[-1]
    if cfg.is_image:
        last = cache[-2]
        pooled_shape = (last[3][0], last[3][1], last[3][2] // 2, last[3][3] // 2)
        d = d.reshape(pooled_shape)
        for i in range(len(params.weights) - 2, -1, -1):
            patches, relu_mask, in_shape, relu_shape = cache[i]
            c_out = params.weights[i].shape[0]
            d_r = _avgpool2_backward(d, relu_shape)
            d_z = d_r * relu_mask
            bsz = d_z.shape[0]
            d_zmat = d_z.reshape(bsz, c_out, -1).transpose(0, 2, 1)
            w_mat = params.weights[i].reshape(c_out, -1)
            g_w[i] = np.tensordot(d_zmat, patches, axes=([0, 1], [0, 1])).reshape(
                params.weights[i].shape
            )
            g_b[i] = d_z.sum(axis=(0, 2, 3))
            if i > 0:
                d = _col2im(d_zmat @ w_mat, in_shape)
    else:
        for i in range(len(params.weights) - 2, -1, -1):
            layer_in, relu_mask = cache[i]
            d = d * relu_mask
            g_w[i] = d.T @ layer_in
            g_b[i] = d.sum(axis=0)
            if i > 0:
                d = d @ params.weights[i]
    return g_w, g_b


def forward_features(
    params: NetParams, cfg: BackboneConfig, inputs: np.ndarray
) -> np.ndarray:
    """Feature batch (b x feature_dim) for a batch of inputs."""
    x = _check_inputs(cfg, inputs)
    feats, _ = _forward_backbone(params, cfg, x)
    return feats


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def classify(clf_w: np.ndarray, clf_b: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Row-wise soft-max class probabilities (max-subtracted for stability)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != clf_w.shape[1]:
        raise ContractError(
            f"feature width {features.shape} does not match classifier "
            f"{clf_w.shape}"
        )
    return softmax(features @ clf_w.T + clf_b)


def loss_ce(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-probability of the true class, floored at 1e-12."""
    labels = np.asarray(labels)
    b, k = probs.shape
    if labels.shape != (b,):
        raise ContractError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"label out of range [0, {k})")
    p = probs[np.arange(b), labels]
    return float(-np.log(np.maximum(p, PROB_FLOOR)).mean())


def loss_bsr(features: np.ndarray) -> float:
    """Sum of squared singular values of the batch feature matrix.

    Equal to the sum of squared entries (Frobenius identity), which is what
    gets computed; absent singular values past min(b, m) contribute zero.
    """
    features = np.asarray(features, dtype=np.float64)
    return float(np.sum(features * features))


def loss_entropy(probs: np.ndarray) -> float:
    """Mean Shannon entropy of prediction rows, with 0*log(0) = 0."""
    logp = np.log(np.maximum(probs, PROB_FLOOR))
    return float(-(probs * logp).sum(axis=1).mean())


@dataclass(frozen=True)
class LossSpec:
    """Which terms of the composite objective are active.

    Cross-entropy on the labeled batch is always on; the spectral penalty is
    added with weight ``bsr_weight`` when positive; the entropy term with
    weight ``ent_weight`` is evaluated on ``query_inputs`` when both are set.
    ``projection`` is the fixed orthogonal feature transform of the branch
    (None means the classifier reads raw backbone features).
    """

    bsr_weight: float = 0.0
    ent_weight: float = 0.0
    projection: np.ndarray | None = None
    query_inputs: np.ndarray | None = None


def _project(feats: np.ndarray, projection: np.ndarray | None) -> np.ndarray:
    if projection is None:
        return feats
    return feats @ projection.T


def composite_loss(
    params: NetParams,
    cfg: BackboneConfig,
    inputs: np.ndarray,
    labels: np.ndarray,
    spec: LossSpec,
) -> dict[str, float]:
    """Loss terms as ``backward`` sees them, forward pass only."""
    feats = _project(forward_features(params, cfg, inputs), spec.projection)
    probs = classify(params.clf_w, params.clf_b, feats)
    parts = {"ce": loss_ce(probs, labels), "bsr": 0.0, "ent": 0.0}
    if spec.bsr_weight > 0.0:
        parts["bsr"] = loss_bsr(feats)
    if spec.ent_weight > 0.0 and spec.query_inputs is not None:
        q_feats = _project(
            forward_features(params, cfg, spec.query_inputs), spec.projection
        )
        parts["ent"] = loss_entropy(classify(params.clf_w, params.clf_b, q_feats))
    parts["total"] = (
        parts["ce"] + spec.bsr_weight * parts["bsr"] + spec.ent_weight * parts["ent"]
    )
    return parts


def backward(
    params: NetParams,
    cfg: BackboneConfig,
    inputs: np.ndarray,
    labels: np.ndarray,
    spec: LossSpec,
) -> tuple[NetParams, dict[str, float]]:
    """Exact analytic gradients of the selected composite loss.

    Returns (gradients shaped like params, loss parts). The spectral
    gradient flows through the Frobenius form (d sum(A**2) / dA = 2A), the
    entropy gradient through the query soft-max.
    """
    x = _check_inputs(cfg, inputs)
    labels = np.asarray(labels)
    b = x.shape[0]
    proj = spec.projection

    feats_b, cache = _forward_backbone(params, cfg, x)
    feats = _project(feats_b, proj)
    probs = classify(params.clf_w, params.clf_b, feats)
    parts = {"ce": loss_ce(probs, labels), "bsr": 0.0, "ent": 0.0}

    d_logits = probs.copy()
    d_logits[np.arange(b), labels] -= 1.0
    d_logits /= b
    g_clf_w = d_logits.T @ feats
    g_clf_b = d_logits.sum(axis=0)
    d_feats = d_logits @ params.clf_w
    if spec.bsr_weight > 0.0:
        parts["bsr"] = loss_bsr(feats)
        d_feats = d_feats + spec.bsr_weight * 2.0 * feats
    d_feats_b = d_feats @ proj if proj is not None else d_feats
    g_w, g_b = _backward_backbone(params, cfg, cache, d_feats_b)

    if spec.ent_weight > 0.0 and spec.query_inputs is not None:
        xq = _check_inputs(cfg, spec.query_inputs)
        bq = xq.shape[0]
        q_feats_b, q_cache = _forward_backbone(params, cfg, xq)
        q_feats = _project(q_feats_b, proj)
        q_probs = classify(params.clf_w, params.clf_b, q_feats)
        logp = np.log(np.maximum(q_probs, PROB_FLOOR))
        row_ent = -(q_probs * logp).sum(axis=1)
        parts["ent"] = float(row_ent.mean())
        d_qlogits = spec.ent_weight * (-(q_probs * (logp + row_ent[:, None])) / bq)
        g_clf_w += d_qlogits.T @ q_feats
        g_clf_b += d_qlogits.sum(axis=0)
        d_qfeats = d_qlogits @ params.clf_w
        d_qfeats_b = d_qfeats @ proj if proj is not None else d_qfeats
        gq_w, gq_b = _backward_backbone(params, cfg, q_cache, d_qfeats_b)
        for i in range(len(g_w)):
            g_w[i] += gq_w[i]
            g_b[i] += gq_b[i]

    parts["total"] = (
        parts["ce"] + spec.bsr_weight * parts["bsr"] + spec.ent_weight * parts["ent"]
    )
    return NetParams(g_w, g_b, g_clf_w, g_clf_b), parts


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptState:
    """SGD with momentum and additive L2 weight decay (decay skips biases)."""

    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    freeze_backbone: bool = False
    velocities: NetParams | None = None


def _step_array(p, g, v, lr, momentum, decay):
    v_new = momentum * v + g + decay * p
    return p - lr * v_new, v_new


def sgd_step(params: NetParams, grads: NetParams, opt: OptState):
    """One update: v <- momentum*v + g + decay*p, p <- p - lr*v.

    Returns (new params, new OptState); inputs are left untouched.
    """
    if opt.velocities is None:
        vel = NetParams(
            [np.zeros_like(w) for w in params.weights],
            [np.zeros_like(b) for b in params.biases],
            np.zeros_like(params.clf_w),
            np.zeros_like(params.clf_b),
        )
    else:
        vel = opt.velocities
    new_w, new_b, vel_w, vel_b = [], [], [], []
    for w, g, v in zip(params.weights, grads.weights, vel.weights):
        if opt.freeze_backbone:
            new_w.append(w.copy())
            vel_w.append(v.copy())
        else:
            p2, v2 = _step_array(w, g, v, opt.lr, opt.momentum, opt.weight_decay)
            new_w.append(p2)
            vel_w.append(v2)
    for b, g, v in zip(params.biases, grads.biases, vel.biases):
        if opt.freeze_backbone:
            new_b.append(b.copy())
            vel_b.append(v.copy())
        else:
            p2, v2 = _step_array(b, g, v, opt.lr, opt.momentum, 0.0)
            new_b.append(p2)
            vel_b.append(v2)
    cw, vwc = _step_array(
        params.clf_w, grads.clf_w, vel.clf_w, opt.lr, opt.momentum, opt.weight_decay
    )
    cb, vbc = _step_array(params.clf_b, grads.clf_b, vel.clf_b, opt.lr, opt.momentum, 0.0)
    new_params = NetParams(new_w, new_b, cw, cb)
    new_opt = replace(opt, velocities=NetParams(vel_w, vel_b, vwc, vbc))
    return new_params, new_opt


# ---------------------------------------------------------------------------
# checkpoint I/O (shared framing, also used by the ensemble container)


def write_framed(path, header: dict, arrays: list[np.ndarray]) -> None:
    """Write magic, version, JSON header, then little-endian f64 payloads."""
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_framed(path) -> tuple[dict, np.ndarray]:
    """Read the JSON header and the flat f64 payload of a framed file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"bad checkpoint magic {raw[:4]!r} at byte 0 in {path}")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version} at byte 4")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    if 12 + hlen > len(raw):
        raise DataError(f"truncated checkpoint header at byte {len(raw)}")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw, dtype="<f8", offset=12 + hlen).astype(np.float64)
    return header, payload


def _take(payload: np.ndarray, pos: int, shape) -> tuple[np.ndarray, int]:
    n = int(np.prod(shape))
    if pos + n > payload.size:
        raise DataError(f"truncated checkpoint payload at float {pos}")
    return payload[pos : pos + n].reshape(shape), pos + n


def params_to_arrays(params: NetParams) -> list[np.ndarray]:
    return [a for a, _ in params.arrays()]


def params_shapes(params: NetParams) -> list[list[int]]:
    return [list(a.shape) for a, _ in params.arrays()]


def params_from_payload(
    payload: np.ndarray, pos: int, shapes: list[list[int]]
) -> tuple[NetParams, int]:
    arrays = []
    for shape in shapes:
        arr, pos = _take(payload, pos, shape)
        arrays.append(arr.copy())
    weights = arrays[:-2:2]
    biases = arrays[1:-2:2]
    return NetParams(weights, biases, arrays[-2], arrays[-1]), pos


def backbone_cfg_to_dict(cfg: BackboneConfig) -> dict:
    return {
        "input_shape": list(cfg.input_shape),
        "hidden_widths": list(cfg.hidden_widths),
        "conv_channels": list(cfg.conv_channels),
        "feature_dim": cfg.feature_dim,
    }


def backbone_cfg_from_dict(d: dict) -> BackboneConfig:
    return BackboneConfig(
        input_shape=tuple(d["input_shape"]),
        hidden_widths=tuple(d["hidden_widths"]),
        conv_channels=tuple(d["conv_channels"]),
        feature_dim=int(d["feature_dim"]),
    )


def save_params(
    path, params: NetParams, cfg: BackboneConfig, n_classes: int, extra: dict | None = None
) -> None:
    """Checkpoint a single network."""
    header = {
        "kind": "network",
        "backbone": backbone_cfg_to_dict(cfg),
        "n_classes": n_classes,
        "shapes": params_shapes(params),
    }
    if extra:
        header["extra"] = extra
    write_framed(path, header, params_to_arrays(params))


def load_params(path) -> tuple[NetParams, BackboneConfig, int]:
    header, payload = read_framed(path)
    if header.get("kind") != "network":
        raise DataError(f"expected a network checkpoint, got {header.get('kind')!r}")
    cfg = backbone_cfg_from_dict(header["backbone"])
    params, pos = params_from_payload(payload, 0, header["shapes"])
    if pos != payload.size:
        raise DataError(f"checkpoint payload has {payload.size - pos} trailing floats")
    return params, cfg, int(header["n_classes"])
