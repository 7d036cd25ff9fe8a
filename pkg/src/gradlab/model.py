"""Desk-scale CTC sequence model with hand-written reverse-mode gradients.

The network is a stack of per-frame dense layers. When ``recurrent_width`` is
set, a single bidirectional tanh recurrent layer is inserted in front of the
final dense layer. Hidden activations (every layer except the last) can be
dropped out with per-frame i.i.d. masks.

Canonical parameter order, used by :meth:`ParamVector.flatten`, the gradient
views and the checkpoint files:

* layers in network order;
* a dense layer contributes ``W`` (in, out) then ``b`` (out,);
* the recurrent layer contributes ``Wx_fwd, Wh_fwd, Wx_bwd, Wh_bwd`` then
  ``b_fwd, b_bwd``;
* each array is flattened row-major.

Everything accepts a leading batch axis internally (``(K, T, d)`` inputs) so
that many candidate inputs can share one pass through the network.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ctc import ctc_loss_grad_batch
from .errors import ConfigError, ShapeMismatch

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    layer_sizes: tuple[int, ...]
    alphabet_size: int
    activation: str = "relu"
    recurrent_width: Optional[int] = None
    match_layers: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(w) for w in self.layer_sizes))
        if self.match_layers is not None:
            object.__setattr__(self, "match_layers", tuple(sorted(set(int(i) for i in self.match_layers))))
        if self.input_dim < 1 or not self.layer_sizes:
            raise ConfigError("model needs input_dim >= 1 and at least one layer")
        if self.layer_sizes[-1] != self.alphabet_size + 1:
            raise ConfigError(
                f"final layer width {self.layer_sizes[-1]} must equal alphabet_size + 1 = {self.alphabet_size + 1}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.match_layers is not None:
            if not self.match_layers:
                raise ConfigError("match_layers must be nonempty")
            for i in self.match_layers:
                if not 0 <= i < self.num_layers:
                    raise ConfigError(f"match layer {i} out of range for {self.num_layers} layers")

    @property
    def num_classes(self) -> int:
        return self.alphabet_size + 1

    @property
    def layer_specs(self) -> list[tuple[str, int, int]]:
        """``(kind, fan_in, width)`` per parameter layer."""
        specs = []
        fan_in = self.input_dim
        dense = list(self.layer_sizes)
        for width in dense[:-1]:
            specs.append(("dense", fan_in, width))
            fan_in = width
        if self.recurrent_width:
            specs.append(("birnn", fan_in, self.recurrent_width))
            fan_in = 2 * self.recurrent_width
        specs.append(("dense", fan_in, dense[-1]))
        return specs

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) + (1 if self.recurrent_width else 0)

    @property
    def matched(self) -> tuple[int, ...]:
        if self.match_layers is None:
            return (self.num_layers - 1,)
        return self.match_layers

    def hidden_widths(self) -> list[int]:
        """Output widths of the layers that dropout applies to."""
        widths = []
        for kind, _, width in self.layer_specs[:-1]:
            widths.append(2 * width if kind == "birnn" else width)
        return widths

    def param_shapes(self) -> list[list[tuple[int, ...]]]:
        shapes = []
        for kind, fan_in, width in self.layer_specs:
            if kind == "dense":
                shapes.append([(fan_in, width), (width,)])
            else:
                shapes.append([(fan_in, width), (width, width), (fan_in, width), (width, width), (width,), (width,)])
        return shapes

    def layer_sizes_flat(self) -> list[int]:
        return [sum(int(np.prod(s)) for s in layer) for layer in self.param_shapes()]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "layer_sizes": list(self.layer_sizes),
            "alphabet_size": self.alphabet_size,
            "activation": self.activation,
            "recurrent_width": self.recurrent_width,
            "match_layers": None if self.match_layers is None else list(self.match_layers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        ml = d.get("match_layers")
        return cls(
            input_dim=int(d["input_dim"]),
            layer_sizes=tuple(d["layer_sizes"]),
            alphabet_size=int(d["alphabet_size"]),
            activation=d.get("activation", "relu"),
            recurrent_width=d.get("recurrent_width"),
            match_layers=None if ml is None else tuple(ml),
        )


@dataclass
class ParamVector:
    config: ModelConfig
    layers: list[list[np.ndarray]]

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for layer in self.layers for a in layer])

    @classmethod
    def unflatten(cls, config: ModelConfig, flat: np.ndarray) -> "ParamVector":
        flat = np.asarray(flat, dtype=np.float64)
        total = sum(config.layer_sizes_flat())
        if flat.shape != (total,):
            raise ShapeMismatch(f"expected flat vector of length {total}, got {flat.shape}")
        layers = []
        pos = 0
        for shapes in config.param_shapes():
            arrays = []
            for shape in shapes:
                n = int(np.prod(shape))
                arrays.append(flat[pos:pos + n].reshape(shape).copy())
                pos += n
            layers.append(arrays)
        return cls(config, layers)

    def copy(self) -> "ParamVector":
        return ParamVector(self.config, [[a.copy() for a in layer] for layer in self.layers])

    @property
    def size(self) -> int:
        return sum(a.size for layer in self.layers for a in layer)


def layer_offsets(config: ModelConfig) -> list[tuple[int, int]]:
    """(start, stop) of each layer within the flat parameter vector."""
    out = []
    pos = 0
    for n in config.layer_sizes_flat():
        out.append((pos, pos + n))
        pos += n
    return out


def view_of(full: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Restrict a flat full-parameter vector (or a stack of them) to the matched layers."""
    offsets = layer_offsets(config)
    parts = [full[..., offsets[i][0]:offsets[i][1]] for i in config.matched]
    return np.concatenate(parts, axis=-1)


@dataclass
class GradientView:
    """Gradient restricted to the matched layers, plus the all-layer norm."""

    flat: np.ndarray
    full_norm: float
    full: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass(frozen=True)
class DropoutSpec:
    rate: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.rate}")


def dropout_masks(spec: Optional[DropoutSpec], T: int, config: ModelConfig) -> Optional[list[np.ndarray]]:
    """Scaled keep-masks, one (T, width) array per hidden layer, drawn i.i.d. per frame and unit."""
    if spec is None or spec.rate == 0.0:
        return None
    rng = np.random.default_rng(spec.seed)
    scale = 1.0 / (1.0 - spec.rate)
    return [(rng.random((T, w)) >= spec.rate) * scale for w in config.hidden_widths()]


def init_model(config: ModelConfig, seed: int) -> ParamVector:
    rng = np.random.default_rng(seed)
    layers = []
    for (kind, fan_in, width), shapes in zip(config.layer_specs, config.param_shapes()):
        arrays = []
        for shape in shapes:
            if len(shape) == 1:
                arrays.append(np.zeros(shape))
            else:
                arrays.append(rng.standard_normal(shape) / np.sqrt(shape[0]))
        layers.append(arrays)
    return ParamVector(config, layers)


def _activate(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _birnn_forward(x, Wxf, Whf, Wxb, Whb, bf, bb):
    K, T, _ = x.shape
    r = Whf.shape[0]
    hf = np.zeros((K, T, r))
    hb = np.zeros((K, T, r))
    xf = x @ Wxf + bf
    xb = x @ Wxb + bb
    h = np.zeros((K, r))
    for t in range(T):
        h = np.tanh(xf[:, t] + h @ Whf)
        hf[:, t] = h
    h = np.zeros((K, r))
    for t in range(T - 1, -1, -1):
        h = np.tanh(xb[:, t] + h @ Whb)
        hb[:, t] = h
    return hf, hb


def _birnn_backward(x, hf, hb, dout, Wxf, Whf, Wxb, Whb):
    K, T, _ = x.shape
    r = Whf.shape[0]
    dzf = np.zeros((K, T, r))
    dzb = np.zeros((K, T, r))
    carry = np.zeros((K, r))
    for t in range(T - 1, -1, -1):
        dz = (dout[:, t, :r] + carry) * (1.0 - hf[:, t] ** 2)
        dzf[:, t] = dz
        carry = dz @ Whf.T
    carry = np.zeros((K, r))
    for t in range(T):
        dz = (dout[:, t, r:] + carry) * (1.0 - hb[:, t] ** 2)
        dzb[:, t] = dz
        carry = dz @ Whb.T
    dWxf = np.einsum("kti,ktr->kir", x, dzf)
    dWxb = np.einsum("kti,ktr->kir", x, dzb)
    dWhf = np.einsum("ktr,kts->krs", hf[:, :-1], dzf[:, 1:])
    dWhb = np.einsum("ktr,kts->krs", hb[:, 1:], dzb[:, :-1])
    dx = dzf @ Wxf.T + dzb @ Wxb.T
    return [dWxf, dWhf, dWxb, dWhb, dzf.sum(axis=1), dzb.sum(axis=1)], dx


def forward_batch(params: ParamVector, x: np.ndarray, masks=None):
    """Logits for a (K, T, d) stack plus the cache needed by :func:`backward_batch`."""
    cfg = params.config
    if x.ndim != 3 or x.shape[2] != cfg.input_dim:
        raise ShapeMismatch(f"expected (K, T, {cfg.input_dim}) input, got {x.shape}")
    specs = cfg.layer_specs
    cache = []
    a = x
    for i, ((kind, _, _), arrays) in enumerate(zip(specs, params.layers)):
        last = i == len(specs) - 1
        if kind == "dense":
            W, b = arrays
            z = a @ W + b
            if last:
                cache.append((a, None, None))
                return z, cache
            h = _activate(z, cfg.activation)
            extra = None
        else:
            hf, hb = _birnn_forward(a, *arrays)
            h = np.concatenate([hf, hb], axis=2)
            extra = (hf, hb)
        mask = None if masks is None else masks[i]
        cache.append((a, h, (extra, mask)))
        a = h if mask is None else h * mask
    raise AssertionError("unreachable")


def backward_batch(params: ParamVector, cache, dlogits: np.ndarray, lowest: int = 0):
    """Per-layer parameter gradients, each with a leading batch axis.

    Layers below ``lowest`` are skipped and reported as ``None``.
    """
    cfg = params.config
    specs = cfg.layer_specs
    n = len(specs)
    grads: list = [None] * n
    d_out = dlogits
    for i in range(n - 1, lowest - 1, -1):
        kind = specs[i][0]
        arrays = params.layers[i]
        if i == n - 1:
            a = cache[i][0]
            dz = d_out
        else:
            a, h, (extra, mask) = cache[i]
            dh = d_out if mask is None else d_out * mask
            if kind == "dense":
                if cfg.activation == "relu":
                    dz = dh * (h > 0)
                else:
                    dz = dh * (1.0 - h ** 2)
        if kind == "dense":
            W = arrays[0]
            grads[i] = [np.swapaxes(a, 1, 2) @ dz, dz.sum(axis=1)]
            if i > lowest:
                d_out = dz @ W.T
        else:
            hf, hb = extra
            grads[i], d_out = _birnn_backward(a, hf, hb, dh, *arrays[:4])
    return grads


def _flatten_grads(grads, layers: Sequence[int]) -> np.ndarray:
    parts = []
    for i in layers:
        for g in grads[i]:
            parts.append(g.reshape(g.shape[0], -1))
    return np.concatenate(parts, axis=1)


def batch_loss_and_view(params: ParamVector, xs: np.ndarray, y: Sequence[int], masks=None):
    """CTC losses (K,) and matched-layer gradient views (K, P) for a stack of inputs.

    Backpropagation stops at the lowest matched layer.
    """
    logits, cache = forward_batch(params, xs, masks)
    loss, dlogits = ctc_loss_grad_batch(logits, y)
    matched = params.config.matched
    grads = backward_batch(params, cache, dlogits, lowest=min(matched))
    return loss, _flatten_grads(grads, matched)


def batch_loss_and_full(params: ParamVector, xs: np.ndarray, y: Sequence[int], masks=None):
    """CTC losses (K,) and full flat parameter gradients (K, N)."""
    logits, cache = forward_batch(params, xs, masks)
    loss, dlogits = ctc_loss_grad_batch(logits, y)
    grads = backward_batch(params, cache, dlogits, lowest=0)
    return loss, _flatten_grads(grads, range(len(grads)))


def _as_single(x: np.ndarray, config: ModelConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.input_dim or x.shape[0] < 1:
        raise ShapeMismatch(f"expected (T, {config.input_dim}) features, got {x.shape}")
    return x


def forward(params: ParamVector, x: np.ndarray, dropout: Optional[DropoutSpec] = None) -> np.ndarray:
    x = _as_single(x, params.config)
    masks = dropout_masks(dropout, x.shape[0], params.config)
    logits, _ = forward_batch(params, x[None], masks)
    return logits[0]


def loss_and_grad(params: ParamVector, x: np.ndarray, y: Sequence[int],
                  dropout: Optional[DropoutSpec] = None) -> tuple[float, GradientView]:
    x = _as_single(x, params.config)
    masks = dropout_masks(dropout, x.shape[0], params.config)
    loss, full = batch_loss_and_full(params, x[None], y, masks)
    full = full[0]
    return float(loss[0]), GradientView(
        flat=view_of(full, params.config),
        full_norm=float(np.linalg.norm(full)),
        full=full,
    )


def sgd_step(params: ParamVector, grad: np.ndarray, lr: float) -> ParamVector:
    """Return ``params - lr * grad`` for a flat full-parameter gradient."""
    grad = np.asarray(grad, dtype=np.float64)
    flat = params.flatten()
    if grad.shape != flat.shape:
        raise ShapeMismatch(f"gradient shape {grad.shape} does not match parameters {flat.shape}")
    return ParamVector.unflatten(params.config, flat - lr * grad)
