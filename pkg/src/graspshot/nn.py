"""Dense tensor ops for small convolutional networks.

Everything runs in float64 on plain numpy arrays, channel-first
(``C x H x W`` for a single image, ``N x C x H x W`` batched). Forward
passes record what the backward passes need into an explicit trace, so
all functions here are pure: no layer object carries hidden state.

Two backward modes exist over the same trace:

* ``standard`` -- exact gradients, used for training;
* ``guided`` -- every ReLU passes gradient only where both its forward
  input and the incoming gradient are positive, used to attribute a
  single detector output to the features that produced it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigurationError, StaleTraceError

FLOAT = np.float64


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _batched(x):
    """View ``x`` as (N, C, H, W); returns (view, had_batch_dim)."""
    x = np.asarray(x, dtype=FLOAT)
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise ConfigurationError(f"expected 3- or 4-d input, got shape {x.shape}")


def conv_output_hw(h: int, w: int, kernel: int, stride: int, padding: int):
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigurationError(
            f"kernel {kernel} stride {stride} padding {padding} leaves no "
            f"output for {h}x{w} input")
    return ho, wo


def _im2col(xp, kernel: int, stride: int):
    """(N, C, Hp, Wp) padded input -> (N, C*k*k, Ho*Wo) patch matrix."""
    n, c, hp, wp = xp.shape
    ho = (hp - kernel) // stride + 1
    wo = (wp - kernel) // stride + 1
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, kernel, kernel, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    return view.reshape(n, c * kernel * kernel, ho * wo)


def _col2im(grad_cols, padded_shape, kernel: int, stride: int):
    """Scatter-add the im2col adjoint back onto the padded input."""
    n, c, hp, wp = padded_shape
    ho = (hp - kernel) // stride + 1
    wo = (wp - kernel) // stride + 1
    g = grad_cols.reshape(n, c, kernel, kernel, ho, wo)
    out = np.zeros(padded_shape, dtype=FLOAT)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g[:, :, i, j]
    return out


def _pad(x, padding: int):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _check_conv_shapes(x, weights, bias, stride, padding):
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ConfigurationError(
            f"weights must be (C_out, C_in, k, k), got {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ConfigurationError(
            f"input has {x.shape[1]} channels, weights expect {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ConfigurationError(
            f"bias shape {bias.shape} does not match {weights.shape[0]} output channels")
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigurationError(f"padding must be >= 0, got {padding}")


def conv2d_forward(x, weights, bias, stride: int = 1, padding: int = 0):
    """Cross-correlation with zero padding.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); output spatial size is
    floor((H + 2p - k)/s) + 1.
    """
    xb, batched = _batched(x)
    weights = np.asarray(weights, dtype=FLOAT)
    bias = np.asarray(bias, dtype=FLOAT)
    _check_conv_shapes(xb, weights, bias, stride, padding)
    c_out, c_in, k, _ = weights.shape
    ho, wo = conv_output_hw(xb.shape[2], xb.shape[3], k, stride, padding)
    cols = _im2col(_pad(xb, padding), k, stride)
    w_mat = weights.reshape(c_out, c_in * k * k)
    y = np.matmul(w_mat, cols) + bias[:, None]
    y = y.reshape(xb.shape[0], c_out, ho, wo)
    return y if batched else y[0]


def conv2d_backward(x, weights, stride: int, padding: int, grad_y, cols=None,
                    need_input_grad: bool = True, need_param_grads: bool = True):
    """Gradients of a conv2d output w.r.t. input, weights and bias.

    ``cols`` may pass the im2col matrix cached at forward time; it is
    recomputed otherwise. Returns (grad_x, grad_w, grad_b) with entries
    None when not requested.
    """
    xb, batched = _batched(x)
    gb, _ = _batched(grad_y)
    c_out, c_in, k, _ = weights.shape
    n = xb.shape[0]
    ho, wo = conv_output_hw(xb.shape[2], xb.shape[3], k, stride, padding)
    if gb.shape != (n, c_out, ho, wo):
        raise ConfigurationError(
            f"output gradient shape {gb.shape} does not match ({n}, {c_out}, {ho}, {wo})")
    g_mat = gb.reshape(n, c_out, ho * wo)
    w_mat = weights.reshape(c_out, c_in * k * k)

    grad_w = grad_b = grad_x = None
    if need_param_grads:
        if cols is None:
            cols = _im2col(_pad(xb, padding), k, stride)
        grad_w = np.matmul(g_mat, cols.transpose(0, 2, 1)).sum(axis=0)
        grad_w = grad_w.reshape(weights.shape)
        grad_b = gb.sum(axis=(0, 2, 3))
    if need_input_grad:
        grad_cols = np.matmul(w_mat.T, g_mat)
        hp, wp = xb.shape[2] + 2 * padding, xb.shape[3] + 2 * padding
        gx = _col2im(grad_cols, (n, c_in, hp, wp), k, stride)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        grad_x = gx if batched else gx[0]
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# relu
# ---------------------------------------------------------------------------

def relu_forward(x):
    """Elementwise max(0, x). The caller keeps ``x`` for backward passes."""
    return np.maximum(np.asarray(x, dtype=FLOAT), 0.0)


def relu_backward(forward_input, grad):
    """Standard ReLU gradient: pass where the forward input was positive."""
    forward_input = np.asarray(forward_input)
    grad = np.asarray(grad)
    if forward_input.shape != grad.shape:
        raise ConfigurationError(
            f"relu backward shape mismatch: {forward_input.shape} vs {grad.shape}")
    return np.where(forward_input > 0, grad, 0.0)


def guided_relu_backward(forward_input, incoming_gradient):
    """Guided rule: pass the gradient only where the forward input AND the
    incoming gradient are both positive; the result is everywhere >= 0."""
    f = np.asarray(forward_input, dtype=FLOAT)
    r = np.asarray(incoming_gradient, dtype=FLOAT)
    if f.shape != r.shape:
        raise ConfigurationError(
            f"guided backward shape mismatch: {f.shape} vs {r.shape}")
    return np.where((f > 0) & (r > 0), r, 0.0)


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

def max_pool_forward(x, window: int, stride: int):
    """Returns (pooled, argmax) where argmax holds the flat in-window index
    of each maximum (first index wins ties)."""
    xb, batched = _batched(x)
    n, c, h, w = xb.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigurationError(
            f"pool window {window} stride {stride} leaves no output for {h}x{w}")
    s0, s1, s2, s3 = xb.strides
    view = as_strided(
        xb,
        shape=(n, c, ho, wo, window, window),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
    )
    flat = view.reshape(n, c, ho, wo, window * window)
    argmax = flat.argmax(axis=-1)
    pooled = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    if not batched:
        pooled, argmax = pooled[0], argmax[0]
    return pooled, argmax


def max_pool_backward(input_shape, argmax, window: int, stride: int, grad_y):
    """Route each pooled gradient to its argmax position."""
    gb, batched = _batched(grad_y)
    if not batched:
        argmax = argmax[None]
        input_shape = (1,) + tuple(input_shape)
    n, c, h, w = input_shape
    ho, wo = gb.shape[2], gb.shape[3]
    rows = (argmax // window) + stride * np.arange(ho)[None, None, :, None]
    cols = (argmax % window) + stride * np.arange(wo)[None, None, None, :]
    flat = np.zeros(n * c * h * w, dtype=FLOAT)
    base = (np.arange(n)[:, None, None, None] * c
            + np.arange(c)[None, :, None, None]) * (h * w)
    np.add.at(flat, (base + rows * w + cols).ravel(), gb.ravel())
    gx = flat.reshape(input_shape)
    return gx if batched else gx[0]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter-block optimizer state."""
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, param, **hyper):
        z = np.zeros_like(np.asarray(param, dtype=FLOAT))
        return cls(first_moment=z.copy(), second_moment=z.copy(), **hyper)


def adam_step(param, grad, state: AdamState, name: str = "param"):
    """One Adam update with bias correction; mutates ``param`` and ``state``
    in place and returns them."""
    grad = np.asarray(grad, dtype=FLOAT)
    if grad.shape != param.shape:
        raise ConfigurationError(
            f"{name}: gradient shape {grad.shape} != parameter shape {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise ConfigurationError(f"{name}: non-finite gradient")
    state.step_count += 1
    t = state.step_count
    state.first_moment *= state.beta1
    state.first_moment += (1 - state.beta1) * grad
    state.second_moment *= state.beta2
    state.second_moment += (1 - state.beta2) * grad * grad
    m_hat = state.first_moment / (1 - state.beta1 ** t)
    v_hat = state.second_moment / (1 - state.beta2 ** t)
    param -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return param, state


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def he_conv_init(rng: np.random.Generator, c_out: int, c_in: int, kernel: int):
    """He-scaled weights and zero bias for a conv layer."""
    fan_in = c_in * kernel * kernel
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel))
    return w.astype(FLOAT), np.zeros(c_out, dtype=FLOAT)


# ---------------------------------------------------------------------------
# layer stacks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential stack; ``layer_id`` is unique per network."""
    kind: str                 # conv | relu | maxpool
    layer_id: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    window: int = 0           # maxpool only

    def to_dict(self):
        return {k: getattr(self, k) for k in (
            "kind", "layer_id", "in_channels", "out_channels",
            "kernel_size", "stride", "padding", "window")}


@dataclass
class StackTrace:
    """Everything a backward pass needs from one forward pass."""
    version: int
    input: np.ndarray
    output: np.ndarray
    caches: list = field(default_factory=list)   # one entry per spec

    def activations(self):
        """Map conv layer_id -> (pre_relu, post_relu) for convs followed
        by a ReLU in the stack."""
        out = {}
        for cache in self.caches:
            if cache.get("post_relu") is not None:
                out[cache["conv_id"]] = (cache["pre_relu"], cache["post_relu"])
        return out


class LayerStack:
    """A sequential conv/relu/maxpool network with explicit parameters.

    Parameters live in ``params`` keyed by conv layer_id; every mutation
    must go through ``bump_version`` so stale traces are detected.
    """

    def __init__(self, specs, params):
        ids = [s.layer_id for s in specs]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"duplicate layer ids in {ids}")
        self.specs = list(specs)
        self.params = params
        self.version = 0

    @classmethod
    def build(cls, specs, rng: np.random.Generator):
        params = {}
        for spec in specs:
            if spec.kind == "conv":
                w, b = he_conv_init(rng, spec.out_channels, spec.in_channels,
                                    spec.kernel_size)
                params[spec.layer_id] = {"w": w, "b": b}
        return cls(specs, params)

    def bump_version(self):
        self.version += 1

    @property
    def conv_ids(self):
        return [s.layer_id for s in self.specs if s.kind == "conv"]

    def num_params(self):
        return sum(p["w"].size + p["b"].size for p in self.params.values())

    def forward_trace(self, x, keep_cols: bool = False) -> StackTrace:
        """Run the stack, recording per-layer caches.

        ``keep_cols`` additionally caches the im2col matrices (worth it
        for training batches, wasteful for single-image inference).
        """
        x = np.asarray(x, dtype=FLOAT)
        trace = StackTrace(version=self.version, input=x, output=None)
        cur = x
        prev_conv = None
        for spec in self.specs:
            if spec.kind == "conv":
                p = self.params[spec.layer_id]
                xb, _ = _batched(cur)
                _check_conv_shapes(xb, p["w"], p["b"], spec.stride, spec.padding)
                cols = _im2col(_pad(xb, spec.padding), spec.kernel_size, spec.stride)
                ho, wo = conv_output_hw(xb.shape[2], xb.shape[3],
                                        spec.kernel_size, spec.stride, spec.padding)
                w_mat = p["w"].reshape(p["w"].shape[0], -1)
                y = (np.matmul(w_mat, cols) + p["b"][:, None]).reshape(
                    xb.shape[0], p["w"].shape[0], ho, wo)
                if cur.ndim == 3:
                    y = y[0]
                cache = {"kind": "conv", "input": cur,
                         "cols": cols if keep_cols else None}
                prev_conv = {"id": spec.layer_id, "pre": y}
                cur = y
            elif spec.kind == "relu":
                post = relu_forward(cur)
                cache = {"kind": "relu", "pre_relu": cur, "post_relu": post}
                if prev_conv is not None and prev_conv["pre"] is cur:
                    cache["conv_id"] = prev_conv["id"]
                cur = post
            elif spec.kind == "maxpool":
                pooled, argmax = max_pool_forward(cur, spec.window, spec.stride)
                cache = {"kind": "maxpool", "argmax": argmax,
                         "input_shape": cur.shape}
                cur = pooled
            else:
                raise ConfigurationError(f"unknown layer kind {spec.kind!r}")
            trace.caches.append(cache)
        trace.output = cur
        return trace

    def _check_trace(self, trace: StackTrace):
        if trace.version != self.version:
            raise StaleTraceError(
                f"trace recorded at version {trace.version}, "
                f"network is at {self.version}")

    def standard_backward(self, trace: StackTrace, output_gradient):
        """Exact gradients of a scalar seeded by ``output_gradient``.

        Returns (param_grads, input_gradient) where param_grads maps conv
        layer_id -> {"w": ..., "b": ...}.
        """
        self._check_trace(trace)
        grad = np.asarray(output_gradient, dtype=FLOAT)
        if grad.shape != trace.output.shape:
            raise ConfigurationError(
                f"output gradient shape {grad.shape} != output {trace.output.shape}")
        param_grads = {}
        for spec, cache in zip(reversed(self.specs), reversed(trace.caches)):
            if spec.kind == "conv":
                p = self.params[spec.layer_id]
                grad, gw, gb = conv2d_backward(
                    cache["input"], p["w"], spec.stride, spec.padding, grad,
                    cols=cache["cols"])
                param_grads[spec.layer_id] = {"w": gw, "b": gb}
            elif spec.kind == "relu":
                grad = relu_backward(cache["pre_relu"], grad)
            else:
                grad = max_pool_backward(cache["input_shape"], cache["argmax"],
                                         spec.window, spec.stride, grad)
        return param_grads, grad

    def guided_backward(self, trace: StackTrace, output_gradient):
        """Guided-rule backward pass.

        At each conv-feeding ReLU the incoming gradient is masked by the
        guided rule; the masked gradient is recorded for that conv layer
        before continuing downward. Max-pools reuse the forward argmax
        routing. Returns (refined_grads, input_gradient) with
        refined_grads mapping conv layer_id -> masked gradient R (same
        shape as the layer's activation map).
        """
        self._check_trace(trace)
        grad = np.asarray(output_gradient, dtype=FLOAT)
        if grad.shape != trace.output.shape:
            raise ConfigurationError(
                f"output gradient shape {grad.shape} != output {trace.output.shape}")
        refined = {}
        for spec, cache in zip(reversed(self.specs), reversed(trace.caches)):
            if spec.kind == "conv":
                p = self.params[spec.layer_id]
                grad, _, _ = conv2d_backward(
                    cache["input"], p["w"], spec.stride, spec.padding, grad,
                    need_param_grads=False)
            elif spec.kind == "relu":
                grad = guided_relu_backward(cache["pre_relu"], grad)
                if "conv_id" in cache:
                    refined[cache["conv_id"]] = grad
            else:
                grad = max_pool_backward(cache["input_shape"], cache["argmax"],
                                         spec.window, spec.stride, grad)
        return refined, grad
