"""Deterministic numpy-backed reverse-mode differentiation kernel.

Every operator the network architecture needs lives here as a function
taking and returning :class:`Tensor` nodes. Feature maps are always
3-D ``(batch, channels, length)`` arrays; vectors produced by pooling are
2-D ``(batch, channels)``. Operators are pure with respect to their
inputs, build the compute graph implicitly through parent references, and
use fixed loop/accumulation orders so that repeated runs on the same
machine are bit-identical.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BCE_CLAMP = 1e-7


class Tensor:
    """A node of the compute graph: an ndarray plus backward plumbing."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable parameter.

        ``self`` must hold a single scalar (the loss). Traversal follows
        reverse topological order, visiting every node exactly once; after
        accumulation, gradients of non-trainable parameter scalars are
        forced to exactly zero.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss node, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward_fn(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad += g
        for node in order:
            if isinstance(node, Parameter) and node.grad is not None and node.trainable is not None:
                node.grad[~node.trainable] = 0.0


def _toposort(root):
    """Post-order over the graph reachable from ``root`` (inputs first)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


class Parameter(Tensor):
    """A trainable leaf with per-scalar freezing and masked-view support.

    ``trainable`` is either None (every scalar trainable) or a boolean
    array; frozen scalars get their gradient zeroed after each backward
    pass and their value is never touched by the optimizers. ``owner``
    (present only when ``prunable``) records which task each scalar
    belongs to, 0 meaning free. ``view_mask`` is an optional float 0/1
    array installed by the continual-learning engine: when set, the value
    seen by the network is ``values * view_mask``.
    """

    __slots__ = ("name", "family", "prunable", "owner", "trainable", "view_mask",
                 "mask_scores", "mask_domain")

    def __init__(self, values, name="", family="exclusive", prunable=False):
        super().__init__(np.asarray(values), requires_grad=True)
        self.name = name
        self.family = family
        self.prunable = prunable
        self.owner = np.zeros(self.data.shape, dtype=np.uint8) if prunable else None
        self.trainable = None
        self.view_mask = None
        self.mask_scores = None
        self.mask_domain = None

    def node(self):
        """Graph node for this parameter, honoring any installed view mask.

        While a pick mask is being trained, the preserved weights enter the
        forward pass as constants gated by the straight-through bits of the
        score parameter; the free/own part keeps its value gradient.
        """
        if self.mask_scores is not None:
            base = mul_const(self, self.view_mask)
            bits = straight_through_positive(self.mask_scores)
            picked = mul_const(bits, self.data * self.mask_domain)
            return add(base, picked)
        if self.view_mask is None:
            return self
        return mul_const(self, self.view_mask)

    def zero_grad(self):
        self.grad = None


# ---------------------------------------------------------------------------
# shape helpers

def _require_featuremap(x, op):
    if x.data.ndim != 3:
        raise ShapeError(f"{op}: expected (batch, channels, length) input, got shape {x.data.shape}")


def _strided_windows(arr, k, stride):
    """View of shape (B, C, L_out, k) over a padded (B, C, P) array."""
    B, C, P = arr.shape
    L_out = (P - k) // stride + 1
    sB, sC, sP = arr.strides
    return np.lib.stride_tricks.as_strided(
        arr, shape=(B, C, L_out, k), strides=(sB, sC, sP * stride, sP), writeable=False
    )


# ---------------------------------------------------------------------------
# convolution operators

def conv1d(x, weight, bias, stride=1, padding=0):
    """Cross-correlation along the length axis.

    weight has shape (out_channels, in_channels, k); output length is
    floor((L + 2*padding - k)/stride) + 1.
    """
    _require_featuremap(x, "conv1d")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv1d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    B, C, L = x.data.shape
    outC, inC, k = weight.data.shape
    if inC != C:
        raise ShapeError(f"conv1d: input has {C} channels but kernel expects {inC}")
    L_out = (L + 2 * padding - k) // stride + 1
    if L_out < 1:
        raise ShapeError(f"conv1d: non-positive output length for L={L}, k={k}, stride={stride}, padding={padding}")

    if padding:
        xp = np.zeros((B, C, L + 2 * padding), dtype=x.data.dtype)
        xp[:, :, padding:padding + L] = x.data
    else:
        xp = x.data
    windows = _strided_windows(xp, k, stride)
    y = np.einsum("bclk,ock->bol", windows, weight.data, optimize=True)
    parents = [x, weight]
    if bias is not None:
        if bias.data.shape != (outC,):
            raise ShapeError(f"conv1d: bias shape {bias.data.shape} != ({outC},)")
        y += bias.data[None, :, None]
        parents.append(bias)

    def backward(go):
        gw = np.einsum("bclk,bol->ock", windows, go, optimize=True)
        gxp = np.zeros_like(xp)
        for j in range(k):
            stop = j + stride * (L_out - 1) + 1
            gxp[:, :, j:stop:stride] += np.einsum("bol,oc->bcl", go, weight.data[:, :, j], optimize=True)
        gx = gxp[:, :, padding:padding + L] if padding else gxp
        if bias is not None:
            return gx, gw, go.sum(axis=(0, 2))
        return gx, gw

    return Tensor(y, _parents=tuple(parents), _backward_fn=backward)


def conv_transpose1d(x, weight, bias, stride=1):
    """Transposed convolution: each input sample scatters a kernel copy.

    weight has shape (in_channels, out_channels, k); output length is
    (L - 1)*stride + k.
    """
    _require_featuremap(x, "conv_transpose1d")
    if stride < 1:
        raise ValueError(f"conv_transpose1d: stride must be >= 1, got {stride}")
    B, C, L = x.data.shape
    inC, outC, k = weight.data.shape
    if inC != C:
        raise ShapeError(f"conv_transpose1d: input has {C} channels but kernel expects {inC}")
    L_out = (L - 1) * stride + k

    y = np.zeros((B, outC, L_out), dtype=x.data.dtype)
    for j in range(k):
        stop = j + stride * (L - 1) + 1
        y[:, :, j:stop:stride] += np.einsum("bcl,co->bol", x.data, weight.data[:, :, j], optimize=True)
    parents = [x, weight]
    if bias is not None:
        if bias.data.shape != (outC,):
            raise ShapeError(f"conv_transpose1d: bias shape {bias.data.shape} != ({outC},)")
        y += bias.data[None, :, None]
        parents.append(bias)

    def backward(go):
        go_windows = _strided_windows(go, k, stride)  # (B, outC, L, k)
        gx = np.einsum("bolk,cok->bcl", go_windows, weight.data, optimize=True)
        gw = np.einsum("bcl,bolk->cok", x.data, go_windows, optimize=True)
        if bias is not None:
            return gx, gw, go.sum(axis=(0, 2))
        return gx, gw

    return Tensor(y, _parents=tuple(parents), _backward_fn=backward)


# ---------------------------------------------------------------------------
# resampling operators

_RESAMPLE_CACHE: dict = {}


def _interp_matrix(L, target, dtype):
    """Endpoint-aligned linear interpolation matrix of shape (target, L)."""
    key = ("interp", L, target, np.dtype(dtype).str)
    M = _RESAMPLE_CACHE.get(key)
    if M is None:
        M = np.zeros((target, L), dtype=dtype)
        if L == 1:
            M[:, 0] = 1.0
        elif target == 1:
            M[0, 0] = 1.0
        else:
            pos = np.arange(target) * (L - 1) / (target - 1)
            lo = np.floor(pos).astype(np.int64)
            lo = np.minimum(lo, L - 1)
            hi = np.minimum(lo + 1, L - 1)
            frac = (pos - lo).astype(dtype)
            rows = np.arange(target)
            np.add.at(M, (rows, lo), (1.0 - frac).astype(dtype))
            np.add.at(M, (rows, hi), frac)
        _RESAMPLE_CACHE[key] = M
    return M


def _pool_matrix(L, out_len, dtype):
    """Adaptive average pooling matrix; bin i spans [floor(i*L/out), floor((i+1)*L/out))."""
    key = ("pool", L, out_len, np.dtype(dtype).str)
    M = _RESAMPLE_CACHE.get(key)
    if M is None:
        M = np.zeros((out_len, L), dtype=dtype)
        for i in range(out_len):
            s = (i * L) // out_len
            e = ((i + 1) * L) // out_len
            M[i, s:e] = 1.0 / (e - s)
        _RESAMPLE_CACHE[key] = M
    return M


def _apply_length_matrix(x, M):
    y = np.einsum("bcl,tl->bct", x.data, M, optimize=True)

    def backward(go):
        return (np.einsum("bct,tl->bcl", go, M, optimize=True),)

    return Tensor(y, _parents=(x,), _backward_fn=backward)


def linear_interpolate(x, target_len):
    """Per-channel linear interpolation with endpoints aligned."""
    _require_featuremap(x, "linear_interpolate")
    if target_len < 1:
        raise ValueError(f"linear_interpolate: target_len must be >= 1, got {target_len}")
    L = x.data.shape[2]
    if target_len == L:
        return _apply_length_matrix(x, np.eye(L, dtype=x.data.dtype))
    return _apply_length_matrix(x, _interp_matrix(L, target_len, x.data.dtype))


def adaptive_avg_pool(x, out_len):
    """Mean over uneven bins per channel; identity when out_len == length."""
    _require_featuremap(x, "adaptive_avg_pool")
    L = x.data.shape[2]
    if out_len < 1:
        raise ValueError(f"adaptive_avg_pool: out_len must be >= 1, got {out_len}")
    if out_len > L:
        raise ShapeError(f"adaptive_avg_pool: out_len {out_len} exceeds input length {L}")
    return _apply_length_matrix(x, _pool_matrix(L, out_len, x.data.dtype))


def global_avg_pool(x):
    """Mean over the length axis, (B, C, L) -> (B, C)."""
    _require_featuremap(x, "global_avg_pool")
    L = x.data.shape[2]
    y = x.data.mean(axis=2)

    def backward(go):
        return (np.repeat(go[:, :, None], L, axis=2) / L,)

    return Tensor(y, _parents=(x,), _backward_fn=backward)


# ---------------------------------------------------------------------------
# normalization

def batchnorm1d(x, gamma, beta, mean, var, batch_stats, eps=BN_EPS):
    """Channel-wise normalization.

    ``mean``/``var`` are plain arrays: the caller passes batch moments with
    ``batch_stats=True`` during training (backward then differentiates
    through the moments) or stored running moments with
    ``batch_stats=False`` for evaluation.
    """
    _require_featuremap(x, "batchnorm1d")
    B, C, L = x.data.shape
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError(f"batchnorm1d: affine shapes {gamma.data.shape}/{beta.data.shape} != ({C},)")
    if mean.shape != (C,) or var.shape != (C,):
        raise ShapeError(f"batchnorm1d: stats shapes {mean.shape}/{var.shape} != ({C},)")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
    y = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(go):
        g_gamma = (go * xhat).sum(axis=(0, 2))
        g_beta = go.sum(axis=(0, 2))
        g_xhat = go * gamma.data[None, :, None]
        if not batch_stats:
            gx = g_xhat * inv_std[None, :, None]
            return gx, g_gamma, g_beta
        n = B * L
        xc = x.data - mean[None, :, None]
        g_var = (g_xhat * xc).sum(axis=(0, 2)) * (-0.5) * inv_std ** 3
        g_mean = -(g_xhat.sum(axis=(0, 2))) * inv_std + g_var * (-2.0 / n) * xc.sum(axis=(0, 2))
        gx = (
            g_xhat * inv_std[None, :, None]
            + (2.0 / n) * g_var[None, :, None] * xc
            + g_mean[None, :, None] / n
        )
        return gx, g_gamma, g_beta

    return Tensor(y, _parents=(x, gamma, beta), _backward_fn=backward)


# ---------------------------------------------------------------------------
# elementwise operators

def relu(x):
    y = np.maximum(x.data, 0)

    def backward(go):
        return (go * (x.data > 0),)

    return Tensor(y, _parents=(x,), _backward_fn=backward)


def sigmoid(x):
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)

    def backward(go):
        return (go * y * (1.0 - y),)

    return Tensor(y, _parents=(x,), _backward_fn=backward)


def add(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    return Tensor(a.data + b.data, _parents=(a, b), _backward_fn=lambda go: (go, go))


def mul_const(x, c):
    """Multiply by a constant array of the same shape (or a scalar)."""
    c = np.asarray(c, dtype=x.data.dtype)
    if c.ndim != 0 and c.shape != x.data.shape:
        raise ShapeError(f"mul_const: constant shape {c.shape} != {x.data.shape}")
    return Tensor(x.data * c, _parents=(x,), _backward_fn=lambda go: (go * c,))


def channel_scale(x, s):
    """Scale (B, C, L) feature map by per-channel weights (B, C)."""
    _require_featuremap(x, "channel_scale")
    if s.data.shape != x.data.shape[:2]:
        raise ShapeError(f"channel_scale: weights shape {s.data.shape} != {x.data.shape[:2]}")
    y = x.data * s.data[:, :, None]

    def backward(go):
        return go * s.data[:, :, None], (go * x.data).sum(axis=2)

    return Tensor(y, _parents=(x, s), _backward_fn=backward)


def concat_channels(xs):
    """Concatenate feature maps along the channel axis."""
    B, _, L = xs[0].data.shape
    for x in xs:
        _require_featuremap(x, "concat_channels")
        if x.data.shape[0] != B or x.data.shape[2] != L:
            raise ShapeError(
                f"concat_channels: batch/length mismatch {x.data.shape} vs ({B}, *, {L})"
            )
    sizes = [x.data.shape[1] for x in xs]
    y = np.concatenate([x.data for x in xs], axis=1)
    offsets = np.cumsum([0] + sizes)

    def backward(go):
        return tuple(go[:, offsets[i]:offsets[i + 1], :] for i in range(len(xs)))

    return Tensor(y, _parents=tuple(xs), _backward_fn=backward)


def slice_length(x, target_len):
    """Truncate the length axis to ``target_len`` (backward zero-pads)."""
    _require_featuremap(x, "slice_length")
    L = x.data.shape[2]
    if target_len > L:
        raise ShapeError(f"slice_length: target {target_len} exceeds length {L}")
    if target_len == L:
        return Tensor(x.data, _parents=(x,), _backward_fn=lambda go: (go,))
    y = x.data[:, :, :target_len]

    def backward(go):
        g = np.zeros_like(x.data)
        g[:, :, :target_len] = go
        return (g,)

    return Tensor(y, _parents=(x,), _backward_fn=backward)


def linear(x, weight, bias):
    """Affine map on (B, F) inputs; weight has shape (out, F)."""
    if x.data.ndim != 2:
        raise ShapeError(f"linear: expected (batch, features) input, got {x.data.shape}")
    out, F = weight.data.shape
    if x.data.shape[1] != F:
        raise ShapeError(f"linear: input has {x.data.shape[1]} features but weight expects {F}")
    y = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        if bias.data.shape != (out,):
            raise ShapeError(f"linear: bias shape {bias.data.shape} != ({out},)")
        y = y + bias.data[None, :]
        parents.append(bias)

    def backward(go):
        gx = go @ weight.data
        gw = go.T @ x.data
        if bias is not None:
            return gx, gw, go.sum(axis=0)
        return gx, gw

    return Tensor(y, _parents=tuple(parents), _backward_fn=backward)


def straight_through_positive(scores):
    """Hard 0/1 gate ``scores > 0`` whose backward is the identity."""
    y = (scores.data > 0).astype(scores.data.dtype)
    return Tensor(y, _parents=(scores,), _backward_fn=lambda go: (go,))


# ---------------------------------------------------------------------------
# loss

def bce_loss(probs, targets):
    """Mean binary cross-entropy on probabilities (already sigmoided).

    Probabilities are clamped to [1e-7, 1 - 1e-7] for stability; the
    gradient through the clamp is zero outside that range.
    """
    t = np.asarray(targets, dtype=probs.data.dtype)
    if t.shape != probs.data.shape:
        raise ShapeError(f"bce_loss: targets shape {t.shape} != probs shape {probs.data.shape}")
    lo, hi = BCE_CLAMP, 1.0 - BCE_CLAMP
    p = np.clip(probs.data, lo, hi)
    n = p.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum() / n

    def backward(go):
        inside = (probs.data > lo) & (probs.data < hi)
        g = (-t / p + (1.0 - t) / (1.0 - p)) / n
        return (go * g * inside,)

    return Tensor(np.asarray(loss, dtype=probs.data.dtype), _parents=(probs,), _backward_fn=backward)
