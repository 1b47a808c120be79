"""Minimal reverse-mode automatic differentiation engine on numpy arrays.

Activations use NCHW layout. The graph is rebuilt on every forward pass
(define-by-run): each op returns a new :class:`Tensor` holding the forward
value, references to its parents, and a closure that maps the output
gradient to parent gradients. ``backward(loss)`` walks the graph once in
reverse topological order.

Precision policy: values are stored in the dtype of the inputs (float32 for
production networks), while statistical reductions (batch-norm moments,
losses, pooling means) accumulate in float64 before narrowing back.
"""

from __future__ import annotations

import numpy as np

from .errors import EngineError

BN_EPS = 1e-5


class Tensor:
    """One node in the computation graph.

    ``data`` is the forward value, ``grad`` is filled in by ``backward``
    and has the same shape as ``data``. ``capture`` marks nodes whose
    activation and gradient a caller intends to read after backward
    (probe sites); the engine keeps all intermediates alive either way.
    """

    __slots__ = ("data", "grad", "parents", "capture", "_vjp", "_backward_done")

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = tuple(parents)
        self.capture = False
        self._vjp = vjp
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Leaf tensor with a role tag; persists across forward passes."""

    CONV_WEIGHT = "conv_weight"
    BN_SCALE = "bn_scale"
    BN_SHIFT = "bn_shift"
    LINEAR_WEIGHT = "linear_weight"
    LINEAR_BIAS = "linear_bias"
    ROLES = (CONV_WEIGHT, BN_SCALE, BN_SHIFT, LINEAR_WEIGHT, LINEAR_BIAS)

    __slots__ = ("role", "name")

    def __init__(self, data, role, name=""):
        if role not in self.ROLES:
            raise EngineError(f"unknown parameter role {role!r}")
        super().__init__(data)
        self.role = role
        self.name = name

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name or self.role}, shape={self.data.shape})"


def _accumulate(node, g):
    # Never accumulate in place: a vjp may hand the same buffer to two
    # parents (e.g. add(x, x)), and a parent's grad may alias a child's.
    if node.grad is None:
        node.grad = g
    else:
        node.grad = node.grad + g


def _topo_order(root):
    """Iterative post-order DFS; parents precede children in the result."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate gradients for every ancestor of ``loss``.

    ``loss`` must be scalar. Calling backward twice on the same node
    without a fresh forward pass is an error.
    """
    if loss.data.shape != ():
        raise EngineError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._backward_done:
        raise EngineError("backward already ran on this loss; run a new forward pass")
    loss._backward_done = True

    order = _topo_order(loss)
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node._vjp(node.grad)):
            if g is not None:
                _accumulate(parent, g)


def kaiming_init(shape, fan_in, rng, dtype=np.float32):
    """Gaussian draw with std sqrt(2/fan_in); deterministic per generator state."""
    if fan_in < 1:
        raise EngineError(f"fan_in must be >= 1, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def _im2col(xp, k, stride, out_h, out_w):
    """Gather k*k patches: (N,C,Hp,Wp) -> (N,C,k,k,out_h,out_w)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, out_h, out_w), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + stride * out_h:stride,
                                    kj:kj + stride * out_w:stride]
    return cols


def conv2d(x, weight, stride=1, padding=None, groups=1):
    """Grouped 2D convolution, no bias.

    x: (N, Cin, H, W); weight: (Cout, Cin/groups, k, k).
    Output group i reads only input group i. Differentiable w.r.t. both.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise EngineError(f"conv2d expects 4-d input/weight, got {xd.shape} and {wd.shape}")
    n, cin, h, w = xd.shape
    cout, cin_g, k, k2 = wd.shape
    if k != k2:
        raise EngineError(f"conv2d kernel must be square, got {k}x{k2}")
    if groups < 1 or cin % groups != 0 or cout % groups != 0:
        raise EngineError(f"groups={groups} must divide in channels {cin} and out channels {cout}")
    if cin_g != cin // groups:
        raise EngineError(f"weight expects {cin_g * groups} input channels, input has {cin}")
    if padding is None:
        padding = (k - 1) // 2
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise EngineError(f"conv2d output would be empty for input {xd.shape}, k={k}, stride={stride}")

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    cols = _im2col(xp, k, stride, out_h, out_w)
    # (groups, N*out_h*out_w, cin_g*k*k) @ (groups, cin_g*k*k, cout_g)
    cout_g = cout // groups
    lhs = (cols.reshape(n, groups, cin_g * k * k, out_h * out_w)
           .transpose(1, 0, 3, 2)
           .reshape(groups, n * out_h * out_w, cin_g * k * k))
    rhs = wd.reshape(groups, cout_g, cin_g * k * k).transpose(0, 2, 1)
    out = lhs @ rhs
    out = (out.reshape(groups, n, out_h, out_w, cout_g)
           .transpose(1, 0, 4, 2, 3)
           .reshape(n, cout, out_h, out_w))

    def vjp(dout):
        dflat = (dout.reshape(n, groups, cout_g, out_h * out_w)
                 .transpose(1, 0, 3, 2)
                 .reshape(groups, n * out_h * out_w, cout_g))
        dw = (np.matmul(lhs.transpose(0, 2, 1), dflat)
              .transpose(0, 2, 1)
              .reshape(cout, cin_g, k, k))
        dcols = (np.matmul(dflat, rhs.transpose(0, 2, 1))
                 .reshape(groups, n, out_h, out_w, cin_g * k * k)
                 .transpose(1, 0, 4, 2, 3)
                 .reshape(n, cin, k, k, out_h, out_w))
        dxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki:ki + stride * out_h:stride,
                    kj:kj + stride * out_w:stride] += dcols[:, :, ki, kj]
        if padding:
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
        else:
            dx = dxp
        return dx, dw

    return Tensor(out, (x, weight), vjp)


def batchnorm2d(x, scale, shift, eps=BN_EPS):
    """Batch-statistics normalization over (N, H, W) per channel.

    Always uses the current minibatch's moments (no running statistics);
    zero-variance channels are handled by the eps floor.
    """
    xd = x.data
    if xd.ndim != 4:
        raise EngineError(f"batchnorm2d expects NCHW input, got shape {xd.shape}")
    n, c, h, w = xd.shape
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise EngineError(f"scale/shift must have shape ({c},), got "
                          f"{scale.data.shape} and {shift.data.shape}")
    m = n * h * w
    if m < 2:
        raise EngineError(f"batchnorm2d needs at least 2 values per channel, got {m}")

    x64 = xd.astype(np.float64)
    mean = x64.mean(axis=(0, 2, 3))
    var = x64.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = (scale.data.astype(np.float64)[None, :, None, None] * xhat
           + shift.data.astype(np.float64)[None, :, None, None])

    def vjp(dout):
        d64 = dout.astype(np.float64)
        dxhat = d64 * scale.data.astype(np.float64)[None, :, None, None]
        # standard batch-norm backward, folded over (N, H, W)
        sum_dxhat = dxhat.sum(axis=(0, 2, 3))
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
        dx = (inv_std[None, :, None, None] / m) * (
            m * dxhat
            - sum_dxhat[None, :, None, None]
            - xhat * sum_dxhat_xhat[None, :, None, None]
        )
        dscale = (d64 * xhat).sum(axis=(0, 2, 3))
        dshift = d64.sum(axis=(0, 2, 3))
        return (dx.astype(xd.dtype), dscale.astype(scale.data.dtype),
                dshift.astype(shift.data.dtype))

    return Tensor(out.astype(xd.dtype), (x, scale, shift), vjp)


def relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, 0)

    def vjp(dout):
        return (np.where(mask, dout, 0),)

    return Tensor(out, (x,), vjp)


def add(x, y):
    """Elementwise same-shape addition (residual joins, loss terms)."""
    if x.data.shape != y.data.shape:
        raise EngineError(f"add requires equal shapes, got {x.data.shape} and {y.data.shape}")

    def vjp(dout):
        return dout, dout

    return Tensor(x.data + y.data, (x, y), vjp)


def mul(x, y):
    """Elementwise same-shape product."""
    if x.data.shape != y.data.shape:
        raise EngineError(f"mul requires equal shapes, got {x.data.shape} and {y.data.shape}")

    def vjp(dout):
        return dout * y.data, dout * x.data

    return Tensor(x.data * y.data, (x, y), vjp)


def scale(x, c):
    """Multiply by a python constant."""
    c = float(c)

    def vjp(dout):
        return (dout * c,)

    return Tensor(x.data * c, (x,), vjp)


def weighted_sum(x, weights):
    """Scalar projection sum(x * weights) against a plain array."""
    w = np.asarray(weights)
    if w.shape != x.data.shape:
        raise EngineError(f"weights shape {w.shape} does not match input {x.data.shape}")
    out = np.float64((x.data.astype(np.float64) * w).sum())

    def vjp(dout):
        return ((float(dout) * w).astype(x.data.dtype),)

    return Tensor(out, (x,), vjp)


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C) spatial mean."""
    xd = x.data
    if xd.ndim != 4:
        raise EngineError(f"global_avg_pool expects NCHW input, got shape {xd.shape}")
    n, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3), dtype=np.float64).astype(xd.dtype)

    def vjp(dout):
        dx = np.broadcast_to(dout[:, :, None, None] / (h * w), xd.shape)
        return (np.ascontiguousarray(dx, dtype=xd.dtype),)

    return Tensor(out, (x,), vjp)


def linear(x, weight, bias):
    """x: (N, F) @ weight: (F, O) + bias: (O,)."""
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise EngineError(f"linear shape mismatch: input {xd.shape}, weight {wd.shape}")
    if bd.shape != (wd.shape[1],):
        raise EngineError(f"bias must have shape ({wd.shape[1]},), got {bd.shape}")
    out = xd @ wd + bd

    def vjp(dout):
        return dout @ wd.T, xd.T @ dout, dout.sum(axis=0)

    return Tensor(out, (x, weight, bias), vjp)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of logits (N, K) against integer labels (N,)."""
    ld = logits.data
    if ld.ndim != 2:
        raise EngineError(f"cross-entropy expects (N, classes) logits, got shape {ld.shape}")
    labels = np.asarray(labels)
    n, k = ld.shape
    if labels.shape != (n,):
        raise EngineError(f"labels must have shape ({n},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise EngineError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() >= k:
        raise EngineError(f"label out of range [0, {k}): min {labels.min()}, max {labels.max()}")

    z = ld.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def vjp(dout):
        dl = np.exp(logp)
        dl[np.arange(n), labels] -= 1.0
        dl *= float(dout) / n
        return (dl.astype(ld.dtype),)

    return Tensor(np.float64(loss), (logits,), vjp)


def attention_map(x):
    """Channel-mean of squared activations, flattened per example.

    (N, C, H, W) -> (N, H*W); invariant to the sign of the raw activation.
    """
    xd = x.data
    if xd.ndim != 4:
        raise EngineError(f"attention_map expects NCHW input, got shape {xd.shape}")
    n, c, h, w = xd.shape
    out = np.mean(xd.astype(np.float64) ** 2, axis=1).reshape(n, h * w).astype(xd.dtype)

    def vjp(dout):
        dx = (2.0 / c) * xd * dout.reshape(n, 1, h, w)
        return (dx.astype(xd.dtype),)

    return Tensor(out, (x,), vjp)


def normalized_map_distance(student_map, teacher_map):
    """Batch mean of || s/||s|| - t/||t|| ||_2 over per-example map vectors.

    ``student_map`` is a graph node of shape (N, D); ``teacher_map`` is a
    plain array of the same shape and carries no gradient. A zero-norm map
    on either side is a fault: with ReLU networks at sane initialization it
    indicates a dead network, not a boundary case to smooth over.
    """
    sd = student_map.data.astype(np.float64)
    td = np.asarray(teacher_map, dtype=np.float64)
    if sd.shape != td.shape:
        raise EngineError(f"attention maps must match, got {sd.shape} and {td.shape}")
    n = sd.shape[0]
    s_norm = np.linalg.norm(sd, axis=1)
    t_norm = np.linalg.norm(td, axis=1)
    if np.any(s_norm == 0) or np.any(t_norm == 0):
        raise EngineError("zero-norm attention map")
    u = sd / s_norm[:, None]
    t_hat = td / t_norm[:, None]
    r = u - t_hat
    dist = np.linalg.norm(r, axis=1)
    out = np.float64(dist.mean())

    def vjp(dout):
        # d||u - t||/du = r/||r||; project through the normalization of s.
        safe = np.where(dist > 0, dist, 1.0)
        r_hat = r / safe[:, None]
        ds = (r_hat - u * (u * r_hat).sum(axis=1, keepdims=True)) / s_norm[:, None]
        ds[dist == 0] = 0.0
        ds *= float(dout) / n
        return (ds.astype(student_map.data.dtype),)

    return Tensor(out, (student_map,), vjp)
