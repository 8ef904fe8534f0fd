"""Dense tensors with reverse-mode automatic differentiation.

Image tensors use the layout [batch, channel, row, column]. All operators
preserve the input dtype (float64 for verification, float32 for faster
training) and build a tape of backward closures; calling :func:`backward`
on a scalar loss accumulates gradients into every reachable tensor that
has ``requires_grad`` set. Gradients add across fan-out, which is what
skip connections and residual sums rely on.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, GraphStateError, NumericError

# When True every operator validates that its output is finite. Costs some
# memory bandwidth; the training loop may switch it off and check the loss
# instead.
_STRICT_FINITE = True


def set_strict_finite(enabled: bool) -> bool:
    """Toggle per-op finite checks, returning the previous setting."""
    global _STRICT_FINITE
    previous = _STRICT_FINITE
    _STRICT_FINITE = enabled
    return previous


def _check_finite(arr: np.ndarray, what: str, name: str) -> None:
    if _STRICT_FINITE and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what} at node '{name or '<anonymous>'}'")


class Tensor:
    """A dense n-d array plus an optional gradient slot and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=data.dtype if isinstance(data, np.ndarray) else np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[], None]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def astype(self, dtype) -> "Tensor":
        t = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)
        return t

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    def sum(self) -> "Tensor":
        return tsum(self)

    def backward(self) -> None:
        """Reverse-topological gradient sweep from a scalar result."""
        if self._backward is None and not self._parents:
            raise GraphStateError(
                f"backward on '{self.name or '<leaf>'}' before any forward computation"
            )
        if self.data.size != 1:
            raise GraphStateError("backward requires a scalar result")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None:
                continue
            if node.grad is None:
                continue
            if not np.all(np.isfinite(node.grad)):
                raise NumericError(f"non-finite gradient at node '{node.name or '<anonymous>'}'")
            node._backward()
            # interior gradients and closures are not needed once propagated;
            # dropping them keeps peak memory near one activation per node
            node.grad = None
            node._backward = None

    def __repr__(self) -> str:
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, dtype={self.data.dtype})"


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[], None], name: str) -> Tensor:
    _check_finite(data, "output", name)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), name=name)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, dilation: int = 1, name: str = "conv2d") -> Tensor:
    """Same-padded stride-1 2-d convolution with square 1x1 or 3x3 kernels.

    Output[b,o,y,x] = bias[o] + sum_{c,i,j} weight[o,c,i,j] *
    padded(x)[b,c,y+dilation*i,x+dilation*j], zero padding of width
    dilation*(k-1)/2 so the spatial extent is preserved.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigError(f"{name}: conv2d expects 4-d input and weight")
    co, ci, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ConfigError(f"{name}: kernel must be square 1x1 or 3x3, got {kh}x{kw}")
    if dilation < 1:
        raise ConfigError(f"{name}: dilation must be >= 1, got {dilation}")
    if x.shape[1] != ci:
        raise ConfigError(f"{name}: input has {x.shape[1]} channels, weight expects {ci}")
    if bias.shape != (co,):
        raise ConfigError(f"{name}: bias shape {bias.shape} != ({co},)")

    b, _, h, w = x.shape
    k = kh
    pad = dilation * (k - 1) // 2

    def padded(data: np.ndarray) -> np.ndarray:
        if not pad:
            return data
        xp = np.zeros((b, ci, h + 2 * pad, w + 2 * pad), dtype=data.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = data
        return xp

    xp = padded(x.data)
    acc = np.zeros((co, b, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, dilation * i:dilation * i + h, dilation * j:dilation * j + w]
            # [O,C] x [B,C,H,W] contracted over C -> [O,B,H,W]
            acc += np.tensordot(weight.data[:, :, i, j], patch, axes=([1], [1]))
    out_data = np.moveaxis(acc, 0, 1) + bias.data[None, :, None, None]
    out_data = np.ascontiguousarray(out_data)
    del xp, acc   # the closure recomputes padding; keep nothing large alive

    def backward() -> None:
        go = out.grad
        if bias.requires_grad:
            bias.accumulate_grad(go.sum(axis=(0, 2, 3)))
        need_x = x.requires_grad
        need_w = weight.requires_grad
        xpb = padded(x.data) if need_w else None
        gxp = np.zeros((b, ci, h + 2 * pad, w + 2 * pad), dtype=x.dtype) if need_x else None
        gw = np.zeros_like(weight.data) if need_w else None
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None),
                      slice(dilation * i, dilation * i + h),
                      slice(dilation * j, dilation * j + w))
                if need_w:
                    gw[:, :, i, j] = np.tensordot(go, xpb[sl], axes=([0, 2, 3], [0, 2, 3]))
                if need_x:
                    gxp[sl] += np.einsum("bohw,oc->bchw", go, weight.data[:, :, i, j], optimize=True)
        if need_w:
            weight.accumulate_grad(gw)
        if need_x:
            x.accumulate_grad(gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp)

    out = _result(out_data, (x, weight, bias), backward, name)
    return out


def relu(x: Tensor, name: str = "relu") -> Tensor:
    out_data = np.maximum(x.data, 0)

    def backward() -> None:
        if x.requires_grad:
            x.accumulate_grad(out.grad * (x.data > 0))

    out = _result(out_data, (x,), backward, name)
    return out


def add(a: Tensor, b: Tensor, name: str = "add") -> Tensor:
    if a.shape != b.shape:
        raise ConfigError(f"{name}: add requires identical shapes, got {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def backward() -> None:
        if a.requires_grad:
            a.accumulate_grad(out.grad)
        if b.requires_grad:
            b.accumulate_grad(out.grad)

    out = _result(out_data, (a, b), backward, name)
    return out


def concat(tensors: Sequence[Tensor], pad_channels: int = 0, name: str = "concat") -> Tensor:
    """Channel concatenation, optionally appending `pad_channels` zero channels.

    The zero block stands in for a disabled skip connection so that the
    consuming convolution keeps an identical weight shape either way.
    """
    if not tensors:
        raise ConfigError(f"{name}: concat of nothing")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ConfigError(f"{name}: concat shapes differ outside the channel axis")
    parts = [t.data for t in tensors]
    if pad_channels:
        b, _, h, w = ref
        parts.append(np.zeros((b, pad_channels, h, w), dtype=tensors[0].dtype))
    out_data = np.concatenate(parts, axis=1)

    def backward() -> None:
        go = out.grad
        offset = 0
        for t in tensors:
            c = t.shape[1]
            if t.requires_grad:
                t.accumulate_grad(go[:, offset:offset + c])
            offset += c

    out = _result(out_data, tuple(tensors), backward, name)
    return out


def max_pool2(x: Tensor, name: str = "max_pool2") -> Tensor:
    """Non-overlapping 2x2 window maximum; gradient goes to the first argmax."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"{name}: spatial extents must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    # window axis in row-major order ((0,0),(0,1),(1,0),(1,1)) so argmax
    # tie-breaking is deterministic
    windows = (
        x.data.reshape(b, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h2, w2, 4)
    )
    idx = windows.argmax(axis=-1).astype(np.uint8)
    out_data = np.take_along_axis(windows, idx[..., None].astype(np.intp), axis=-1)[..., 0]

    def backward() -> None:
        if not x.requires_grad:
            return
        g = np.zeros((b, c, h2, w2, 4), dtype=x.dtype)
        np.put_along_axis(g, idx[..., None].astype(np.intp), out.grad[..., None], axis=-1)
        gx = g.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        x.accumulate_grad(gx)

    out = _result(out_data, (x,), backward, name)
    return out


def upsample2(x: Tensor, name: str = "upsample2") -> Tensor:
    """Nearest-neighbor 2x upsampling; gradient sums the four replicas."""
    b, c, h, w = x.shape
    out_data = np.broadcast_to(
        x.data[:, :, :, None, :, None], (b, c, h, 2, w, 2)
    ).reshape(b, c, 2 * h, 2 * w)
    out_data = np.ascontiguousarray(out_data)

    def backward() -> None:
        if x.requires_grad:
            x.accumulate_grad(out.grad.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    out = _result(out_data, (x,), backward, name)
    return out


def downscale_avg(x: Tensor, factor: int, name: str = "downscale_avg") -> Tensor:
    """Non-overlapping factor x factor average pooling."""
    b, c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise ConfigError(f"{name}: {h}x{w} not divisible by factor {factor}")
    if factor == 1:
        out_data = x.data.copy()
    else:
        out_data = x.data.reshape(b, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))

    def backward() -> None:
        if not x.requires_grad:
            return
        g = out.grad / (factor * factor)
        gx = np.broadcast_to(
            g[:, :, :, None, :, None], (b, c, h // factor, factor, w // factor, factor)
        ).reshape(b, c, h, w)
        x.accumulate_grad(np.ascontiguousarray(gx))

    out = _result(out_data, (x,), backward, name)
    return out


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    eps: float = 1e-5,
    momentum: float = 0.9,
    name: str = "batch_norm",
) -> Tensor:
    """Per-channel batch normalization over the (batch, row, column) axes.

    Train mode normalizes with batch statistics and updates the running
    estimates in place (`running = momentum*running + (1-momentum)*batch`);
    infer mode normalizes with the running estimates.
    """
    if eps <= 0:
        raise ConfigError(f"{name}: eps must be positive")
    b, c, h, w = x.shape
    if scale.shape != (c,) or shift.shape != (c,):
        raise ConfigError(f"{name}: scale/shift must have shape ({c},)")

    xd = x.data
    if train:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)

    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * ivar[None, :, None, None]
    out_data = scale.data[None, :, None, None] * xhat + shift.data[None, :, None, None]
    del xhat   # recomputed in the closure from x and the tiny (mu, ivar) pair

    def backward() -> None:
        go = out.grad
        centered = x.data - mu[None, :, None, None]
        if shift.requires_grad:
            shift.accumulate_grad(go.sum(axis=(0, 2, 3)))
        if scale.requires_grad:
            scale.accumulate_grad((go * centered).sum(axis=(0, 2, 3)) * ivar)
        if not x.requires_grad:
            return
        gxhat = go * scale.data[None, :, None, None]
        if not train:
            x.accumulate_grad(gxhat * ivar[None, :, None, None])
            return
        # gradient through the batch statistics
        n = b * h * w
        gvar = (gxhat * centered).sum(axis=(0, 2, 3)) * (-0.5) * ivar ** 3
        gmu = -(gxhat.sum(axis=(0, 2, 3))) * ivar + gvar * (-2.0 / n) * centered.sum(axis=(0, 2, 3))
        gx = (
            gxhat * ivar[None, :, None, None]
            + (2.0 / n) * gvar[None, :, None, None] * centered
            + gmu[None, :, None, None] / n
        )
        x.accumulate_grad(gx)

    out = _result(out_data, (x, scale, shift), backward, name)
    return out


def mse_loss(pred: Tensor, target: Tensor, name: str = "mse_loss") -> Tensor:
    """Mean squared element difference; gradient is 2*(pred-target)/N."""
    if pred.shape != target.shape:
        raise ConfigError(f"{name}: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out_data = np.asarray((diff * diff).mean(), dtype=pred.dtype)
    del diff

    def backward() -> None:
        g = (out.grad * 2.0 / pred.data.size) * (pred.data - target.data)
        if pred.requires_grad:
            pred.accumulate_grad(g)
        if target.requires_grad:
            target.accumulate_grad(-g)

    out = _result(out_data, (pred, target), backward, name)
    return out


def tsum(x: Tensor, name: str = "sum") -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out_data = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward() -> None:
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(out.grad, x.shape).astype(x.dtype))

    out = _result(out_data, (x,), backward, name)
    return out
