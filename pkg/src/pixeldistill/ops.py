"""Dense-tensor ops with hand-written backward passes.

Every differentiable op comes as a ``*_forward`` returning ``(out, ctx)`` and a
``*_backward(ctx, grad_out)`` returning input gradients. There is no tape: the
model module chains these by hand. Ops run in the dtype of their inputs
(float32 in training, float64 under the gradient checker) and are
deterministic for identical inputs.

Convolution uses cross-correlation semantics (no kernel flip).
"""

import numpy as np


class Param:
    """A trainable tensor with its gradient and momentum accumulator."""

    __slots__ = ("value", "grad", "momentum_buf")

    def __init__(self, value):
        arr = np.ascontiguousarray(value)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not arr.flags.writeable:
            arr = arr.copy()
        self.value = arr
        self.grad = np.zeros_like(arr)
        self.momentum_buf = np.zeros_like(arr)

    @property
    def shape(self):
        return self.value.shape


def _require(cond, msg):
    if not cond:
        raise ValueError(msg)


# ---------------------------------------------------------------------------
# conv2d


def _im2col(x_pad, kh, kw, stride, ho, wo):
    b, c, _, _ = x_pad.shape
    col = np.empty((b, c, kh, kw, ho, wo), dtype=x_pad.dtype)
    for i in range(kh):
        for j in range(kw):
            col[:, :, i, j] = x_pad[:, :, i : i + stride * ho : stride,
                                    j : j + stride * wo : stride]
    return col.reshape(b, c * kh * kw, ho * wo)


def conv2d_forward(x, w, b, stride=1, pad=0):
    """Cross-correlate x[B,C,H,W] with w[K,C,kh,kw] plus bias b[K].

    Output spatial size (H + 2*pad - kh) / stride + 1 must divide exactly.
    """
    _require(x.ndim == 4 and w.ndim == 4, f"conv2d: need 4-d input/weight, got {x.shape}/{w.shape}")
    bsz, c, h, wdt = x.shape
    k, cw, kh, kw = w.shape
    _require(c == cw, f"conv2d: input channels {c} != weight channels {cw}")
    _require(kh % 2 == 1 and kw % 2 == 1, f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    _require(stride >= 1 and pad >= 0, f"conv2d: bad stride {stride} / pad {pad}")
    _require(b.shape == (k,), f"conv2d: bias shape {b.shape} != ({k},)")
    ho, rh = divmod(h + 2 * pad - kh, stride)
    wo, rw = divmod(wdt + 2 * pad - kw, stride)
    ho += 1
    wo += 1
    _require(rh == 0 and rw == 0 and ho >= 1 and wo >= 1,
             f"conv2d: non-integral output size for H,W={h},{wdt} k={kh} pad={pad} stride={stride}")
    if pad > 0:
        x_pad = np.zeros((bsz, c, h + 2 * pad, wdt + 2 * pad), dtype=x.dtype)
        x_pad[:, :, pad:pad + h, pad:pad + wdt] = x
    else:
        x_pad = x
    col = _im2col(x_pad, kh, kw, stride, ho, wo)
    out = np.matmul(w.reshape(k, -1), col)      # (B, K, ho*wo)
    out += b.reshape(1, k, 1)
    ctx = (x.shape, w, stride, pad, col, (kh, kw, ho, wo))
    return out.reshape(bsz, k, ho, wo), ctx


def conv2d_backward(ctx, gout):
    """Gradients w.r.t. (input, weight, bias)."""
    x_shape, w, stride, pad, col, (kh, kw, ho, wo) = ctx
    bsz, c, h, wdt = x_shape
    k = w.shape[0]
    g2 = np.ascontiguousarray(gout.reshape(bsz, k, ho * wo))
    gw = np.matmul(g2, col.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    gb = g2.sum(axis=(0, 2))
    gcol = np.matmul(w.reshape(k, -1).T, g2)    # (B, C*kh*kw, ho*wo)
    gcol = gcol.reshape(bsz, c, kh, kw, ho, wo)
    gx_pad = np.zeros((bsz, c, h + 2 * pad, wdt + 2 * pad), dtype=gout.dtype)
    for i in range(kh):
        for j in range(kw):
            gx_pad[:, :, i : i + stride * ho : stride,
                   j : j + stride * wo : stride] += gcol[:, :, i, j]
    gx = gx_pad[:, :, pad:pad + h, pad:pad + wdt] if pad > 0 else gx_pad
    return gx, gw, gb


# ---------------------------------------------------------------------------
# batchnorm


def batchnorm_forward(x, gamma, beta, running_mean, running_var,
                      training, momentum=0.9, eps=1e-5):
    """Per-channel batchnorm over (B, H, W) of x[B,C,H,W].

    Train mode normalizes with biased batch statistics and updates the running
    buffers in place as ``running = momentum * running + (1-momentum) * batch``;
    eval mode normalizes with the running buffers.
    """
    _require(x.ndim == 4, f"batchnorm: need 4-d input, got {x.shape}")
    _require(eps > 0, "batchnorm: eps must be > 0")
    bsz, c, h, w = x.shape
    _require(gamma.shape == (c,) and beta.shape == (c,),
             f"batchnorm: gamma/beta shape mismatch for C={c}")
    if training:
        n = bsz * h * w
        _require(n >= 2, f"batchnorm: train mode needs B*H*W >= 2, got {n}")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = x - mean.reshape(1, c, 1, 1)
    xhat *= inv_std.reshape(1, c, 1, 1)
    out = xhat * gamma.reshape(1, c, 1, 1)
    out += beta.reshape(1, c, 1, 1)
    ctx = (xhat, inv_std.astype(x.dtype), gamma, training)
    return out, ctx


def batchnorm_backward(ctx, gout):
    """Gradients w.r.t. (input, gamma, beta); input grad valid in train mode."""
    xhat, inv_std, gamma, training = ctx
    c = xhat.shape[1]
    dgamma = (gout * xhat).sum(axis=(0, 2, 3))
    dbeta = gout.sum(axis=(0, 2, 3))
    if not training:
        gx = gout * (gamma * inv_std).reshape(1, c, 1, 1)
        return gx, dgamma, dbeta
    n = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    dxhat = gout * gamma.reshape(1, c, 1, 1)
    s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
    s2 = (gamma * dgamma).reshape(1, c, 1, 1)   # = sum over channel of dxhat * xhat
    gx = dxhat - (s1 + xhat * s2) / n
    gx *= inv_std.reshape(1, c, 1, 1)
    return gx, dgamma, dbeta


# ---------------------------------------------------------------------------
# relu


def relu_forward(x):
    out = np.maximum(x, 0)
    return out, (x > 0)


def relu_backward(ctx, gout):
    return gout * ctx


# ---------------------------------------------------------------------------
# linear


def linear_forward(x, w, b):
    """x[B,Din] @ w[Dout,Din]^T + b[Dout]."""
    _require(x.ndim == 2 and w.ndim == 2, f"linear: need 2-d input/weight, got {x.shape}/{w.shape}")
    _require(x.shape[1] == w.shape[1], f"linear: Din mismatch {x.shape[1]} vs {w.shape[1]}")
    _require(b.shape == (w.shape[0],), f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    out = x @ w.T
    out += b
    return out, (x, w)


def linear_backward(ctx, gout):
    x, w = ctx
    gx = gout @ w
    gw = gout.T @ x
    gb = gout.sum(axis=0)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# bilinear sampling (hypercolumn interpolation)


def _scatter_add_rows(acc, keys, vals):
    """acc[keys[r]] += vals[r], duplicate keys accumulated.

    Sort + segment-reduce; deterministic and much faster than np.add.at for
    wide rows.
    """
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    sv = vals[order]
    starts = np.flatnonzero(np.concatenate(([True], sk[1:] != sk[:-1])))
    sums = np.add.reduceat(sv, starts, axis=0)
    acc[sk[starts]] += sums


def bilinear_batch_forward(fmaps, img_idx, rows, cols, scale, image_hw):
    """Sample fmaps[B,C,Hf,Wf] at per-point image coordinates.

    Points are (row, col) in original-image pixel units; the feature-map
    coordinate is (p + 0.5) * scale - 0.5, clamped to the map edges. Returns
    (P, C) plus a context for the scatter backward.
    """
    b, c, hf, wf = fmaps.shape
    h_img, w_img = image_hw
    rows = np.asarray(rows, dtype=fmaps.dtype)
    cols = np.asarray(cols, dtype=fmaps.dtype)
    if rows.size and (rows.min() < 0 or rows.max() > h_img - 1
                      or cols.min() < 0 or cols.max() > w_img - 1):
        raise ValueError(
            f"bilinear: point outside image bounds [0,{h_img - 1}]x[0,{w_img - 1}]")
    fr = np.clip((rows + 0.5) * scale - 0.5, 0.0, hf - 1)
    fc = np.clip((cols + 0.5) * scale - 0.5, 0.0, wf - 1)
    r0 = np.floor(fr).astype(np.int64)
    c0 = np.floor(fc).astype(np.int64)
    ar = (fr - r0).astype(fmaps.dtype)
    ac = (fc - c0).astype(fmaps.dtype)
    r1 = np.minimum(r0 + 1, hf - 1)
    c1 = np.minimum(c0 + 1, wf - 1)
    v00 = fmaps[img_idx, :, r0, c0]
    v01 = fmaps[img_idx, :, r0, c1]
    v10 = fmaps[img_idx, :, r1, c0]
    v11 = fmaps[img_idx, :, r1, c1]
    w00 = ((1 - ar) * (1 - ac))[:, None]
    w01 = ((1 - ar) * ac)[:, None]
    w10 = (ar * (1 - ac))[:, None]
    w11 = (ar * ac)[:, None]
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    ctx = (fmaps.shape, img_idx, (r0, c0, r1, c1), (w00, w01, w10, w11), fmaps.dtype)
    return out, ctx


def bilinear_batch_backward(ctx, gout):
    """Scatter per-point gradients back to the four corner cells."""
    (b, c, hf, wf), img_idx, (r0, c0, r1, c1), (w00, w01, w10, w11), dtype = ctx
    flat = np.zeros((b * hf * wf, c), dtype=dtype)   # rows keyed (image, row, col)
    base = img_idx * (hf * wf)
    k00 = base + r0 * wf + c0
    if not (w01.any() or w10.any() or w11.any()):
        # integer-aligned points: single corner carries all weight
        _scatter_add_rows(flat, k00, gout * w00)
    else:
        keys = np.concatenate([k00, base + r0 * wf + c1,
                               base + r1 * wf + c0, base + r1 * wf + c1])
        vals = np.concatenate([gout * w00, gout * w01, gout * w10, gout * w11])
        _scatter_add_rows(flat, keys, vals)
    return np.ascontiguousarray(flat.reshape(b, hf, wf, c).transpose(0, 3, 1, 2))


def bilinear_sample(featmap, points, scale):
    """Spec-level single-map interface: featmap[C,Hf,Wf], points [(row, col)].

    scale is Hf / H_image. Returns (P, C).
    """
    c, hf, wf = featmap.shape
    h_img = int(round(hf / scale))
    w_img = int(round(wf / scale))
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"bilinear: points must be (P, 2), got {pts.shape}")
    out, _ = bilinear_batch_forward(
        featmap[None].astype(featmap.dtype),
        np.zeros(len(pts), dtype=np.int64),
        pts[:, 0], pts[:, 1], scale, (h_img, w_img))
    return out


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred, target):
    """Mean squared error over all elements; returns (loss, grad_pred)."""
    _require(pred.shape == target.shape,
             f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff, dtype=np.float64))
    grad = diff * (2.0 / diff.size)
    return loss, grad


def cross_entropy_loss(logits, labels):
    """Mean softmax cross-entropy of logits[P,Cl] against integer labels[P]."""
    _require(logits.ndim == 2 and logits.shape[0] >= 1,
             f"cross_entropy: need (P, Cl) logits with P >= 1, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    p, cl = logits.shape
    _require(labels.shape == (p,), f"cross_entropy: labels shape {labels.shape} != ({p},)")
    _require(labels.size == 0 or (labels.min() >= 0 and labels.max() < cl),
             f"cross_entropy: label outside [0, {cl})")
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    log_probs = z - np.log(sez)
    loss = float(-np.mean(log_probs[np.arange(p), labels], dtype=np.float64))
    grad = ez / sez
    grad[np.arange(p), labels] -= 1.0
    grad /= p
    return loss, grad


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params, lr, momentum=0.9):
    """Momentum SGD: buf = momentum*buf + grad; value -= lr*buf; grads zeroed."""
    _require(lr > 0, f"sgd_step: lr must be > 0, got {lr}")
    _require(0 <= momentum < 1, f"sgd_step: momentum must be in [0,1), got {momentum}")
    for p in params:
        p.momentum_buf *= momentum
        p.momentum_buf += p.grad
        p.value -= lr * p.momentum_buf
        p.grad[...] = 0.0
