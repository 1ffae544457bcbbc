"""MiniPixelNet: a small hypercolumn network for per-pixel prediction.

Conv backbone (3x3 convs, batchnorm, ReLU), downsampled by stride-2 convs
between blocks, topped by two 1x1 conv layers at the coarsest scale (named
"6" and "7" after the fc-conversion layers they miniaturize). Pixel-level
predictions come from an MLP over hypercolumn features bilinearly sampled
from tapped layers at each queried pixel.

Stride-2 layers zero-pad top/left by one so output sizes halve exactly;
this is the floor-mode convolution every framework uses, expressed with the
exact-division conv2d of :mod:`ops`. Image height/width must be divisible by
2 per downsampling step.
"""

import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import ops, tensorio
from .fnv import fnv1a64, hex64
from .rng import Rng

REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclass(frozen=True)
class BackboneSpec:
    blocks: tuple = ((16, 2), (32, 2), (64, 2))
    coarse_channels: tuple = (128, 128)          # 1x1 conv layers "6", "7"
    hypercolumn_taps: tuple = ("1_2", "2_2", "3_2", "7")
    head_hidden: tuple = (128, 128)
    out_dim: int = 3
    head_kind: str = REGRESSION

    def __post_init__(self):
        if self.out_dim < 1:
            raise ValueError("out_dim must be >= 1")
        if self.head_kind not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown head_kind {self.head_kind!r}")
        names = {l.name for l in build_layers(self)}
        missing = [t for t in self.hypercolumn_taps if t not in names]
        if missing:
            raise ValueError(f"hypercolumn taps {missing} refer to no layer (have {sorted(names)})")

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        return BackboneSpec(
            blocks=tuple(tuple(b) for b in d["blocks"]),
            coarse_channels=tuple(d["coarse_channels"]),
            hypercolumn_taps=tuple(d["hypercolumn_taps"]),
            head_hidden=tuple(d["head_hidden"]),
            out_dim=int(d["out_dim"]),
            head_kind=d["head_kind"],
        )


@dataclass(frozen=True)
class LayerDef:
    name: str
    in_ch: int
    out_ch: int
    ksize: int
    stride: int
    pad: int
    scale: float          # feature-map size relative to the input image


def build_layers(spec):
    layers = []
    in_ch = 3
    scale = 1.0
    for bi, (ch, n_convs) in enumerate(spec.blocks, start=1):
        for ci in range(1, n_convs + 1):
            downsample = bi > 1 and ci == 1
            if downsample:
                scale *= 0.5
            layers.append(LayerDef(f"{bi}_{ci}", in_ch, ch, 3,
                                   2 if downsample else 1, 0 if downsample else 1, scale))
            in_ch = ch
    for idx, ch in enumerate(spec.coarse_channels, start=6):
        layers.append(LayerDef(str(idx), in_ch, ch, 1, 1, 0, scale))
        in_ch = ch
    return layers


def hypercolumn_dim(spec):
    by_name = {l.name: l.out_ch for l in build_layers(spec)}
    return sum(by_name[t] for t in spec.hypercolumn_taps)


def default_spec(head_kind=REGRESSION, out_dim=3):
    return BackboneSpec(out_dim=out_dim, head_kind=head_kind)


@dataclass
class PixelBatch:
    """Sparse pixel queries: per-point image index, (row, col), and target."""
    image_indices: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    targets: np.ndarray = None


@dataclass
class ModelState:
    spec: BackboneSpec
    params: dict
    bn_stats: dict
    init_provenance: str = "random"

    def parameters(self):
        return self.params.values()

    def head_param_names(self):
        return [n for n in self.params if n.startswith("head")]

    def backbone_param_names(self):
        return [n for n in self.params if not n.startswith("head")]

    def clone(self):
        m = ModelState(self.spec, {}, {}, self.init_provenance)
        for n, p in self.params.items():
            q = ops.Param(p.value.copy())
            q.momentum_buf[...] = p.momentum_buf
            m.params[n] = q
        m.bn_stats = {n: v.copy() for n, v in self.bn_stats.items()}
        return m


def _param_names(spec):
    names = []
    for layer in build_layers(spec):
        names += [f"conv{layer.name}.weight", f"conv{layer.name}.bias",
                  f"bn{layer.name}.gamma", f"bn{layer.name}.beta"]
    d_in = hypercolumn_dim(spec)
    for j, h in enumerate(spec.head_hidden, start=1):
        names += [f"head{j}.weight", f"head{j}.bias"]
        d_in = h
    names += ["headout.weight", "headout.bias"]
    return names


def _param_shapes(spec):
    shapes = {}
    for layer in build_layers(spec):
        shapes[f"conv{layer.name}.weight"] = (layer.out_ch, layer.in_ch, layer.ksize, layer.ksize)
        shapes[f"conv{layer.name}.bias"] = (layer.out_ch,)
        shapes[f"bn{layer.name}.gamma"] = (layer.out_ch,)
        shapes[f"bn{layer.name}.beta"] = (layer.out_ch,)
    d_in = hypercolumn_dim(spec)
    for j, h in enumerate(spec.head_hidden, start=1):
        shapes[f"head{j}.weight"] = (h, d_in)
        shapes[f"head{j}.bias"] = (h,)
        d_in = h
    shapes["headout.weight"] = (spec.out_dim, d_in)
    shapes["headout.bias"] = (spec.out_dim,)
    return shapes


INIT_STD = 0.01


def _init_params(spec, rng, names=None):
    """Gaussian(0, 0.01) weights, zero biases, unit gammas; one child stream
    per parameter name so initialization is independent of iteration order."""
    shapes = _param_shapes(spec)
    out = {}
    for name in names or _param_names(spec):
        shape = shapes[name]
        if name.endswith(".weight"):
            vals = rng.child(name).normal_block(int(np.prod(shape))) * INIT_STD
            out[name] = ops.Param(vals.reshape(shape).astype(np.float32))
        elif name.endswith(".gamma"):
            out[name] = ops.Param(np.ones(shape, dtype=np.float32))
        else:
            out[name] = ops.Param(np.zeros(shape, dtype=np.float32))
    return out


def init_model(spec, seed):
    rng = Rng(seed)
    params = _init_params(spec, rng)
    bn_stats = {}
    for layer in build_layers(spec):
        bn_stats[f"bn{layer.name}.mean"] = np.zeros(layer.out_ch, dtype=np.float32)
        bn_stats[f"bn{layer.name}.var"] = np.ones(layer.out_ch, dtype=np.float32)
    return ModelState(spec, params, bn_stats, init_provenance="random")


def reinit_head(model, out_dim, head_kind, seed):
    """Fresh head for a new task; backbone weights and bn statistics retained."""
    new_spec = BackboneSpec(
        blocks=model.spec.blocks, coarse_channels=model.spec.coarse_channels,
        hypercolumn_taps=model.spec.hypercolumn_taps, head_hidden=model.spec.head_hidden,
        out_dim=out_dim, head_kind=head_kind)
    m = model.clone()
    m.spec = new_spec
    for name in list(m.params):
        if name.startswith("head"):
            del m.params[name]
    m.params.update(_init_params(new_spec, Rng(seed),
                                 [n for n in _param_names(new_spec) if n.startswith("head")]))
    # keep file section order canonical
    m.params = {n: m.params[n] for n in _param_names(new_spec)}
    return m


# ---------------------------------------------------------------------------
# forward / backward


def _pad_tl(x):
    """Zero-pad top/left by one row/column (for exact stride-2 halving)."""
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 1, w + 1), dtype=x.dtype)
    out[:, :, 1:, 1:] = x
    return out


def _backbone_forward(model, images, training, keep_cache):
    spec = model.spec
    taps_wanted = set(spec.hypercolumn_taps)
    taps = {}
    caches = [] if keep_cache else None
    x = images
    for layer in build_layers(spec):
        p = model.params
        if layer.stride == 2:
            x = _pad_tl(x)
        out, cctx = ops.conv2d_forward(x, p[f"conv{layer.name}.weight"].value,
                                       p[f"conv{layer.name}.bias"].value,
                                       stride=layer.stride, pad=layer.pad)
        out, bctx = ops.batchnorm_forward(
            out, p[f"bn{layer.name}.gamma"].value, p[f"bn{layer.name}.beta"].value,
            model.bn_stats[f"bn{layer.name}.mean"], model.bn_stats[f"bn{layer.name}.var"],
            training=training)
        out, rctx = ops.relu_forward(out)
        if layer.name in taps_wanted:
            taps[layer.name] = out
        if keep_cache:
            caches.append((layer, cctx, bctx, rctx))
        x = out
    return taps, caches


def _backbone_backward(model, caches, tap_grads):
    g = None
    for layer, cctx, bctx, rctx in reversed(caches):
        tg = tap_grads.get(layer.name)
        if g is None:
            g = tg
        elif tg is not None:
            g = g + tg
        g = ops.relu_backward(rctx, g)
        g, ggamma, gbeta = ops.batchnorm_backward(bctx, g)
        model.params[f"bn{layer.name}.gamma"].grad += ggamma
        model.params[f"bn{layer.name}.beta"].grad += gbeta
        g, gw, gb = ops.conv2d_backward(cctx, g)
        model.params[f"conv{layer.name}.weight"].grad += gw
        model.params[f"conv{layer.name}.bias"].grad += gb
        if layer.stride == 2:
            g = np.ascontiguousarray(g[:, :, 1:, 1:])   # undo _pad_tl
    return g


def _head_forward(model, hc, keep_cache):
    caches = [] if keep_cache else None
    x = hc
    for j in range(1, len(model.spec.head_hidden) + 1):
        x, lctx = ops.linear_forward(x, model.params[f"head{j}.weight"].value,
                                     model.params[f"head{j}.bias"].value)
        x, rctx = ops.relu_forward(x)
        if keep_cache:
            caches.append((f"head{j}", lctx, rctx))
    out, lctx = ops.linear_forward(x, model.params["headout.weight"].value,
                                   model.params["headout.bias"].value)
    if keep_cache:
        caches.append(("headout", lctx, None))
    return out, caches


def _head_backward(model, caches, gout):
    g = gout
    for name, lctx, rctx in reversed(caches):
        if rctx is not None:
            g = ops.relu_backward(rctx, g)
        g, gw, gb = ops.linear_backward(lctx, g)
        model.params[f"{name}.weight"].grad += gw
        model.params[f"{name}.bias"].grad += gb
    return g


def forward_sampled(model, images, pixels, mode="eval", return_cache=False):
    """Predictions at sampled pixels: images[B,3,H,W], pixels a PixelBatch.

    Returns (P, out_dim); with return_cache=True also a cache to feed
    backward_sampled. mode="train" uses batch statistics and supports backward.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    training = mode == "train"
    h, w = images.shape[2], images.shape[3]
    taps, bb_caches = _backbone_forward(model, images, training, keep_cache=return_cache)
    scales = {l.name: l.scale for l in build_layers(model.spec)}
    cols = []
    bl_ctxs = []
    for name in model.spec.hypercolumn_taps:
        sampled, bctx = ops.bilinear_batch_forward(
            taps[name], pixels.image_indices, pixels.rows, pixels.cols,
            scales[name], (h, w))
        cols.append(sampled)
        bl_ctxs.append((name, bctx, sampled.shape[1]))
    hc = np.concatenate(cols, axis=1)
    preds, head_caches = _head_forward(model, hc, keep_cache=return_cache)
    if not return_cache:
        return preds
    return preds, (bb_caches, bl_ctxs, head_caches)


def backward_sampled(model, cache, grad_preds):
    """Accumulate parameter gradients for a forward_sampled(train) pass."""
    bb_caches, bl_ctxs, head_caches = cache
    ghc = _head_backward(model, head_caches, grad_preds)
    tap_grads = {}
    offset = 0
    for name, bctx, width in bl_ctxs:
        gtap = ops.bilinear_batch_backward(bctx, ghc[:, offset:offset + width])
        tap_grads[name] = tap_grads[name] + gtap if name in tap_grads else gtap
        offset += width
    _backbone_backward(model, bb_caches, tap_grads)


def _axis_lerp_indices(n_out, n_feat, scale, dtype):
    coords = np.arange(n_out, dtype=np.float64)
    f = np.clip((coords + 0.5) * scale - 0.5, 0.0, n_feat - 1)
    i0 = np.floor(f).astype(np.int64)
    frac = (f - i0).astype(dtype)
    i1 = np.minimum(i0 + 1, n_feat - 1)
    return i0, i1, frac


def _upsample_tap(fm, h, w):
    """Separable bilinear resize of fm[B,C,Hf,Wf] to (B,C,h,w), same corner
    convention as bilinear_batch_forward."""
    b, c, hf, wf = fm.shape
    if hf == h and wf == w:
        return fm
    r0, r1, ar = _axis_lerp_indices(h, hf, hf / h, fm.dtype)
    c0, c1, ac = _axis_lerp_indices(w, wf, wf / w, fm.dtype)
    rows = fm[:, :, r0, :] * (1 - ar).reshape(1, 1, h, 1)
    rows += fm[:, :, r1, :] * ar.reshape(1, 1, h, 1)
    out = rows[:, :, :, c0] * (1 - ac).reshape(1, 1, 1, w)
    out += rows[:, :, :, c1] * ac.reshape(1, 1, 1, w)
    return out


def dense_predict(model, images, row_chunk=16384):
    """Eval-mode predictions at every pixel: images[B,3,H,W] -> [B,out_dim,H,W]."""
    b, _, h, w = images.shape
    taps, _ = _backbone_forward(model, images, training=False, keep_cache=False)
    dense = [
        _upsample_tap(taps[name], h, w)
        for name in model.spec.hypercolumn_taps
    ]
    hc = np.concatenate(dense, axis=1)                       # (B, D, H, W)
    d = hc.shape[1]
    hc = np.ascontiguousarray(hc.transpose(0, 2, 3, 1)).reshape(b * h * w, d)
    outs = []
    for lo in range(0, hc.shape[0], row_chunk):
        preds, _ = _head_forward(model, hc[lo:lo + row_chunk], keep_cache=False)
        outs.append(preds)
    out = np.concatenate(outs, axis=0).reshape(b, h, w, model.spec.out_dim)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def forward_dense(model, image):
    """Eval-mode dense prediction for a single image[3,H,W] -> [out_dim,H,W]."""
    return dense_predict(model, image[None])[0]


# ---------------------------------------------------------------------------
# serialization (CDM1 container: JSON header + named CDT1 sections)

MODEL_MAGIC = b"CDM1"


def model_to_bytes(model):
    param_names = _param_names(model.spec)
    bn_names = sorted(model.bn_stats)
    header = {
        "format": 1,
        "spec": model.spec.to_dict(),
        "init_provenance": model.init_provenance,
        "params": param_names,
        "bn_stats": bn_names,
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(len(hjson).to_bytes(4, "little"))
    buf.write(hjson)
    for name in param_names:
        buf.write(tensorio.tensor_bytes(model.params[name].value))
    for name in bn_names:
        buf.write(tensorio.tensor_bytes(model.bn_stats[name]))
    return buf.getvalue()


def save_model(model, path):
    data = model_to_bytes(model)
    with open(path, "wb") as f:
        f.write(data)
    return fnv1a64(data)


def model_from_bytes(data):
    if data[:4] != MODEL_MAGIC:
        raise tensorio.ContainerError("bad model magic: expected CDM1")
    hlen = int.from_bytes(data[4:8], "little")
    header = json.loads(data[8:8 + hlen].decode())
    if header.get("format") != 1:
        raise tensorio.ContainerError(f"unsupported model format {header.get('format')}")
    spec = BackboneSpec.from_dict(header["spec"])
    shapes = _param_shapes(spec)
    offset = 8 + hlen
    params = {}
    for name in header["params"]:
        try:
            arr, offset = tensorio.tensor_from_buffer(data, offset)
        except tensorio.ContainerError as e:
            raise tensorio.ContainerError(f"model section {name!r}: {e}") from None
        if name not in shapes:
            raise tensorio.ContainerError(f"unexpected model section {name!r}")
        if arr.shape != shapes[name]:
            raise tensorio.ContainerError(
                f"model section {name!r}: shape {arr.shape} != spec shape {shapes[name]}")
        params[name] = ops.Param(arr)
    bn_stats = {}
    for name in header["bn_stats"]:
        try:
            arr, offset = tensorio.tensor_from_buffer(data, offset)
        except tensorio.ContainerError as e:
            raise tensorio.ContainerError(f"model section {name!r}: {e}") from None
        bn_stats[name] = arr.copy()
    missing = [n for n in header["params"] if n not in params]
    if missing or len(params) != len(shapes):
        raise tensorio.ContainerError(f"model file missing sections: {missing or sorted(set(shapes) - set(params))}")
    return ModelState(spec, params, bn_stats, header["init_provenance"])


def load_model(path):
    with open(path, "rb") as f:
        return model_from_bytes(f.read())


def cast_model(model, dtype):
    """Copy of the model with parameters and bn stats in ``dtype`` (for the
    float64 gradient checker)."""
    m = ModelState(model.spec, {}, {}, model.init_provenance)
    m.params = {n: ops.Param(p.value.astype(dtype)) for n, p in model.params.items()}
    m.bn_stats = {n: v.astype(dtype) for n, v in model.bn_stats.items()}
    return m


def model_fnv(model):
    """Content hash of the serialized model; used as its provenance id."""
    return fnv1a64(model_to_bytes(model))


def model_tag(model):
    return hex64(model_fnv(model))
