"""Small convolutional U-Net over square matrices, with manual backprop.

The network maps an ``l x l`` matrix (``l`` divisible by 4) plus a timestep
to a symmetric ``l x l`` noise estimate:

    stem conv (1 -> c1) + timestep bias, SiLU
    encoder 1: stride-2 conv (c1 -> c2) + timestep bias, SiLU
    encoder 2: stride-2 conv (c2 -> c3) + timestep bias, SiLU
    bottleneck conv (c3 -> c3), SiLU
    decoder 1: nearest x2, concat skip, conv (c3+c2 -> c2), SiLU
    decoder 2: nearest x2, concat skip, conv (c2+c1 -> c1), SiLU
    head conv (c1 -> 1), then output symmetrization 0.5 (X + X.T)

The timestep enters through sinusoidal embeddings -> linear -> SiLU -> one
linear projection per encoder stage, added as a channel bias.  All convs are
3x3 with zero padding.

Internally activations are channels-last ``(n, h, w, c)`` so im2col moves
contiguous channel runs; weights are stored in the canonical
``(out, in, 3, 3)`` layout and repacked per call.  Gradients are exact
(verified against central finite differences in the test suite).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import DimensionError, NumericalError, ValidationError


@dataclass(frozen=True)
class UNetSpec:
    c1: int = 16
    c2: int = 32
    c3: int = 64
    d_emb: int = 32

    def __post_init__(self):
        if self.d_emb % 2 != 0:
            raise ValidationError(f"embedding width must be even, got {self.d_emb}")


PARAM_ORDER = (
    "stem/w", "stem/b",
    "emb/w1", "emb/b1",
    "emb/stem_w", "emb/stem_b",
    "emb/enc1_w", "emb/enc1_b",
    "emb/enc2_w", "emb/enc2_b",
    "enc1/w", "enc1/b",
    "enc2/w", "enc2/b",
    "mid/w", "mid/b",
    "dec1/w", "dec1/b",
    "dec2/w", "dec2/b",
    "head/w", "head/b",
)

CONV_LAYERS = ("stem", "enc1", "enc2", "mid", "dec1", "dec2", "head")
LAYER_STRIDE = {
    "stem": 1, "enc1": 2, "enc2": 2, "mid": 1, "dec1": 1, "dec2": 1, "head": 1,
}


def sinusoidal_embed(k, d_emb):
    """Interleaved (sin, cos) pairs at frequencies ``10000 ** (-2j / d_emb)``.

    ``k`` may be a scalar or a vector of steps; output has shape
    ``(..., d_emb)`` with entries in [-1, 1].
    """
    if d_emb % 2 != 0:
        raise ValidationError(f"embedding width must be even, got {d_emb}")
    k = np.asarray(k, dtype=float)
    if np.any(k < 0):
        raise ValidationError("timesteps must be >= 0")
    j = np.arange(d_emb // 2)
    omega = 10000.0 ** (-2.0 * j / d_emb)
    phase = k[..., None] * omega
    out = np.empty(phase.shape[:-1] + (d_emb,))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


def init_params(spec=UNetSpec(), seed=0):
    """He-normal conv kernels, zero biases, zero timestep projections and head.

    A zero head makes the untrained network predict exactly zero noise, the
    natural baseline the trainer must beat.
    """
    gen = rngmod.stream(seed, rngmod.INIT_PARAMS)
    c1, c2, c3, d = spec.c1, spec.c2, spec.c3, spec.d_emb

    def conv(oc, ic):
        return gen.standard_normal((oc, ic, 3, 3)) * math.sqrt(2.0 / (ic * 9))

    return {
        "stem/w": conv(c1, 1), "stem/b": np.zeros(c1),
        "emb/w1": gen.standard_normal((c1, d)) * math.sqrt(2.0 / d),
        "emb/b1": np.zeros(c1),
        "emb/stem_w": np.zeros((c1, c1)), "emb/stem_b": np.zeros(c1),
        "emb/enc1_w": np.zeros((c2, c1)), "emb/enc1_b": np.zeros(c2),
        "emb/enc2_w": np.zeros((c3, c1)), "emb/enc2_b": np.zeros(c3),
        "enc1/w": conv(c2, c1), "enc1/b": np.zeros(c2),
        "enc2/w": conv(c3, c2), "enc2/b": np.zeros(c3),
        "mid/w": conv(c3, c3), "mid/b": np.zeros(c3),
        "dec1/w": conv(c2, c3 + c2), "dec1/b": np.zeros(c2),
        "dec2/w": conv(c1, c2 + c1), "dec2/b": np.zeros(c1),
        "head/w": np.zeros((1, c1, 3, 3)), "head/b": np.zeros(1),
    }


def spec_of_params(params):
    """Recover the architecture widths from a parameter dict."""
    return UNetSpec(
        c1=params["stem/w"].shape[0],
        c2=params["enc1/w"].shape[0],
        c3=params["enc2/w"].shape[0],
        d_emb=params["emb/w1"].shape[1],
    )


def _sigmoid(x):
    # exp overflow for very negative inputs saturates to exactly 0, which is
    # the correct limit; silence the spurious warning.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _silu(x):
    return x * _sigmoid(x)


def _dsilu(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _pad1(x):
    n, h, w, c = x.shape
    xpad = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xpad[:, 1:-1, 1:-1, :] = x
    return xpad


# Two equivalent conv formulations, chosen per layer by buffer size: im2col
# gathers 9 input taps per output pixel (buffer ~ 9 * in_channels), the
# output-gather form computes all 9 shifted contributions in one GEMM on the
# padded image and accumulates them with flat-offset adds (buffer ~ 9 *
# out_channels).  Decoders and the head have few output channels, so the
# second form moves far less memory there.


def _use_gather(stride, c, oc):
    return stride == 1 and oc < c


def _pack_w(w, dtype, gather):
    if gather:
        # (oc, c, 3, 3) -> (c, 9*oc); block t = ki*3+kj holds w[:, :, ki, kj].T
        return np.ascontiguousarray(
            w.transpose(1, 2, 3, 0).reshape(w.shape[1], -1), dtype=dtype
        )
    # (oc, c, 3, 3) -> (9c, oc)
    return np.ascontiguousarray(
        w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0]), dtype=dtype
    )


def _unpack_dw(dw2, oc, c, gather):
    if gather:
        return np.ascontiguousarray(
            dw2.reshape(c, 3, 3, oc).transpose(3, 0, 1, 2)
        ).astype(np.float64)
    return np.ascontiguousarray(
        dw2.reshape(3, 3, c, oc).transpose(3, 2, 0, 1)
    ).astype(np.float64)


def _im2col(xpad, stride, ho, wo):
    # Column layout (n, ho, wo, 3, 3, c): the copies below move contiguous
    # channel runs and the final reshape is free.
    n, _, _, c = xpad.shape
    cols = np.empty((n, ho, wo, 3, 3, c), dtype=xpad.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, :, ki, kj, :] = xpad[
                :, ki : ki + stride * (ho - 1) + 1 : stride,
                kj : kj + stride * (wo - 1) + 1 : stride, :,
            ]
    return cols.reshape(n * ho * wo, 9 * c)


def _conv_im2col_forward(x, w2, bias, stride):
    n, h, wd, c = x.shape
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    x2 = _im2col(_pad1(x), stride, ho, wo)
    out = x2 @ w2 + bias
    return out.reshape(n, ho, wo, w2.shape[1]), x2


def _conv_im2col_backward(x2, in_shape, w2, dout, stride, want_dx=True):
    n, h, wd, c = in_shape
    oc = w2.shape[1]
    ho, wo = dout.shape[1], dout.shape[2]
    d2 = dout.reshape(-1, oc)
    dw2 = x2.T @ d2
    db = d2.sum(axis=0)
    if not want_dx:
        return None, dw2, db
    dcols = (d2 @ w2.T).reshape(n, ho, wo, 3, 3, c)
    dxpad = np.zeros((n, h + 2, wd + 2, c), dtype=x2.dtype)
    for ki in range(3):
        for kj in range(3):
            dxpad[
                :, ki : ki + stride * (ho - 1) + 1 : stride,
                kj : kj + stride * (wo - 1) + 1 : stride, :,
            ] += dcols[:, :, :, ki, kj, :]
    return dxpad[:, 1:-1, 1:-1, :], dw2, db


def _shifts(wp):
    # Flat row offsets of the 9 taps on a padded, flattened image.  Interior
    # output rows only ever reach legal padded coordinates, so the flat
    # arithmetic never crosses an image boundary.
    return [((ki - 1) * wp + (kj - 1), ki * 3 + kj) for ki in range(3) for kj in range(3)]


def _conv_gather_forward(x, w_all, bias):
    n, h, wd, c = x.shape
    oc = bias.shape[0]
    xpad = _pad1(x)
    hp, wp = h + 2, wd + 2
    r = n * hp * wp
    xflat = xpad.reshape(r, c)
    y = (xflat @ w_all).reshape(r, 9, oc)
    opad = np.zeros((r, oc), dtype=x.dtype)
    for delta, t in _shifts(wp):
        if delta >= 0:
            opad[: r - delta] += y[delta:, t]
        else:
            opad[-delta:] += y[: r + delta, t]
    out = opad.reshape(n, hp, wp, oc)[:, 1:-1, 1:-1, :] + bias
    return out, xflat


def _conv_gather_backward(xflat, in_shape, w_all, dout, want_dx=True):
    n, h, wd, c = in_shape
    oc = dout.shape[3]
    hp, wp = h + 2, wd + 2
    r = n * hp * wp
    dopad = np.zeros((r, oc), dtype=dout.dtype)
    dopad.reshape(n, hp, wp, oc)[:, 1:-1, 1:-1, :] = dout
    dy = np.zeros((r, 9, oc), dtype=dout.dtype)
    for delta, t in _shifts(wp):
        if delta >= 0:
            dy[delta:, t] = dopad[: r - delta]
        else:
            dy[: r + delta, t] = dopad[-delta:]
    dy = dy.reshape(r, 9 * oc)
    dw_all = xflat.T @ dy
    db = dout.sum(axis=(0, 1, 2))
    if not want_dx:
        return None, dw_all, db
    dxpad = dy @ w_all.T
    dx = dxpad.reshape(n, hp, wp, c)[:, 1:-1, 1:-1, :]
    return dx, dw_all, db


def _upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _downsample_grad(d):
    return (
        d[:, 0::2, 0::2, :] + d[:, 0::2, 1::2, :]
        + d[:, 1::2, 0::2, :] + d[:, 1::2, 1::2, :]
    )


def forward_batch(params, x, k, want_cache=False, dtype=np.float64):
    """Run the network on a batch.

    Parameters
    ----------
    x : (n, l, l) array
    k : (n,) vector of timesteps
    dtype : working precision; training uses float32, inference and the
        finite-difference checks keep float64.

    Returns ``(n, l, l)`` symmetric float64 predictions, plus a cache for
    :func:`backward_batch` when ``want_cache`` is set.
    """
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 3 or x.shape[1] != x.shape[2]:
        raise DimensionError(f"expected a batch of square matrices, got {x.shape}")
    l = x.shape[1]
    if l % 4 != 0:
        raise DimensionError(f"matrix side must be divisible by 4, got {l}")
    spec = spec_of_params(params)
    k = np.asarray(k, dtype=dtype).reshape(-1)
    if k.shape[0] != x.shape[0]:
        raise DimensionError("one timestep required per batch element")
    gather = {
        name: _use_gather(
            LAYER_STRIDE[name],
            params[f"{name}/w"].shape[1],
            params[f"{name}/w"].shape[0],
        )
        for name in CONV_LAYERS
    }
    w2 = {
        name: _pack_w(params[f"{name}/w"], dtype, gather[name])
        for name in CONV_LAYERS
    }
    bias = {name: params[f"{name}/b"].astype(dtype) for name in CONV_LAYERS}
    pe = {
        name: params[name].astype(dtype)
        for name in PARAM_ORDER
        if name.startswith("emb/")
    }

    x2cache = {}

    def conv(name, inp):
        if gather[name]:
            out, kept = _conv_gather_forward(inp, w2[name], bias[name])
        else:
            out, kept = _conv_im2col_forward(inp, w2[name], bias[name],
                                             LAYER_STRIDE[name])
        x2cache[name] = (kept, inp.shape)
        return out

    # Entries of chain-normalized gradients live on the 1/l scale; the fixed
    # input gain standardizes activations without touching the external
    # normalization contract.
    xin = (dtype(l) * x)[:, :, :, None]

    emb = sinusoidal_embed(k, spec.d_emb).astype(dtype)
    z1 = emb @ pe["emb/w1"].T + pe["emb/b1"]
    h = _silu(z1)
    tb = {
        "stem": h @ pe["emb/stem_w"].T + pe["emb/stem_b"],
        "enc1": h @ pe["emb/enc1_w"].T + pe["emb/enc1_b"],
        "enc2": h @ pe["emb/enc2_w"].T + pe["emb/enc2_b"],
    }

    a0 = conv("stem", xin)
    a0 += tb["stem"][:, None, None, :]
    e0 = _silu(a0)
    a1 = conv("enc1", e0)
    a1 += tb["enc1"][:, None, None, :]
    e1 = _silu(a1)
    a2 = conv("enc2", e1)
    a2 += tb["enc2"][:, None, None, :]
    e2 = _silu(a2)
    am = conv("mid", e2)
    em = _silu(am)
    cat1 = np.concatenate([_upsample2(em), e1], axis=3)
    ad1 = conv("dec1", cat1)
    d1 = _silu(ad1)
    cat2 = np.concatenate([_upsample2(d1), e0], axis=3)
    ad2 = conv("dec2", cat2)
    d2 = _silu(ad2)
    raw = conv("head", d2)[:, :, :, 0].astype(np.float64)
    out = 0.5 * (raw + raw.transpose(0, 2, 1))
    if not np.all(np.isfinite(out)):
        raise NumericalError("network produced non-finite activations")
    if not want_cache:
        return out
    cache = {
        "w2": w2, "gather": gather, "emb": emb, "z1": z1, "h": h, "pe": pe,
        "a0": a0, "a1": a1, "a2": a2, "am": am, "ad1": ad1, "ad2": ad2,
        "x2": x2cache, "spec": spec, "dtype": dtype,
    }
    return out, cache


def backward_batch(params, cache, dout):
    """Parameter gradients (canonical layout, float64) for a batch."""
    spec = cache["spec"]
    c3, c2 = spec.c3, spec.c2
    w2, x2, gather = cache["w2"], cache["x2"], cache["gather"]
    dtype = cache["dtype"]
    grads = {}

    def conv_back(name, d, want_dx=True):
        kept, in_shape = x2[name]
        if gather[name]:
            dx, dw2, db = _conv_gather_backward(
                kept, in_shape, w2[name], d, want_dx=want_dx
            )
        else:
            dx, dw2, db = _conv_im2col_backward(
                kept, in_shape, w2[name], d, LAYER_STRIDE[name], want_dx=want_dx
            )
        oc, c = params[f"{name}/w"].shape[:2]
        grads[f"{name}/w"] = _unpack_dw(dw2, oc, c, gather[name])
        grads[f"{name}/b"] = db.astype(np.float64)
        return dx

    dout = np.asarray(dout, dtype=dtype)
    draw = (0.5 * (dout + dout.transpose(0, 2, 1)))[:, :, :, None]
    dd2 = conv_back("head", draw)
    dad2 = dd2 * _dsilu(cache["ad2"])
    dcat2 = conv_back("dec2", dad2)
    dd1 = _downsample_grad(dcat2[:, :, :, :c2])
    de0_skip = dcat2[:, :, :, c2:]
    dad1 = dd1 * _dsilu(cache["ad1"])
    dcat1 = conv_back("dec1", dad1)
    dem = _downsample_grad(dcat1[:, :, :, :c3])
    de1_skip = dcat1[:, :, :, c3:]
    dam = dem * _dsilu(cache["am"])
    de2 = conv_back("mid", dam)
    da2 = de2 * _dsilu(cache["a2"])
    de1 = conv_back("enc2", da2)
    de1 += de1_skip
    da1 = de1 * _dsilu(cache["a1"])
    de0 = conv_back("enc1", da1)
    de0 += de0_skip
    da0 = de0 * _dsilu(cache["a0"])
    conv_back("stem", da0, want_dx=False)

    # Timestep-bias path: channel biases collect spatial sums.
    pe = cache["pe"]
    h = cache["h"]
    dtb = {"stem": da0.sum(axis=(1, 2)), "enc1": da1.sum(axis=(1, 2)),
           "enc2": da2.sum(axis=(1, 2))}
    dh = np.zeros_like(h)
    for name in ("stem", "enc1", "enc2"):
        grads[f"emb/{name}_w"] = (dtb[name].T @ h).astype(np.float64)
        grads[f"emb/{name}_b"] = dtb[name].sum(axis=0).astype(np.float64)
        dh += dtb[name] @ pe[f"emb/{name}_w"]
    dz1 = dh * _dsilu(cache["z1"])
    grads["emb/w1"] = (dz1.T @ cache["emb"]).astype(np.float64)
    grads["emb/b1"] = dz1.sum(axis=0).astype(np.float64)
    return grads


def unet_forward(params, x, k):
    """Single-matrix inference: symmetric noise prediction for ``(x, k)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise DimensionError(f"expected a single matrix, got shape {x.shape}")
    return forward_batch(params, x[None], np.array([k]))[0]


def parameter_vector(params):
    """Flatten parameters in canonical order (diagnostics, norms)."""
    return np.concatenate([params[n].ravel() for n in PARAM_ORDER])


def parameter_count(params):
    return int(sum(params[n].size for n in PARAM_ORDER))
