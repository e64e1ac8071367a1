"""Network data model across pipeline stages, plus forward/backward engines.

A network is a sequential stack of dense/conv/batchnorm/maxpool/softmax layers.
It moves through the stages real -> pruned -> binarised -> expanded -> hardened;
every engine validates the stage tag of its input.

Conventions used by every engine and by the hardware path:
  * hidden activation is sign(batchnorm(.)) with sign(0) = +1; the batch-norm
    directly feeding the softmax head stays real,
  * from the binarised stage on, the network input is binarised with sign,
  * maxpool over {-1,+1} values is max, which is OR in the bit domain,
  * level scaling is combined as acc = g1*s1; acc += g2*s2; ...; pre = alpha*acc
    (see combine_levels) so that binary, hardened and netlist paths agree
    bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import DimensionError, FoldError, StageError

STAGES = ("real", "pruned", "binarised", "expanded", "hardened")


def require_stage(net: "Network", *allowed: str) -> None:
    if net.stage not in allowed:
        raise StageError(f"operation requires stage in {allowed}, checkpoint is '{net.stage}'")


@dataclass
class DenseLayer:
    in_features: int
    out_features: int
    unrolled: bool = False
    weights: np.ndarray = None          # (out, in) real latent weights
    alpha: float = 1.0
    prune_mask: np.ndarray = None       # bool (out, in); False => weight held at 0
    phase1_weights: np.ndarray = None   # pre-pruning copy, kept for reconnection
    levels: list = None                 # [(w_b pm1 array, gamma_b), ...] after binarise
    lut: "LutData" = None               # set by logic expansion
    tau: np.ndarray = None              # folded thresholds, set at harden
    flip: np.ndarray = None

    kind = "dense"

    @property
    def window_size(self) -> int:
        return self.in_features


@dataclass
class ConvLayer:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    unrolled: bool = False
    weights: np.ndarray = None          # (out_channels, in_channels*kernel*kernel)
    alpha: float = 1.0
    prune_mask: np.ndarray = None
    phase1_weights: np.ndarray = None
    levels: list = None
    lut: "LutData" = None
    tau: np.ndarray = None
    flip: np.ndarray = None

    kind = "conv"

    @property
    def window_size(self) -> int:
        return self.in_channels * self.kernel * self.kernel


@dataclass
class BatchNormLayer:
    num_features: int
    gamma: np.ndarray = None
    beta: np.ndarray = None
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    eps: float = 1e-5
    momentum: float = 0.9

    kind = "batchnorm"


@dataclass
class MaxPoolLayer:
    size: int

    kind = "maxpool"


@dataclass
class SoftmaxLayer:
    kind = "softmax"


@dataclass
class LutChannel:
    """Expansion data for one output channel: surviving nodes and their wiring."""

    node_positions: np.ndarray   # (N~,) original window index of each node
    indices: np.ndarray          # (N~, K) window indices; column 0 == node_positions
    reconnected: np.ndarray      # (N~, K) bool; True where the index was a pruned input
    coeffs: np.ndarray           # (B, N~, 2**K) interpolation coefficients
    masks: np.ndarray = None     # (B, N~, 2**K) int8 in {-1,+1} once hardened

    @property
    def n_nodes(self) -> int:
        return int(self.node_positions.shape[0])


@dataclass
class LutData:
    k: int
    gammas: np.ndarray           # (B,) per-plane output scales
    channels: list = field(default_factory=list)


@dataclass
class FixedPointSpec:
    """Fractional bits for quantising level scales and thresholds; the integer
    width is derived from the popcount range at lowering time."""

    frac_bits: int = 8


@dataclass
class Network:
    name: str
    layers: list
    b_levels: int
    input_shape: tuple
    seed: int
    stage: str = "real"
    fx: FixedPointSpec = None    # attached when hardened

    def compute_layers(self):
        return [(i, l) for i, l in enumerate(self.layers) if l.kind in ("dense", "conv")]

    def bn_after(self, idx: int):
        """The batch-norm layer immediately following layer idx, or None."""
        if idx + 1 < len(self.layers) and self.layers[idx + 1].kind == "batchnorm":
            return self.layers[idx + 1]
        return None


def quantise(value: float, frac_bits: int) -> int:
    """Shared fixed-point rounding for model reference and netlist lowering."""
    return int(np.rint(value * (1 << frac_bits)))


def combine_levels(s_list, gammas, alpha):
    """pre = alpha * sum_b gamma_b * s_b, accumulated in ascending b.

    Every forward path that must agree bit-exactly (binary, hardened, K=1
    recovery) funnels through this helper so the float op order is identical.
    """
    acc = gammas[0] * s_list[0]
    for b in range(1, len(s_list)):
        acc = acc + gammas[b] * s_list[b]
    return alpha * acc


# ---------------------------------------------------------------------------
# construction


def _init_compute(layer, rng):
    fan_in = layer.window_size
    fan_out = layer.out_features if layer.kind == "dense" else layer.out_channels
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_out, fan_in)
    layer.weights = rng.uniform(-limit, limit, size=shape)
    layer.prune_mask = np.ones(shape, dtype=bool)
    layer.alpha = float(np.mean(np.abs(layer.weights)))


def _init_batchnorm(layer):
    n = layer.num_features
    layer.gamma = np.ones(n)
    layer.beta = np.zeros(n)
    layer.running_mean = np.zeros(n)
    layer.running_var = np.ones(n)


def init_network(net: Network) -> Network:
    """Seed-deterministic parameter initialisation (Glorot-uniform weights,
    alpha = mean |w|, identity batch norm)."""
    seq = np.random.SeedSequence(net.seed)
    children = seq.spawn(len(net.layers))
    for child, layer in zip(children, net.layers):
        if layer.kind in ("dense", "conv"):
            _init_compute(layer, np.random.default_rng(child))
        elif layer.kind == "batchnorm":
            _init_batchnorm(layer)
    return net


def build_preset(preset: str, seed: int, b_levels: int = 2) -> Network:
    """Named architectures. 'lfc-small' is the desk-scale profile used by the
    bundled pipeline config; 'lfc' and 'cnv' follow the full benchmark stacks."""
    if preset == "lfc-small":
        layers = [
            DenseLayer(784, 64, unrolled=False),
            BatchNormLayer(64),
            DenseLayer(64, 10, unrolled=True),
            BatchNormLayer(10),
            SoftmaxLayer(),
        ]
        net = Network("lfc_small", layers, b_levels, (784,), seed)
    elif preset == "lfc":
        dims = [784, 256, 256, 256, 256, 10]
        unrolled = [False, True, True, True, True]
        layers = []
        for i in range(5):
            layers.append(DenseLayer(dims[i], dims[i + 1], unrolled=unrolled[i]))
            layers.append(BatchNormLayer(dims[i + 1]))
        layers.append(SoftmaxLayer())
        net = Network("lfc", layers, b_levels, (784,), seed)
    elif preset == "cnv":
        layers = [
            ConvLayer(3, 64, 3, 1), BatchNormLayer(64),
            ConvLayer(64, 64, 3, 1), BatchNormLayer(64),
            MaxPoolLayer(2),
            ConvLayer(64, 128, 3, 1), BatchNormLayer(128),
            ConvLayer(128, 128, 3, 1), BatchNormLayer(128),
            MaxPoolLayer(2),
            ConvLayer(128, 256, 3, 1), BatchNormLayer(256),
            ConvLayer(256, 256, 3, 1, unrolled=True), BatchNormLayer(256),
            DenseLayer(256, 512), BatchNormLayer(512),
            DenseLayer(512, 512), BatchNormLayer(512),
            DenseLayer(512, 10), BatchNormLayer(10),
            SoftmaxLayer(),
        ]
        net = Network("cnv", layers, b_levels, (3, 32, 32), seed)
    else:
        raise ValueError(f"unknown preset '{preset}'")
    return init_network(net)


# ---------------------------------------------------------------------------
# geometry


def conv_out_hw(h, w, kernel, stride):
    if h < kernel or w < kernel:
        raise DimensionError(f"kernel {kernel} does not fit input {h}x{w}")
    if (h - kernel) % stride or (w - kernel) % stride:
        raise DimensionError(f"stride {stride} does not tile input {h}x{w} with kernel {kernel}")
    return (h - kernel) // stride + 1, (w - kernel) // stride + 1


def im2col(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """(B, C, H, W) -> (B, P, C*kernel*kernel); each row along P is one flattened
    receptive-field window in (channel, ky, kx) C-order.  This index space is
    the window from which LUT node inputs are drawn."""
    x = nm.as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"im2col expects (B, C, H, W), got {x.shape}")
    bsz, c, h, w = x.shape
    oh, ow = conv_out_hw(h, w, kernel, stride)
    out = np.empty((bsz, oh * ow, c * kernel * kernel))
    p = 0
    for i in range(oh):
        for j in range(ow):
            patch = x[:, :, i * stride:i * stride + kernel, j * stride:j * stride + kernel]
            out[:, p, :] = patch.reshape(bsz, -1)
            p += 1
    return out


def col2im(dcols: np.ndarray, x_shape, kernel: int, stride: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add window gradients back to input positions."""
    bsz, c, h, w = x_shape
    oh, ow = conv_out_hw(h, w, kernel, stride)
    dx = np.zeros(x_shape)
    p = 0
    for i in range(oh):
        for j in range(ow):
            patch = dcols[:, p, :].reshape(bsz, c, kernel, kernel)
            dx[:, :, i * stride:i * stride + kernel, j * stride:j * stride + kernel] += patch
            p += 1
    return dx


def window_index_map(in_channels, h, w, kernel, stride):
    """Map (position, window slot) -> flat index into the (C, H, W) input, matching
    im2col's layout.  Shared by the model and the netlist builder."""
    oh, ow = conv_out_hw(h, w, kernel, stride)
    idx = np.arange(in_channels * h * w).reshape(1, in_channels, h, w).astype(np.float64)
    cols = im2col(idx, kernel, stride)[0]
    return cols.astype(np.int64), (oh, ow)


# ---------------------------------------------------------------------------
# shared layer plumbing


def _is_head_bn(net, idx):
    """True if layer idx is the batch-norm feeding the softmax head (kept real)."""
    for later in net.layers[idx + 1:]:
        if later.kind != "softmax":
            return False
    return True


def _masked(layer):
    return layer.weights * layer.prune_mask


def _level_arrays(layer):
    if layer.levels is None:
        raise StageError(f"{layer.kind} layer has no residual levels populated")
    return layer.levels


def _spatial(net, upto_idx):
    """Spatial shape (C, H, W) of the tensor entering layer upto_idx (conv nets)."""
    c, h, w = net.input_shape
    for layer in net.layers[:upto_idx]:
        if layer.kind == "conv":
            oh, ow = conv_out_hw(h, w, layer.kernel, layer.stride)
            c, h, w = layer.out_channels, oh, ow
        elif layer.kind == "maxpool":
            h, w = h // layer.size, w // layer.size
    return c, h, w


def _pool_forward(x, size):
    bsz, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"pool size {size} does not tile {h}x{w}")
    r = x.reshape(bsz, c, h // size, size, w // size, size)
    return r.max(axis=(3, 5))


def _pool_backward(x, size, dy):
    bsz, c, h, w = x.shape
    r = x.reshape(bsz, c, h // size, size, w // size, size)
    m = r.max(axis=(3, 5), keepdims=True)
    # ties route the gradient to every argmax position
    grad = (r == m) * dy.reshape(bsz, c, h // size, 1, w // size, 1)
    return grad.reshape(bsz, c, h, w)


# ---------------------------------------------------------------------------
# real-weight engine (phase 1)


def _forward_stack(net, x, training, dense_fn, conv_fn, binarise_input):
    """Common layer walk; dense_fn/conv_fn compute pre-activations and caches."""
    x = nm.as_tensor(x)
    nm.ensure_finite("network input", x)
    bsz = x.shape[0]
    h = x.reshape((bsz,) + tuple(net.input_shape))
    if binarise_input:
        h = nm.sign_pm1(h)
    caches = []
    for idx, layer in enumerate(net.layers):
        if layer.kind == "dense":
            unflatten = h.shape if h.ndim > 2 else None
            if unflatten:
                h = h.reshape(bsz, -1)
            h, cache = dense_fn(idx, layer, h)
            caches.append(("dense", idx, (cache, unflatten)))
        elif layer.kind == "conv":
            h, cache = conv_fn(idx, layer, h)
            caches.append(("conv", idx, cache))
        elif layer.kind == "batchnorm":
            head = _is_head_bn(net, idx)
            feat = h
            moved = feat if feat.ndim == 2 else np.moveaxis(feat, 1, -1)
            shp = moved.shape
            flat = moved.reshape(-1, shp[-1])
            if training:
                y, mu, var, bn_cache = nm.batchnorm_train_forward(flat, layer.gamma, layer.beta, layer.eps)
                layer.running_mean = layer.momentum * layer.running_mean + (1 - layer.momentum) * mu
                layer.running_var = layer.momentum * layer.running_var + (1 - layer.momentum) * var
            else:
                y = nm.batchnorm_forward(flat, layer.running_mean, layer.running_var,
                                         layer.gamma, layer.beta, layer.eps)
                bn_cache = None
            if head:
                caches.append(("batchnorm", idx, (bn_cache, None, shp, head)))
            else:
                caches.append(("batchnorm", idx, (bn_cache, y, shp, head)))
                y = nm.sign_pm1(y)
            h = y.reshape(shp) if len(shp) == 2 else np.moveaxis(y.reshape(shp), -1, 1)
        elif layer.kind == "maxpool":
            caches.append(("maxpool", idx, h))
            h = _pool_forward(h, layer.size)
        elif layer.kind == "softmax":
            caches.append(("softmax", idx, None))
        else:
            raise ValueError(f"unknown layer kind {layer.kind}")
    return h, caches


def _backward_stack(net, caches, dlogits, dense_bwd, conv_bwd):
    grads = {}
    d = nm.as_tensor(dlogits)
    for kind, idx, cache in reversed(caches):
        layer = net.layers[idx]
        if kind == "softmax":
            continue
        if kind == "batchnorm":
            bn_cache, pre_sign, shp, head = cache
            if d.ndim > 2:
                d = np.moveaxis(d, 1, -1)
            dflat = d.reshape(-1, shp[-1])
            if not head:
                dflat = nm.sign_ste_backward(pre_sign, dflat)
            dx, dgamma, dbeta = nm.batchnorm_backward(bn_cache, dflat)
            grads[f"l{idx}.gamma"] = dgamma
            grads[f"l{idx}.beta"] = dbeta
            d = dx.reshape(shp) if len(shp) == 2 else np.moveaxis(dx.reshape(shp), -1, 1)
        elif kind == "maxpool":
            d = _pool_backward(cache, layer.size, d)
        elif kind == "dense":
            inner, unflatten = cache
            d = dense_bwd(idx, layer, inner, d, grads)
            if unflatten:
                d = d.reshape(unflatten)
        elif kind == "conv":
            d = conv_bwd(idx, layer, cache, d, grads)
    return grads, d


def _forward_real_impl(net, x, training):
    def dense_fn(idx, layer, h):
        w = _masked(layer)
        y = nm.dense_forward(h, w, layer.alpha)
        return y, (h, w)

    def conv_fn(idx, layer, h):
        cols = im2col(h, layer.kernel, layer.stride)
        bsz, p, win = cols.shape
        w = _masked(layer)
        flat = nm.dense_forward(cols.reshape(bsz * p, win), w, layer.alpha)
        oh, ow = conv_out_hw(h.shape[2], h.shape[3], layer.kernel, layer.stride)
        y = np.moveaxis(flat.reshape(bsz, p, layer.out_channels), -1, 1).reshape(
            bsz, layer.out_channels, oh, ow)
        return y, (h.shape, cols, w)

    return _forward_stack(net, x, training, dense_fn, conv_fn, binarise_input=False)


def forward_real(net: Network, x) -> np.ndarray:
    """Inference forward for real-weight checkpoints; returns logits."""
    require_stage(net, "real", "pruned")
    logits, _ = _forward_real_impl(net, x, training=False)
    return logits


def forward_real_train(net: Network, x):
    require_stage(net, "real", "pruned")
    return _forward_real_impl(net, x, training=True)


def backward_real(net: Network, caches, dlogits):
    """Gradients for phase-1 training: weights, alpha and batch-norm parameters."""

    def dense_bwd(idx, layer, cache, d, grads):
        h, w = cache
        dx, dw, dalpha = nm.dense_backward(h, w, layer.alpha, d)
        grads[f"l{idx}.weights"] = dw * layer.prune_mask
        grads[f"l{idx}.alpha"] = np.array([dalpha])
        return dx

    def conv_bwd(idx, layer, cache, d, grads):
        x_shape, cols, w = cache
        bsz, p, win = cols.shape
        dflat = np.moveaxis(d, 1, -1).reshape(bsz * p, layer.out_channels)
        dcols, dw, dalpha = nm.dense_backward(cols.reshape(bsz * p, win), w, layer.alpha, dflat)
        grads[f"l{idx}.weights"] = dw * layer.prune_mask
        grads[f"l{idx}.alpha"] = np.array([dalpha])
        return col2im(dcols.reshape(bsz, p, win), x_shape, layer.kernel, layer.stride)

    grads, _ = _backward_stack(net, caches, dlogits, dense_bwd, conv_bwd)
    return grads


# ---------------------------------------------------------------------------
# binarised engine (phase 2); weights live in residual levels, inputs are +-1


def _binary_dots(layer, xt):
    """Per-level integer-exact dot products of +-1 inputs with masked level weights."""
    outs = []
    for w_b, _gamma in _level_arrays(layer):
        outs.append(xt @ (w_b * layer.prune_mask).T)
    return outs


def _forward_binary_impl(net, x, training):
    def dense_fn(idx, layer, h):
        s_list = _binary_dots(layer, h)
        gammas = [g for _w, g in layer.levels]
        y = combine_levels(s_list, gammas, layer.alpha)
        return y, (h,)

    def conv_fn(idx, layer, h):
        cols = im2col(h, layer.kernel, layer.stride)
        bsz, p, win = cols.shape
        flat = cols.reshape(bsz * p, win)
        s_list = _binary_dots(layer, flat)
        gammas = [g for _w, g in layer.levels]
        y = combine_levels(s_list, gammas, layer.alpha)
        oh, ow = conv_out_hw(h.shape[2], h.shape[3], layer.kernel, layer.stride)
        y = np.moveaxis(y.reshape(bsz, p, layer.out_channels), -1, 1).reshape(
            bsz, layer.out_channels, oh, ow)
        return y, (h.shape, flat, (bsz, p))

    return _forward_stack(net, x, training, dense_fn, conv_fn, binarise_input=True)


def forward_binary(net: Network, x) -> np.ndarray:
    """Inference forward for residual-binarised checkpoints; returns logits."""
    require_stage(net, "binarised")
    logits, _ = _forward_binary_impl(net, x, training=False)
    return logits


def forward_binary_train(net: Network, x):
    require_stage(net, "binarised")
    return _forward_binary_impl(net, x, training=True)


def _reconstructed(layer):
    rec = np.zeros_like(layer.weights)
    for w_b, g in _level_arrays(layer):
        rec += g * w_b
    return rec * layer.prune_mask


def backward_binary(net: Network, caches, dlogits):
    """STE gradients for phase 2: the latent real weights receive the gradient of
    the reconstructed binary weights, clip-gated at |w| <= 1; level scales are
    refreshed in closed form by the training loop, not trained here."""

    def dense_bwd(idx, layer, cache, d, grads):
        (xt,) = cache
        rec = _reconstructed(layer)
        dw = layer.alpha * (d.T @ xt)
        grads[f"l{idx}.weights"] = dw * layer.prune_mask * (np.abs(layer.weights) <= 1.0)
        return layer.alpha * (d @ rec)

    def conv_bwd(idx, layer, cache, d, grads):
        x_shape, flat, (bsz, p) = cache
        rec = _reconstructed(layer)
        dflat = np.moveaxis(d, 1, -1).reshape(bsz * p, layer.out_channels)
        dw = layer.alpha * (dflat.T @ flat)
        grads[f"l{idx}.weights"] = dw * layer.prune_mask * (np.abs(layer.weights) <= 1.0)
        dcols = layer.alpha * (dflat @ rec)
        return col2im(dcols.reshape(bsz, p, -1), x_shape, layer.kernel, layer.stride)

    grads, _ = _backward_stack(net, caches, dlogits, dense_bwd, conv_bwd)
    return grads


# ---------------------------------------------------------------------------
# batch-norm folding for the hardware path


def fold_batchnorm(bn: BatchNormLayer, upstream_scale: float):
    """Fold inference-mode batch norm + sign into per-neuron thresholds:
    sign(bn(scale*s)) == sign(tau - s) if flip else sign(s - tau)."""
    if upstream_scale <= 0.0 or not np.isfinite(upstream_scale):
        raise FoldError(f"upstream scale must be positive and finite, got {upstream_scale}")
    zero = np.flatnonzero(bn.gamma == 0.0)
    if zero.size:
        raise FoldError(f"batch-norm gamma is zero for neuron(s) {zero.tolist()}; cannot fold")
    sigma = np.sqrt(bn.running_var + bn.eps)
    tau = (bn.running_mean - bn.beta * sigma / bn.gamma) / upstream_scale
    flip = bn.gamma < 0.0
    return tau, flip


def head_affine(bn: BatchNormLayer, upstream_scale: float):
    """Real affine applied to the head layer's scaled popcount u:
    logits = a*u + c with a = scale*gamma/sigma."""
    sigma = np.sqrt(bn.running_var + bn.eps)
    a = upstream_scale * bn.gamma / sigma
    c = bn.beta - bn.gamma * bn.running_mean / sigma
    return a, c


# ---------------------------------------------------------------------------
# expanded engine (phase 3): interpolated LUT nodes on binarised inputs


def _interp_channel_sums(lut, flat):
    """Per-plane node sums for all channels of one expanded layer.

    flat: (rows, window) of +-1; returns s_list of (rows, C) arrays plus the
    per-channel caches (basis, gathered inputs) for backprop.
    """
    from . import expand as ex

    rows = flat.shape[0]
    n_planes = lut.gammas.shape[0]
    n_ch = len(lut.channels)
    s_list = [np.zeros((rows, n_ch)) for _ in range(n_planes)]
    ch_caches = []
    for c, ch in enumerate(lut.channels):
        xg = flat[:, ch.indices]                        # (rows, N~, K)
        basis = ex.interp_basis(xg, lut.k)              # (rows, N~, 2**K)
        for b in range(n_planes):
            s_list[b][:, c] = np.einsum("rnv,nv->r", basis, ch.coeffs[b])
        ch_caches.append((xg, basis))
    return s_list, ch_caches


def _forward_interp_impl(net, x, training):
    def dense_fn(idx, layer, h):
        if layer.lut is None:
            s_list = _binary_dots(layer, h)
            gammas = [g for _w, g in layer.levels]
            y = combine_levels(s_list, gammas, layer.alpha)
            return y, ("tm", h)
        s_list, ch_caches = _interp_channel_sums(layer.lut, h)
        y = combine_levels(s_list, layer.lut.gammas, layer.alpha)
        return y, ("lut", h, s_list, ch_caches, None)

    def conv_fn(idx, layer, h):
        cols = im2col(h, layer.kernel, layer.stride)
        bsz, p, win = cols.shape
        flat = cols.reshape(bsz * p, win)
        if layer.lut is None:
            s_list = _binary_dots(layer, flat)
            gammas = [g for _w, g in layer.levels]
            y = combine_levels(s_list, gammas, layer.alpha)
            cache = ("tm", h.shape, flat, (bsz, p))
        else:
            s_list, ch_caches = _interp_channel_sums(layer.lut, flat)
            y = combine_levels(s_list, layer.lut.gammas, layer.alpha)
            cache = ("lut", h.shape, flat, (bsz, p), s_list, ch_caches)
        oh, ow = conv_out_hw(h.shape[2], h.shape[3], layer.kernel, layer.stride)
        y = np.moveaxis(y.reshape(bsz, p, layer.out_channels), -1, 1).reshape(
            bsz, layer.out_channels, oh, ow)
        return y, cache

    return _forward_stack(net, x, training, dense_fn, conv_fn, binarise_input=True)


def forward_lut(net: Network, x):
    """Forward for LUT-form checkpoints.

    Expanded stage: interpolated node functions on binarised inputs; returns
    real logits.  Hardened stage: truth-table lookups with quantised scales and
    folded thresholds; returns the output layer's {-1,+1} threshold bits,
    bit-exact with the lowered netlist.
    """
    require_stage(net, "expanded", "hardened")
    if net.stage == "expanded":
        logits, _ = _forward_interp_impl(net, x, training=False)
        return logits
    return forward_hardened_bits(net, x)


def forward_lut_train(net: Network, x):
    require_stage(net, "expanded")
    return _forward_interp_impl(net, x, training=True)


def _backward_lut_layer(layer, cache, d, grads, idx):
    """Gradient of one expanded layer: coefficients, plane scales and inputs."""
    from . import expand as ex

    lut = layer.lut
    kind = cache[0]
    if kind == "tm":
        raise AssertionError("tm cache routed to lut backward")
    if len(cache) == 5:   # dense
        _tag, flat, s_list, ch_caches, _ = cache
        drows = d
    else:                 # conv
        _tag, x_shape, flat, (bsz, p), s_list, ch_caches = cache
        drows = np.moveaxis(d, 1, -1).reshape(bsz * p, -1)
    n_planes = lut.gammas.shape[0]
    alpha = layer.alpha
    dgammas = np.zeros(n_planes)
    for b in range(n_planes):
        dgammas[b] = alpha * float(np.sum(drows * s_list[b]))
    dflat = np.zeros_like(flat)
    rows_idx = None
    for c, ch in enumerate(lut.channels):
        xg, basis = ch_caches[c]
        dch = drows[:, c]                               # (rows,)
        dcoeffs = np.empty_like(ch.coeffs)
        for b in range(n_planes):
            dcoeffs[b] = alpha * lut.gammas[b] * np.einsum("r,rnv->nv", dch, basis)
        grads[f"l{idx}.lut.c{c}"] = dcoeffs
        ceff = np.einsum("b,bnv->nv", alpha * lut.gammas, ch.coeffs)
        partial = ex.interp_dx_partial(xg, lut.k)       # (rows, N~, 2**K, K)
        dxg = np.einsum("nv,rnvk->rnk", ceff, partial) * dch[:, None, None]
        if rows_idx is None:
            rows_idx = np.arange(flat.shape[0])[:, None, None]
        np.add.at(dflat, (rows_idx, ch.indices[None, :, :]), dxg)
    grads[f"l{idx}.lut.gammas"] = dgammas
    if len(cache) == 5:
        return dflat
    return col2im(dflat.reshape(bsz, p, -1), x_shape, layer.kernel, layer.stride)


def backward_lut(net: Network, caches, dlogits):
    """Phase-3 gradients: LUT coefficients and plane scales for expanded layers,
    STE latent-weight gradients for time-multiplexed layers, batch-norm
    parameters everywhere.  alpha stays frozen after phase 1."""

    def dense_bwd(idx, layer, cache, d, grads):
        if cache[0] == "tm":
            _tag, xt = cache
            rec = _reconstructed(layer)
            dw = layer.alpha * (d.T @ xt)
            grads[f"l{idx}.weights"] = dw * layer.prune_mask * (np.abs(layer.weights) <= 1.0)
            return layer.alpha * (d @ rec)
        return _backward_lut_layer(layer, cache, d, grads, idx)

    def conv_bwd(idx, layer, cache, d, grads):
        if cache[0] == "tm":
            _tag, x_shape, flat, (bsz, p) = cache
            rec = _reconstructed(layer)
            dflat = np.moveaxis(d, 1, -1).reshape(bsz * p, -1)
            dw = layer.alpha * (dflat.T @ flat)
            grads[f"l{idx}.weights"] = dw * layer.prune_mask * (np.abs(layer.weights) <= 1.0)
            dcols = layer.alpha * (dflat @ rec)
            return col2im(dcols.reshape(bsz, p, -1), x_shape, layer.kernel, layer.stride)
        return _backward_lut_layer(layer, cache, d, grads, idx)

    grads, _ = _backward_stack(net, caches, dlogits, dense_bwd, conv_bwd)
    return grads


# ---------------------------------------------------------------------------
# hardened engines


def _mask_sums(lut, flat_bits):
    from . import expand as ex

    rows = flat_bits.shape[0]
    n_planes = lut.gammas.shape[0]
    n_ch = len(lut.channels)
    s_list = [np.zeros((rows, n_ch), dtype=np.int64) for _ in range(n_planes)]
    for c, ch in enumerate(lut.channels):
        if ch.masks is None:
            raise StageError(f"hardened forward requires masks (channel {c})")
        idx = ex.vertex_index(flat_bits[:, ch.indices])   # (rows, N~)
        node_ax = np.arange(ch.n_nodes)[None, :]
        for b in range(n_planes):
            g = ch.masks[b][node_ax, idx]                 # (rows, N~) of +-1
            s_list[b][:, c] = g.sum(axis=1)
    return s_list


def _level_int_dots(layer, flat_bits):
    outs = []
    for w_b, _g in _level_arrays(layer):
        w_eff = (w_b * layer.prune_mask).astype(np.int64)
        outs.append(flat_bits.astype(np.int64) @ w_eff.T)
    return outs


def _hardened_layer_sums(layer, flat_bits):
    if layer.lut is not None:
        return _mask_sums(layer.lut, flat_bits), layer.lut.gammas
    gammas = np.array([g for _w, g in _level_arrays(layer)])
    return _level_int_dots(layer, flat_bits), gammas


def forward_hardened_logits(net: Network, x) -> np.ndarray:
    """Real-scaled forward of a hardened network: hidden layers use the truth
    tables with exact batch-norm sign thresholds, the head layer applies the
    real batch-norm affine to its scaled popcount.  Bit-compatible with
    forward_binary for K=1 buffer/inverter masks."""
    require_stage(net, "hardened")

    def dense_fn(idx, layer, h):
        s_list, gammas = _hardened_layer_sums(layer, h)
        y = combine_levels([s.astype(np.float64) for s in s_list], gammas, layer.alpha)
        return y, None

    def conv_fn(idx, layer, h):
        cols = im2col(h, layer.kernel, layer.stride)
        bsz, p, win = cols.shape
        s_list, gammas = _hardened_layer_sums(layer, cols.reshape(bsz * p, win))
        y = combine_levels([s.astype(np.float64) for s in s_list], gammas, layer.alpha)
        oh, ow = conv_out_hw(h.shape[2], h.shape[3], layer.kernel, layer.stride)
        y = np.moveaxis(y.reshape(bsz, p, layer.out_channels), -1, 1).reshape(
            bsz, layer.out_channels, oh, ow)
        return y, None

    logits, _ = _forward_stack(net, x, False, dense_fn, conv_fn, binarise_input=True)
    return logits


def forward_hardened_bits(net: Network, x) -> np.ndarray:
    """Quantised reference of the lowered netlist: integer popcount sums, scales
    and thresholds quantised to net.fx fractional bits, every layer (including
    the head) emitting {-1,+1} threshold bits."""
    require_stage(net, "hardened")
    if net.fx is None:
        raise StageError("hardened network carries no fixed-point spec")
    frac = net.fx.frac_bits
    x = nm.as_tensor(x)
    bsz = x.shape[0]
    h = nm.sign_pm1(x.reshape((bsz,) + tuple(net.input_shape)))
    for idx, layer in enumerate(net.layers):
        if layer.kind in ("batchnorm", "softmax"):
            continue
        if layer.kind == "maxpool":
            h = _pool_forward(h, layer.size)
            continue
        if layer.tau is None:
            raise StageError(f"layer l{idx} has no folded thresholds; harden first")
        if layer.kind == "dense":
            if h.ndim > 2:
                h = h.reshape(bsz, -1)
            s_list, gammas = _hardened_layer_sums(layer, h)
            acc = np.zeros_like(s_list[0])
            for b, s in enumerate(s_list):
                acc += quantise(gammas[b], frac) * s
            q_tau = np.array([quantise(t, frac) for t in layer.tau], dtype=np.int64)
            ge = acc >= q_tau[None, :]
            le = acc <= q_tau[None, :]
            h = np.where(layer.flip[None, :], np.where(le, 1.0, -1.0), np.where(ge, 1.0, -1.0))
        else:
            cols = im2col(h, layer.kernel, layer.stride)
            bsz2, p, win = cols.shape
            s_list, gammas = _hardened_layer_sums(layer, cols.reshape(bsz2 * p, win))
            acc = np.zeros_like(s_list[0])
            for b, s in enumerate(s_list):
                acc += quantise(gammas[b], frac) * s
            q_tau = np.array([quantise(t, frac) for t in layer.tau], dtype=np.int64)
            ge = acc >= q_tau[None, :]
            le = acc <= q_tau[None, :]
            bits = np.where(layer.flip[None, :], np.where(le, 1.0, -1.0), np.where(ge, 1.0, -1.0))
            oh, ow = conv_out_hw(h.shape[2], h.shape[3], layer.kernel, layer.stride)
            h = np.moveaxis(bits.reshape(bsz2, p, layer.out_channels), -1, 1).reshape(
                bsz2, layer.out_channels, oh, ow)
    return h
