"""Convolutional denoising autoencoder with a softmax clustering head.

The network has ``L = len(conv_layers) + 1`` encoder layers (convolutions
followed by one dense layer producing the embedding) and a mirrored decoder
(a dense layer followed by transposed convolutions). Layer outputs are indexed
``0..L`` with index 0 the input image, so ``decoder layer l`` maps
``z_hat[l]`` back to ``z_hat[l - 1]``.

The noisy and clean encoders are two evaluations of the same weight arrays in
``DepictModel.params``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .clustering import m_step_loss_and_grads
from .nn import ConvSpec, ShapeError


@dataclass(frozen=True)
class ArchitectureSpec:
    input_shape: tuple[int, int, int]
    conv_layers: tuple[ConvSpec, ...]
    embedding_dim: int
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_layers", tuple(self.conv_layers))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (C, H, W) with positive extents, got {self.input_shape}")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        self.validate()

    @property
    def depth(self) -> int:
        return len(self.conv_layers) + 1

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample shapes of ``z[0] .. z[L]``."""
        shapes = [self.input_shape]
        c, h, w = self.input_shape
        for spec in self.conv_layers:
            h, w = spec.output_size(h, w)
            c = spec.out_maps
            shapes.append((c, h, w))
        shapes.append((self.embedding_dim,))
        return shapes

    def validate(self):
        shapes = self.layer_shapes()
        for l, spec in enumerate(self.conv_layers, start=1):
            _, h, w = shapes[l]
            mirrored = spec.transpose_output_size(h, w)
            if mirrored != shapes[l - 1][1:]:
                raise ShapeError(
                    f"decoder layer {l} would produce {mirrored}, expected {shapes[l - 1][1:]}; "
                    "adjust kernel, stride or padding"
                )

    def to_text(self) -> str:
        lines = [
            f"name={self.name}",
            "input_shape=" + ",".join(map(str, self.input_shape)),
            f"embedding_dim={self.embedding_dim}",
            f"conv_layers={len(self.conv_layers)}",
        ]
        for i, s in enumerate(self.conv_layers, start=1):
            lines.append(
                f"conv{i}={s.out_maps},{s.kernel[0]},{s.kernel[1]},{s.stride},{s.padding}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ArchitectureSpec":
        kv = dict(
            line.split("=", 1) for line in text.strip().splitlines() if line.strip()
        )
        convs = []
        for i in range(1, int(kv["conv_layers"]) + 1):
            maps, kh, kw, stride, pad = (int(v) for v in kv[f"conv{i}"].split(","))
            convs.append(ConvSpec(maps, (kh, kw), stride, pad))
        return cls(
            input_shape=tuple(int(v) for v in kv["input_shape"].split(",")),
            conv_layers=tuple(convs),
            embedding_dim=int(kv["embedding_dim"]),
            name=kv.get("name", "custom"),
        )


def _table_row(conv1, conv2):
    return tuple(ConvSpec(50, (k, k), 2, p) for k, p in (conv1, conv2))


# (kernel, padding) per conv layer; 50 maps and stride 2 everywhere
_ARCHITECTURES = {
    "MNIST-full": ((1, 28, 28), _table_row((4, 0), (5, 2)), 10),
    "MNIST-test": ((1, 28, 28), _table_row((4, 0), (5, 2)), 10),
    "USPS": ((1, 16, 16), _table_row((4, 0), (5, 2)), 10),
    "FRGC": ((3, 32, 32), _table_row((4, 2), (5, 2)), 20),
    "YTF": ((3, 55, 55), _table_row((5, 2), (4, 0)), 41),
    "CMU-PIE": ((1, 32, 32), _table_row((4, 2), (5, 2)), 68),
}


def _canonical(name: str) -> str:
    key = name.replace("_", "-").lower()
    for known in _ARCHITECTURES:
        if known.lower() == key:
            return known
    raise KeyError(f"unknown dataset {name!r}; known: {sorted(_ARCHITECTURES)}")


def arch_for_dataset(name: str, n_clusters: int | None = None) -> ArchitectureSpec:
    """Per-dataset architecture. ``n_clusters`` overrides the embedding width."""
    key = _canonical(name)
    shape, convs, k = _ARCHITECTURES[key]
    return ArchitectureSpec(shape, convs, n_clusters or k, name=key)


def arch_for_shape(input_shape, n_clusters: int) -> ArchitectureSpec:
    """Pick the table architecture whose input size matches ``input_shape``.

    Falls back to two stride-2 convolutions with padding chosen so the
    decoder mirrors the encoder.
    """
    c, h, w = input_shape
    for key, (shape, convs, _) in _ARCHITECTURES.items():
        if shape[1:] == (h, w):
            return ArchitectureSpec((c, h, w), convs, n_clusters, name=f"{key}-like")
    # generic: odd kernels keep the mirror exact when the extent parity matches
    convs = []
    cur = (h, w)
    for _ in range(2):
        k = 5 if cur[0] % 2 else 4
        pad = 2 if k == 5 else 1
        spec = ConvSpec(50, (k, k), 2, pad)
        cur = spec.output_size(*cur)
        convs.append(spec)
    return ArchitectureSpec((c, h, w), tuple(convs), n_clusters, name="generic")


def encoder_activation(arch: ArchitectureSpec, l: int) -> str:
    return "tanh" if l == arch.depth else "leaky_relu"


def decoder_activation(arch: ArchitectureSpec, l: int) -> str:
    # decoder layer l produces z_hat[l-1]; tanh on the first decoder layer and the output
    return "tanh" if l in (arch.depth, 1) else "leaky_relu"


class DepictModel:
    """Parameter container: encoder, decoder and softmax weights plus Adam state."""

    def __init__(self, arch: ArchitectureSpec, params: dict[str, np.ndarray]):
        self.arch = arch
        self.params = params
        self.optim: dict[str, nn.AdamState] = {}
        expected = self.parameter_shapes(arch)
        for name, shape in expected.items():
            if name not in params:
                raise KeyError(f"missing parameter {name}")
            if params[name].shape != shape:
                raise ShapeError(f"{name}: shape {params[name].shape} != {shape}")

    @staticmethod
    def parameter_shapes(arch: ArchitectureSpec) -> dict[str, tuple[int, ...]]:
        shapes = arch.layer_shapes()
        L = arch.depth
        out = {}
        for l in range(1, L):
            spec = arch.conv_layers[l - 1]
            c_in = shapes[l - 1][0]
            kernel = (spec.out_maps, c_in, *spec.kernel)
            out[f"encoder.{l}.weight"] = kernel
            out[f"encoder.{l}.bias"] = (spec.out_maps,)
            out[f"decoder.{l}.weight"] = kernel
            out[f"decoder.{l}.bias"] = (c_in,)
        flat = int(np.prod(shapes[L - 1]))
        out[f"encoder.{L}.weight"] = (flat, arch.embedding_dim)
        out[f"encoder.{L}.bias"] = (arch.embedding_dim,)
        out[f"decoder.{L}.weight"] = (arch.embedding_dim, flat)
        out[f"decoder.{L}.bias"] = (flat,)
        out["softmax.theta"] = (arch.embedding_dim, arch.embedding_dim)
        return out

    @classmethod
    def initialize(cls, arch: ArchitectureSpec, rng: np.random.Generator) -> "DepictModel":
        params = {}
        for name, shape in cls.parameter_shapes(arch).items():
            if name.endswith(".bias"):
                params[name] = np.zeros(shape, dtype=nn.DTYPE)
                continue
            if len(shape) == 4:
                receptive = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
                if name.startswith("decoder."):
                    fan_in, fan_out = fan_out, fan_in
            else:
                fan_in, fan_out = shape
            params[name] = nn.xavier_init(shape, fan_in, fan_out, rng)
        return cls(arch, params)

    @property
    def n_clusters(self) -> int:
        return self.params["softmax.theta"].shape[1]

    def copy(self) -> "DepictModel":
        other = DepictModel(self.arch, {k: v.copy() for k, v in self.params.items()})
        other.optim = {
            k: nn.AdamState(
                s.first_moment.copy(), s.second_moment.copy(), s.learning_rate,
                s.beta1, s.beta2, s.epsilon, s.step,
            )
            for k, s in self.optim.items()
        }
        return other

    def apply_gradients(self, grads: dict[str, np.ndarray], learning_rate=1e-4,
                        beta1=0.9, beta2=0.999, epsilon=1e-8):
        for name in sorted(grads):
            state = self.optim.get(name)
            if state is None:
                state = self.optim[name] = nn.AdamState.like(
                    self.params[name], learning_rate=learning_rate,
                    beta1=beta1, beta2=beta2, epsilon=epsilon,
                )
            state.learning_rate = learning_rate
            nn.adam_step(self.params[name], grads[name], state)


@dataclass
class EncoderPass:
    layers: list  # z[0..L] after dropout
    pre: list  # pre-activations, index 0 unused
    act: list  # post-activation, pre-dropout, index 0 unused
    masks: list  # dropout mask per layer 0..L


@dataclass
class DecoderPass:
    layers: dict  # l -> z_hat[l] for l = 0..L (L is the decoder input)
    pre: dict = field(default_factory=dict)


@dataclass
class PathwayOutputs:
    noisy_layers: list
    clean_layers: list
    recon_layers: list
    masks: list


def _check_input(model, x):
    expected = model.arch.input_shape
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeError(f"input shape {x.shape} does not match (B, {', '.join(map(str, expected))})")


def _encoder_layer(model, l, inp):
    arch, p = model.arch, model.params
    if l < arch.depth:
        return nn.conv2d_forward(inp, p[f"encoder.{l}.weight"], p[f"encoder.{l}.bias"],
                                 arch.conv_layers[l - 1])
    return nn.dense_forward(inp.reshape(inp.shape[0], -1), p[f"encoder.{l}.weight"],
                            p[f"encoder.{l}.bias"])


def _encoder_layer_backward(model, l, grad_pre, inp, input_grad=True):
    arch, p = model.arch, model.params
    w = p[f"encoder.{l}.weight"]
    if l < arch.depth:
        return nn.conv2d_backward(grad_pre, inp, w, arch.conv_layers[l - 1], input_grad=input_grad)
    gx, gw, gb = nn.dense_backward(grad_pre, inp.reshape(inp.shape[0], -1), w)
    return gx.reshape(inp.shape), gw, gb


def _decoder_layer(model, l, inp):
    arch, p = model.arch, model.params
    if l == arch.depth:
        out = nn.dense_forward(inp, p[f"decoder.{l}.weight"], p[f"decoder.{l}.bias"])
        return out.reshape(inp.shape[0], *arch.layer_shapes()[l - 1])
    return nn.conv2d_transpose_forward(inp, p[f"decoder.{l}.weight"], p[f"decoder.{l}.bias"],
                                       arch.conv_layers[l - 1])


def _decoder_layer_backward(model, l, grad_pre, inp):
    arch, p = model.arch, model.params
    w = p[f"decoder.{l}.weight"]
    if l == arch.depth:
        return nn.dense_backward(grad_pre.reshape(grad_pre.shape[0], -1), inp, w)
    return nn.conv2d_transpose_backward(grad_pre, inp, w, arch.conv_layers[l - 1])


def _activate(name, pre):
    return nn.ACTIVATIONS[name][0](pre)


def _activate_backward(name, grad, pre, post):
    return nn.ACTIVATIONS[name][1](grad, pre, post)


def noisy_encode(model: DepictModel, x, dropout_rate, rng, upto=None) -> EncoderPass:
    """Corrupted encoder: dropout on the input and on every layer output."""
    _check_input(model, x)
    upto = model.arch.depth if upto is None else upto
    z, mask = nn.dropout(x, dropout_rate, rng)
    out = EncoderPass([z], [None], [None], [mask])
    for l in range(1, upto + 1):
        pre = _encoder_layer(model, l, z)
        act = _activate(encoder_activation(model.arch, l), pre)
        z, mask = nn.dropout(act, dropout_rate, rng)
        out.layers.append(z)
        out.pre.append(pre)
        out.act.append(act)
        out.masks.append(mask)
    return out


def clean_encode(model: DepictModel, x, upto=None) -> list:
    """Deterministic encoder; returns ``[z[0], ..., z[L]]`` with ``z[0] = x``."""
    _check_input(model, x)
    upto = model.arch.depth if upto is None else upto
    layers = [x]
    for l in range(1, upto + 1):
        layers.append(_activate(encoder_activation(model.arch, l), _encoder_layer(model, l, layers[-1])))
    return layers


def embed(model: DepictModel, x, batch_size=256) -> np.ndarray:
    """Clean embedding ``z[L]`` computed in chunks."""
    chunks = [clean_encode(model, x[i:i + batch_size])[-1] for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks, axis=0)


def decode(model: DepictModel, top, stop=0) -> DecoderPass:
    """Decoder pathway from the (noisy) embedding down to ``z_hat[stop]``."""
    L = model.arch.depth
    if top.shape[1:] != (model.arch.embedding_dim,):
        raise ShapeError(f"decoder input shape {top.shape} != (B, {model.arch.embedding_dim})")
    out = DecoderPass({L: top})
    z = top
    for l in range(L, stop, -1):
        pre = _decoder_layer(model, l, z)
        z = _activate(decoder_activation(model.arch, l), pre)
        out.pre[l - 1] = pre
        out.layers[l - 1] = z
    return out


def forward(model: DepictModel, x, dropout_rate, rng) -> PathwayOutputs:
    """All three pathways for one batch."""
    enc = noisy_encode(model, x, dropout_rate, rng)
    dec = decode(model, enc.layers[-1])
    clean = clean_encode(model, x)
    recon = [dec.layers[l] for l in range(model.arch.depth)]
    return PathwayOutputs(enc.layers, clean, recon, enc.masks)


def reconstruction_loss(clean_layers, recon_layers):
    """Per-layer normalised squared error, averaged over the batch.

    ``loss = (1/B) sum_i sum_l ||z_il - z_hat_il||^2 / |z_il|``. Returns
    ``(loss, grads)`` with ``grads[l]`` the gradient w.r.t. ``recon_layers[l]``;
    the clean layers are treated as constants.
    """
    if len(clean_layers) != len(recon_layers):
        raise ShapeError(f"{len(clean_layers)} clean layers vs {len(recon_layers)} reconstructions")
    loss = 0.0
    grads = []
    for l, (z, z_hat) in enumerate(zip(clean_layers, recon_layers)):
        if z.shape != z_hat.shape:
            raise ShapeError(f"layer {l}: clean shape {z.shape} != reconstruction shape {z_hat.shape}")
        batch = z.shape[0]
        size = z[0].size
        diff = z_hat - z
        loss += float(np.sum(diff * diff)) / (size * batch)
        grads.append(diff * (2.0 / (size * batch)))
    return loss, grads


def decoder_backward(model, dec: DecoderPass, recon_grads: dict, grads: dict, stop=0):
    """Backprop through decoder layers ``stop+1..L``; returns the gradient at the decoder input."""
    arch = model.arch
    L = arch.depth
    g = recon_grads.get(stop, np.zeros_like(dec.layers[stop]))
    for l in range(stop + 1, L + 1):
        g = _activate_backward(decoder_activation(arch, l), g, dec.pre[l - 1], dec.layers[l - 1])
        g, gw, gb = _decoder_layer_backward(model, l, g, dec.layers[l])
        grads[f"decoder.{l}.weight"] = gw
        grads[f"decoder.{l}.bias"] = gb
        if l in recon_grads:
            g = g + recon_grads[l]
    return g


def encoder_backward(model, enc: EncoderPass, grad_top, grads: dict, start=1):
    """Backprop through the noisy encoder from its top layer down to layer ``start``."""
    arch = model.arch
    g = grad_top
    for l in range(len(enc.layers) - 1, start - 1, -1):
        g = g * enc.masks[l]
        g = _activate_backward(encoder_activation(arch, l), g, enc.pre[l], enc.act[l])
        g, gw, gb = _encoder_layer_backward(model, l, g, enc.layers[l - 1], input_grad=l > 1)
        grads[f"encoder.{l}.weight"] = gw
        grads[f"encoder.{l}.bias"] = gb
    return g


@dataclass
class StepLoss:
    cross_entropy: float = 0.0
    reconstruction: float = 0.0

    @property
    def total(self) -> float:
        return self.cross_entropy + self.reconstruction


def joint_loss_and_grads(model: DepictModel, x, dropout_rate, rng, targets=None,
                         recon_layers=None, clustering_weight=1.0, clean_layers=None):
    """Joint objective on one minibatch and its parameter gradients.

    ``targets`` (B x K, constants) enables the cross-entropy term on the noisy
    pathway; ``recon_layers`` selects the reconstruction terms (default: all
    layers ``0..L-1``, empty tuple for none). ``clean_layers`` overrides the
    clean-pathway targets, which are constants for differentiation either way.
    """
    L = model.arch.depth
    recon_layers = tuple(range(L)) if recon_layers is None else tuple(recon_layers)
    enc = noisy_encode(model, x, dropout_rate, rng)
    top = enc.layers[L]
    grads: dict[str, np.ndarray] = {}
    loss = StepLoss()
    grad_top = np.zeros_like(top)
    if targets is not None and clustering_weight:
        ce, g_theta, g_z = m_step_loss_and_grads(targets, top, model.params["softmax.theta"])
        loss.cross_entropy = clustering_weight * ce
        grads["softmax.theta"] = clustering_weight * g_theta
        grad_top += clustering_weight * g_z
    if recon_layers:
        stop = min(recon_layers)
        dec = decode(model, top, stop=stop)
        clean = clean_layers if clean_layers is not None else clean_encode(model, x, upto=max(recon_layers))
        loss.reconstruction, rg = reconstruction_loss(
            [clean[l] for l in recon_layers], [dec.layers[l] for l in recon_layers]
        )
        grad_top += decoder_backward(model, dec, dict(zip(recon_layers, rg)), grads, stop=stop)
    encoder_backward(model, enc, grad_top, grads)
    return loss, grads


def layerwise_loss_and_grads(model: DepictModel, l, inputs, dropout_rate, rng):
    """Greedy denoising loss for encoder/decoder pair ``l`` on fixed lower-layer outputs.

    ``inputs`` are clean ``z[l-1]`` values; they are corrupted with dropout,
    encoded by layer ``l`` (with dropout), decoded by decoder layer ``l`` and
    compared to the uncorrupted inputs.
    """
    arch = model.arch
    z_in, mask_in = nn.dropout(inputs, dropout_rate, rng)
    pre = _encoder_layer(model, l, z_in)
    act = _activate(encoder_activation(arch, l), pre)
    h, mask = nn.dropout(act, dropout_rate, rng)
    dec_pre = _decoder_layer(model, l, h)
    recon = _activate(decoder_activation(arch, l), dec_pre)
    loss, (g,) = reconstruction_loss([inputs], [recon])
    grads = {}
    g = _activate_backward(decoder_activation(arch, l), g, dec_pre, recon)
    g, grads[f"decoder.{l}.weight"], grads[f"decoder.{l}.bias"] = _decoder_layer_backward(model, l, g, h)
    g = _activate_backward(encoder_activation(arch, l), g * mask, pre, act)
    _, grads[f"encoder.{l}.weight"], grads[f"encoder.{l}.bias"] = _encoder_layer_backward(
        model, l, g, z_in, input_grad=False)
    return loss, grads


# Checkpoint layout (all integers little-endian):
#   8 bytes  magic b"DEPICTCK"
#   u32      format version (1)
#   u32      byte length of the architecture text, then that many UTF-8 bytes
#   u32      number of tensors, then per tensor:
#              u16 name length, UTF-8 name, u8 ndim, ndim x u32 extents,
#              prod(extents) x float64 little-endian, row-major
CHECKPOINT_MAGIC = b"DEPICTCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: DepictModel, path):
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    arch = model.arch.to_text().encode()
    buf.write(struct.pack("<I", len(arch)))
    buf.write(arch)
    buf.write(struct.pack("<I", len(model.params)))
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> DepictModel:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {data[:8]!r})")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n,) = take("<I")
    arch = ArchitectureSpec.from_text(data[pos:pos + n].decode())
    pos += n
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (n,) = take("<H")
        name = data[pos:pos + n].decode()
        pos += n
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape)) * 8
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated tensor {name} at byte {pos}")
        params[name] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(nn.DTYPE)
        pos += size
    return DepictModel(arch, params)
