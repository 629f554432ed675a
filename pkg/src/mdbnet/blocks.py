"""Residual units (pre-activation, ITRM, PCR) and the dual-head network.

3D stream layout for a grid of dims ``D`` (all widths configurable)::

    stem conv                      D        widths[0]   <- early fusion
    down1 + residual block         D/2      widths[1]
    down2 + residual block         D/4      widths[2]   (skip)
    down3                          D/8      widths[2]   <- mid fusion
    bottleneck residual block      D/8
    upsample + conv + skip, block  D/4
    conv + block                   D/4                  <- late fusion
    BN-ReLU-1x1x1 classifier       D/4      n_classes

Mid/late fusion bring the projected 2D features down to the stage
resolution through chains of stride-2 PCR blocks.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ProviderFileMissing, ShapeMismatch

N_CLASSES = 12


class FusionStrategy(str, enum.Enum):
    EARLY = "early"
    MID = "mid"
    LATE = "late"


class BlockVariant(str, enum.Enum):
    PREACT = "preact"
    ITRM = "itrm"


@dataclass
class MdbNetConfig:
    grid_dims: tuple = (24, 16, 24)
    n_classes: int = N_CLASSES
    fusion: FusionStrategy = FusionStrategy.LATE
    block: BlockVariant = BlockVariant.ITRM
    widths: tuple = (16, 32, 64)
    feature_channels: int = 16
    head_channels: int = 16
    scale_factor: int = 4
    seed: int = 0

    def __post_init__(self):
        self.grid_dims = tuple(int(d) for d in self.grid_dims)
        self.widths = tuple(int(w) for w in self.widths)
        self.fusion = FusionStrategy(self.fusion)
        self.block = BlockVariant(self.block)
        if self.scale_factor != 4:
            raise ValueError("scale_factor is fixed at 4")
        if any(d % 8 for d in self.grid_dims):
            raise ShapeMismatch(f"grid dims {self.grid_dims} must be divisible by 8")
        if len(self.widths) != 3:
            raise ValueError("widths needs three stage widths")

    @property
    def output_dims(self) -> tuple:
        return tuple(d // self.scale_factor for d in self.grid_dims)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion"] = self.fusion.value
        d["block"] = self.block.value
        d["grid_dims"] = list(self.grid_dims)
        d["widths"] = list(self.widths)
        return d


class Module:
    """Attribute-discovered container of parameters and child modules."""

    training = True

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def modules(self):
        yield self
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def named_buffers(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, np.ndarray):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: buf.copy() for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeMismatch(f"{name}: {state[name].shape} vs {p.shape}")
            p.data = np.asarray(state[name], dtype=p.dtype).copy()
        for name, buf in buffers.items():
            buf[...] = state[name]

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _name(prefix, leaf):
    return f"{prefix}.{leaf}" if prefix else leaf


class Conv3d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=None, dtype=np.float32, name="", bias=True):
        kernel = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        fan_in = cin * int(np.prod(kernel))
        self.weight = Parameter((rng.standard_normal((cout, cin) + kernel) * np.sqrt(2.0 / fan_in)).astype(dtype),
                                _name(name, "weight"))
        self.bias = None
        if bias:
            self.bias = Parameter(np.zeros(cout, dtype=dtype), _name(name, "bias"), weight_decay_exempt=True)
        self.stride = stride
        self.padding = tuple(k // 2 for k in kernel) if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, dtype=np.float32, name="", bias=True):
        fan_in = cin * kernel * kernel
        init = rng.standard_normal((cout, cin, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        self.weight = Parameter(init.astype(dtype), _name(name, "weight"))
        self.bias = None
        if bias:
            self.bias = Parameter(np.zeros(cout, dtype=dtype), _name(name, "bias"), weight_decay_exempt=True)
        self.padding = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, 1, self.padding)


class BatchNorm(Module):
    def __init__(self, channels, dtype=np.float32, name="", momentum=0.1, eps=1e-5):
        self.scale = Parameter(np.ones(channels, dtype=dtype), _name(name, "scale"), weight_decay_exempt=True)
        self.shift = Parameter(np.zeros(channels, dtype=dtype), _name(name, "shift"), weight_decay_exempt=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.batch_norm(x, self.scale, self.shift, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class ResidualBlock(Module):
    """Full pre-activation residual unit; ``variant`` picks the identity path (x or tanh(x))."""

    def __init__(self, channels, variant, rng, dtype=np.float32, name=""):
        self.channels = channels
        self.variant = BlockVariant(variant)
        self.bn1 = BatchNorm(channels, dtype, _name(name, "bn1"))
        # conv1 feeds a batch norm, which cancels any bias
        self.conv1 = Conv3d(channels, channels, 3, rng, dtype=dtype, name=_name(name, "conv1"), bias=False)
        self.bn2 = BatchNorm(channels, dtype, _name(name, "bn2"))
        self.conv2 = Conv3d(channels, channels, 3, rng, dtype=dtype, name=_name(name, "conv2"))

    def residual(self, x: Tensor) -> Tensor:
        h = self.conv1(ad.relu(self.bn1(x)))
        return self.conv2(ad.relu(self.bn2(h)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"block expects {self.channels} channels, got shape {x.shape}")
        identity = ad.tanh(x) if self.variant is BlockVariant.ITRM else x
        return ad.add(identity, self.residual(x))


def preact_residual_forward(x: Tensor, block: ResidualBlock) -> Tensor:
    """``x + F(ReLU(BN(x)))``, whatever variant the block was built with."""
    if x.ndim != 5 or x.shape[1] != block.channels:
        raise ShapeMismatch(f"block expects {block.channels} channels, got shape {x.shape}")
    return ad.add(x, block.residual(x))


def itrm_forward(x: Tensor, block: ResidualBlock) -> Tensor:
    """``tanh(x) + F(ReLU(BN(x)))``."""
    if x.ndim != 5 or x.shape[1] != block.channels:
        raise ShapeMismatch(f"block expects {block.channels} channels, got shape {x.shape}")
    return ad.add(ad.tanh(x), block.residual(x))


PLANAR_KERNELS = ((1, 3, 3), (3, 1, 3), (3, 3, 1))


class PcrBlock(Module):
    """Planar convolution residual block.

    BN-ReLU, then three planar convolutions (one unit kernel axis each)
    separated by ReLU; the first one carries the stride. The shortcut is the
    identity unless the stride or channel count changes, in which case it is
    a strided 1x1x1 projection.
    """

    def __init__(self, cin, cout, rng, stride=1, dtype=np.float32, name=""):
        self.cin, self.cout, self.stride = cin, cout, stride
        self.bn = BatchNorm(cin, dtype, _name(name, "bn"))
        self.convs = [
            Conv3d(cin if i == 0 else cout, cout, k, rng, stride=stride if i == 0 else 1,
                   dtype=dtype, name=_name(name, f"planar{i}"))
            for i, k in enumerate(PLANAR_KERNELS)
        ]
        self.project = None
        if stride != 1 or cin != cout:
            self.project = Conv3d(cin, cout, 1, rng, stride=stride, padding=0, dtype=dtype,
                                  name=_name(name, "project"))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != self.cin:
            raise ShapeMismatch(f"PCR block expects {self.cin} channels, got shape {x.shape}")
        h = ad.relu(self.bn(x))
        for i, conv in enumerate(self.convs):
            h = conv(h if i == 0 else ad.relu(h))
        shortcut = x if self.project is None else self.project(x)
        return ad.add(shortcut, h)


def pcr_forward(x: Tensor, block: PcrBlock, stride=None) -> Tensor:
    if stride is not None and stride != block.stride:
        raise ShapeMismatch(f"block was built with stride {block.stride}, not {stride}")
    return block(x)


def fuse(stream: Tensor, projected: Tensor, strategy: FusionStrategy, pcr=()) -> Tensor:
    """Element-wise addition of projected features after their PCR downsampling chain."""
    feats = projected
    for block in pcr:
        feats = block(feats)
    if feats.shape != stream.shape:
        raise ShapeMismatch(f"{FusionStrategy(strategy).value} fusion: features {feats.shape} vs stream {stream.shape}")
    return ad.add(stream, feats)


class SemanticHead(Module):
    """Same-resolution 2D CNN: three conv-BN-ReLU layers give the features, a 1x1 conv gives logits."""

    def __init__(self, rng, channels=16, feature_channels=16, n_classes=N_CLASSES, dtype=np.float32):
        self.layers = [
            Conv2d(3, channels, 3, rng, dtype, name="head.conv0", bias=False),
            Conv2d(channels, channels, 3, rng, dtype, name="head.conv1", bias=False),
            Conv2d(channels, feature_channels, 3, rng, dtype, name="head.conv2", bias=False),
        ]
        self.norms = [
            BatchNorm(channels, dtype, "head.bn0"),
            BatchNorm(channels, dtype, "head.bn1"),
            BatchNorm(feature_channels, dtype, "head.bn2"),
        ]
        self.classifier = Conv2d(feature_channels, n_classes, 1, rng, dtype, name="head.classifier")

    def __call__(self, rgb: Tensor):
        if rgb.ndim != 4 or rgb.shape[1] != 3:
            raise ShapeMismatch(f"semantic head expects (N, 3, H, W), got {rgb.shape}")
        h = rgb
        for conv, bn in zip(self.layers, self.norms):
            h = ad.relu(bn(conv(h)))
        return h, self.classifier(h)


class FileFeatureProvider:
    """Precomputed 2D features/logits stored as ``<root>/<sample_id>.npz`` with arrays ``features`` and ``logits``."""

    def __init__(self, root):
        from pathlib import Path

        self.root = Path(root)

    def __call__(self, sample_id: str):
        path = self.root / f"{sample_id}.npz"
        if not path.exists():
            raise ProviderFileMissing(str(path))
        with np.load(path) as data:
            return Tensor(data["features"]), Tensor(data["logits"])


def semantic_head_forward(rgb, head):
    """Run the trainable head on an RGB batch, or fetch maps from a file provider by sample id."""
    if isinstance(head, FileFeatureProvider):
        return head(rgb)
    rgb = ad.as_tensor(rgb)
    squeeze = rgb.ndim == 3
    if squeeze:
        rgb = ad.reshape(rgb, (1,) + rgb.shape)
    feats, logits = head(rgb)
    if squeeze:
        feats = ad.reshape(feats, feats.shape[1:])
        logits = ad.reshape(logits, logits.shape[1:])
    return feats, logits


class MdbNet(Module):
    def __init__(self, config: MdbNetConfig, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(config.seed)
        w0, w1, w2 = config.widths
        fc = config.feature_channels
        variant = config.block

        self.head = SemanticHead(rng, config.head_channels, fc, config.n_classes, dtype)
        self.stem = Conv3d(1, w0, 3, rng, dtype=dtype, name="stem")
        self.down1 = Conv3d(w0, w1, 3, rng, stride=2, dtype=dtype, name="down1")
        self.enc1 = ResidualBlock(w1, variant, rng, dtype, "enc1")
        self.down2 = Conv3d(w1, w2, 3, rng, stride=2, dtype=dtype, name="down2")
        self.enc2 = ResidualBlock(w2, variant, rng, dtype, "enc2")
        self.down3 = Conv3d(w2, w2, 3, rng, stride=2, dtype=dtype, name="down3")
        self.bottleneck = ResidualBlock(w2, variant, rng, dtype, "bottleneck")
        self.up_conv = Conv3d(w2, w2, 3, rng, dtype=dtype, name="up_conv")
        self.dec1 = ResidualBlock(w2, variant, rng, dtype, "dec1")
        self.dec2_conv = Conv3d(w2, w2, 3, rng, dtype=dtype, name="dec2_conv")
        self.dec2 = ResidualBlock(w2, variant, rng, dtype, "dec2")
        self.out_bn = BatchNorm(w2, dtype, "out_bn")
        self.classifier = Conv3d(w2, config.n_classes, 1, rng, padding=0, dtype=dtype, name="classifier")

        if config.fusion is FusionStrategy.EARLY:
            if fc != w0:
                raise ShapeMismatch(f"early fusion needs feature_channels == widths[0] ({fc} vs {w0})")
            self.fusion_pcr = []
        else:
            chans = [fc, w1, w2] + ([w2] if config.fusion is FusionStrategy.MID else [])
            self.fusion_pcr = [
                PcrBlock(cin, cout, rng, stride=2, dtype=dtype, name=f"fusion_pcr.{i}")
                for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:]))
            ]
        for name, p in self.named_parameters():
            p.name = name

    def project(self, feats: Tensor, pixel_index: np.ndarray) -> Tensor:
        n, c, h, w = feats.shape
        dims = self.config.grid_dims
        vol = ad.scatter_mean(ad.reshape(feats, (n, c, h * w)), pixel_index, int(np.prod(dims)))
        return ad.reshape(vol, (n, c) + dims)

    def forward(self, ftsdf, rgb, pixel_index):
        """``ftsdf`` (N, 1, *dims), ``rgb`` (N, 3, H, W), ``pixel_index`` (N, H*W) -> (logits3d, logits2d)."""
        ftsdf, rgb = ad.as_tensor(ftsdf), ad.as_tensor(rgb)
        if ftsdf.ndim != 5 or ftsdf.shape[2:] != self.config.grid_dims:
            raise ShapeMismatch(f"F-TSDF batch {ftsdf.shape} does not match grid {self.config.grid_dims}")
        fusion = self.config.fusion
        feats, logits2d = self.head(rgb)
        projected = self.project(feats, pixel_index)

        x = self.stem(ftsdf)
        if fusion is FusionStrategy.EARLY:
            x = fuse(x, projected, fusion)
        x = self.enc1(self.down1(x))
        skip = self.enc2(self.down2(x))
        x = self.down3(skip)
        if fusion is FusionStrategy.MID:
            x = fuse(x, projected, fusion, self.fusion_pcr)
        x = self.bottleneck(x)
        x = ad.resample_volume(x, skip.shape[2:], "trilinear")
        x = self.dec1(ad.add(self.up_conv(x), skip))
        x = self.dec2(self.dec2_conv(x))
        if fusion is FusionStrategy.LATE:
            x = fuse(x, projected, fusion, self.fusion_pcr)
        logits3d = self.classifier(ad.relu(self.out_bn(x)))
        return logits3d, logits2d

    __call__ = forward


def mdbnet_forward(sample, model: MdbNet, config: MdbNetConfig | None = None):
    """Forward one :class:`~mdbnet.data.Sample`; returns unbatched (logits3d, logits2d) tensors."""
    from .data.sample import prepare

    if config is not None and config.grid_dims != model.config.grid_dims:
        raise ShapeMismatch(f"config grid {config.grid_dims} vs model grid {model.config.grid_dims}")
    prep = prepare(sample, model.config.scale_factor)
    dtype = model.stem.weight.dtype
    logits3d, logits2d = model(
        prep.ftsdf[None].astype(dtype), sample.rgb[None].astype(dtype), prep.pixel_index[None]
    )
    return ad.reshape(logits3d, logits3d.shape[1:]), ad.reshape(logits2d, logits2d.shape[1:])
