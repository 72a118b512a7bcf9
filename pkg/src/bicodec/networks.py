"""Neural transforms: motion prediction, motion/residual autoencoders with
hyperpriors, frame-fusion mask network, and the intra (keyframe) codec.

All networks are built from conv / transposed-conv layers with leaky-ReLU
activations.  Desk-scale channel counts keep CPU training in the minutes
range; the full-size values from the reference configuration remain
reachable through :class:`CodecConfig`.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import entropy as en
from .autodiff import Tensor
from .gain import GainSet

CHECKPOINT_MAGIC = b"LHBC"
CHECKPOINT_VERSION = 1

_LRELU_SLOPE = 0.01
_LN2 = math.log(2.0)


@dataclass
class CodecConfig:
    """Network and bottleneck dimensions for one codec instance."""

    latent_channels: int = 32  # N, also the gain vector length
    hyper_channels: int = 16
    ae_stages: int = 4
    hyper_stages: int = 2
    res_blocks_per_stage: int = 1
    rb_min_stage: int = 1  # no residual blocks above this stage (full-res stages are costly)
    ae_channels: tuple = (16, 24, 32, 32)
    motion_unet_depth: int = 5
    motion_unet_base: int = 16
    fusion_unet_depth: int = 4
    fusion_unet_base: int = 8
    unet_channel_cap: int = 4  # channels capped at cap * base
    levels: int = 4
    use_motion_predictor: bool = True
    use_frame_fusion: bool = True

    def __post_init__(self):
        self.ae_channels = tuple(self.ae_channels)
        if len(self.ae_channels) != self.ae_stages:
            raise ValueError(f"need {self.ae_stages} stage channel counts, got {self.ae_channels}")

    @property
    def pad_multiple(self) -> int:
        """Spatial multiple frames must be padded to before encoding."""
        depth = max(
            self.ae_stages + self.hyper_stages,
            (self.motion_unet_depth - 1) if self.use_motion_predictor else 0,
            (self.fusion_unet_depth - 1) if self.use_frame_fusion else 0,
        )
        return 1 << depth

    @property
    def downsample(self) -> int:
        return 1 << self.ae_stages

    @property
    def hyper_downsample(self) -> int:
        return 1 << (self.ae_stages + self.hyper_stages)

    @classmethod
    def desk(cls, **overrides) -> "CodecConfig":
        """Defaults sized for minutes-scale CPU training."""
        return cls(**overrides)

    @classmethod
    def paper_scale(cls) -> "CodecConfig":
        """Full-size configuration (not trainable in this environment's budget)."""
        return cls(
            latent_channels=128,
            hyper_channels=64,
            ae_channels=(64, 96, 128, 128),
            motion_unet_base=64,
            fusion_unet_base=32,
        )

    @classmethod
    def tiny(cls) -> "CodecConfig":
        """Two-stage variant for 8x8 finite-difference checks."""
        return cls(
            latent_channels=6,
            hyper_channels=4,
            ae_stages=2,
            hyper_stages=1,
            ae_channels=(6, 8),
            motion_unet_depth=2,
            motion_unet_base=6,
            fusion_unet_depth=2,
            fusion_unet_base=4,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CodecConfig":
        return cls(**json.loads(text))


# -- layers -------------------------------------------------------------------


def _fan_in_uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


class Conv:
    def __init__(self, rng, cin, cout, k=3, stride=1, padding=None, zero_init=False, dtype=np.float64):
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        shape = (cout, cin, k, k)
        w = np.zeros(shape, dtype=dtype) if zero_init else _fan_in_uniform(rng, shape, cin * k * k, dtype)
        self.w = ad.parameter(w, dtype=dtype)
        self.b = ad.parameter(np.zeros(cout), dtype=dtype)

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def params(self, prefix):
        return {prefix + ".w": self.w, prefix + ".b": self.b}


class ConvT:
    """Transposed conv; k=2, stride=2 gives exact 2x upsampling."""

    def __init__(self, rng, cin, cout, k=2, stride=2, padding=0, zero_init=False, dtype=np.float64):
        self.stride = stride
        self.padding = padding
        shape = (cin, cout, k, k)
        w = np.zeros(shape, dtype=dtype) if zero_init else _fan_in_uniform(rng, shape, cin * k * k, dtype)
        self.w = ad.parameter(w, dtype=dtype)
        self.b = ad.parameter(np.zeros(cout), dtype=dtype)

    def __call__(self, x):
        return ad.conv2d_transpose(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def params(self, prefix):
        return {prefix + ".w": self.w, prefix + ".b": self.b}


class ResidualBlock:
    def __init__(self, rng, ch, dtype=np.float64):
        self.conv = Conv(rng, ch, ch, dtype=dtype)

    def __call__(self, x):
        return x + self.conv(ad.leaky_relu(x, _LRELU_SLOPE))

    def params(self, prefix):
        return self.conv.params(prefix + ".conv")


class UNet:
    """Stacked conv levels with skip concatenation and a zero-init head."""

    def __init__(self, rng, cin, cout, depth, base, cap_mult=4, dtype=np.float64):
        if depth < 2:
            raise ValueError("UNet depth must be >= 2")
        self.depth = depth
        cap = base * cap_mult
        chans = [min(base * (1 << l), cap) for l in range(depth)]
        self.chans = chans
        self.enc = [Conv(rng, cin, chans[0], dtype=dtype)]
        for l in range(1, depth):
            self.enc.append(Conv(rng, chans[l - 1], chans[l], stride=2, dtype=dtype))
        self.ups = []
        in_ch = chans[depth - 1]
        for l in range(depth - 1, 0, -1):
            self.ups.append(ConvT(rng, in_ch, chans[l - 1], dtype=dtype))
            in_ch = 2 * chans[l - 1]
        self.head = Conv(rng, 2 * chans[0], cout, zero_init=True, dtype=dtype)

    def __call__(self, x):
        div = 1 << (self.depth - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(f"spatial size {x.shape[2]}x{x.shape[3]} not divisible by {div}; pad first")
        skips = []
        h = x
        for conv in self.enc:
            h = ad.leaky_relu(conv(h), _LRELU_SLOPE)
            skips.append(h)
        h = skips[-1]
        for up, skip in zip(self.ups, reversed(skips[:-1])):
            h = ad.leaky_relu(up(h), _LRELU_SLOPE)
            h = ad.concat([h, skip], axis=1)
        return self.head(h)

    def params(self, prefix):
        out = {}
        for i, c in enumerate(self.enc):
            out.update(c.params(f"{prefix}.enc{i}"))
        for i, u in enumerate(self.ups):
            out.update(u.params(f"{prefix}.up{i}"))
        out.update(self.head.params(prefix + ".head"))
        return out


class Encoder:
    """Stride-2 stages with residual blocks, ending in a latent head."""

    def __init__(self, rng, cin, cfg: CodecConfig, dtype=np.float64):
        self.stages = []
        ch_prev = cin
        for s in range(cfg.ae_stages):
            ch = cfg.ae_channels[s]
            blocks = [Conv(rng, ch_prev, ch, stride=2, dtype=dtype)]
            blocks += [ResidualBlock(rng, ch, dtype=dtype) for _ in range(cfg.res_blocks_per_stage)]
            self.stages.append(blocks)
            ch_prev = ch
        self.head = Conv(rng, ch_prev, cfg.latent_channels, dtype=dtype)

    def __call__(self, x):
        h = x
        for blocks in self.stages:
            h = ad.leaky_relu(blocks[0](h), _LRELU_SLOPE)
            for rb in blocks[1:]:
                h = rb(h)
        return self.head(h)

    def params(self, prefix):
        out = {}
        for s, blocks in enumerate(self.stages):
            out.update(blocks[0].params(f"{prefix}.s{s}.down"))
            for r, rb in enumerate(blocks[1:]):
                out.update(rb.params(f"{prefix}.s{s}.rb{r}"))
        out.update(self.head.params(prefix + ".head"))
        return out


class Decoder:
    """Mirror of Encoder; the output head is zero-initialized."""

    def __init__(self, rng, cout, cfg: CodecConfig, dtype=np.float64, zero_head=True):
        self.stem = Conv(rng, cfg.latent_channels, cfg.ae_channels[-1], dtype=dtype)
        self.stages = []
        for s in range(cfg.ae_stages - 1, -1, -1):
            ch = cfg.ae_channels[s]
            ch_next = cfg.ae_channels[s - 1] if s > 0 else cfg.ae_channels[0]
            blocks = [ResidualBlock(rng, ch, dtype=dtype) for _ in range(cfg.res_blocks_per_stage)]
            blocks.append(ConvT(rng, ch, ch_next, dtype=dtype))
            self.stages.append(blocks)
        self.head = Conv(rng, cfg.ae_channels[0], cout, zero_init=zero_head, dtype=dtype)

    def __call__(self, y):
        h = ad.leaky_relu(self.stem(y), _LRELU_SLOPE)
        for blocks in self.stages:
            for rb in blocks[:-1]:
                h = rb(h)
            h = ad.leaky_relu(blocks[-1](h), _LRELU_SLOPE)
        return self.head(h)

    def params(self, prefix):
        out = self.stem.params(prefix + ".stem")
        for s, blocks in enumerate(self.stages):
            for r, rb in enumerate(blocks[:-1]):
                out.update(rb.params(f"{prefix}.s{s}.rb{r}"))
            out.update(blocks[-1].params(f"{prefix}.s{s}.up"))
        out.update(self.head.params(prefix + ".head"))
        return out


class HyperEncoder:
    def __init__(self, rng, cfg: CodecConfig, dtype=np.float64):
        self.convs = []
        ch_prev = cfg.latent_channels
        for _ in range(cfg.hyper_stages):
            self.convs.append(Conv(rng, ch_prev, cfg.hyper_channels, stride=2, dtype=dtype))
            ch_prev = cfg.hyper_channels

    def __call__(self, y):
        h = y
        for i, c in enumerate(self.convs):
            h = c(h) if i == len(self.convs) - 1 else ad.leaky_relu(c(h), _LRELU_SLOPE)
        return h

    def params(self, prefix):
        out = {}
        for i, c in enumerate(self.convs):
            out.update(c.params(f"{prefix}.c{i}"))
        return out


class HyperDecoder:
    """Maps a decoded hyper-latent to per-element mean and positive scale."""

    def __init__(self, rng, cfg: CodecConfig, scale_floor: float, dtype=np.float64):
        self.n = cfg.latent_channels
        self.scale_floor = scale_floor
        self.ups = []
        ch_prev = cfg.hyper_channels
        for s in range(cfg.hyper_stages):
            cout = 2 * self.n if s == cfg.hyper_stages - 1 else cfg.hyper_channels
            self.ups.append(ConvT(rng, ch_prev, cout, dtype=dtype))
            ch_prev = cout
        # bias the raw-scale half so training starts with a usable sigma
        self.ups[-1].b.data[self.n :] = 1.0

    def __call__(self, z):
        h = z
        for i, u in enumerate(self.ups):
            h = u(h) if i == len(self.ups) - 1 else ad.leaky_relu(u(h), _LRELU_SLOPE)
        mean = h[:, : self.n]
        raw = h[:, self.n :]
        # shifted softplus: zero pre-activation lands exactly on the floor
        scale = ad.maximum(ad.softplus(raw) + (self.scale_floor - _LN2), self.scale_floor)
        return mean, scale

    def params(self, prefix):
        out = {}
        for i, u in enumerate(self.ups):
            out.update(u.params(f"{prefix}.u{i}"))
        return out


# -- full model ------------------------------------------------------------------


class CodecModel:
    """All transforms plus gain sets and hyper priors for one codec."""

    MOTION_INPUT_CHANNELS = 19  # 2+2 flows, 3+3 predictions, 3+3 refs, 3 current
    FUSION_INPUT_CHANNELS = 16  # 3+3 compensated, 2+2 flows, 3+3 refs

    def __init__(self, config: CodecConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        cfg = config
        n, levels = cfg.latent_channels, cfg.levels

        self.motion_unet = (
            UNet(rng, 6, 4, cfg.motion_unet_depth, cfg.motion_unet_base, cfg.unet_channel_cap, dtype)
            if cfg.use_motion_predictor
            else None
        )
        self.fusion_unet = (
            UNet(rng, 16, 2, cfg.fusion_unet_depth, cfg.fusion_unet_base, cfg.unet_channel_cap, dtype)
            if cfg.use_frame_fusion
            else None
        )
        self.motion_enc = Encoder(rng, self.MOTION_INPUT_CHANNELS, cfg, dtype)
        self.motion_dec = Decoder(rng, 4, cfg, dtype, zero_head=True)
        self.motion_henc = HyperEncoder(rng, cfg, dtype)
        self.motion_hdec = HyperDecoder(rng, cfg, en.SCALE_FLOOR, dtype)
        self.residual_enc = Encoder(rng, 3, cfg, dtype)
        self.residual_dec = Decoder(rng, 3, cfg, dtype, zero_head=True)
        self.residual_henc = HyperEncoder(rng, cfg, dtype)
        self.residual_hdec = HyperDecoder(rng, cfg, en.SCALE_FLOOR, dtype)
        self.intra_enc = Encoder(rng, 3, cfg, dtype)
        self.intra_dec = Decoder(rng, 3, cfg, dtype, zero_head=True)
        self.intra_henc = HyperEncoder(rng, cfg, dtype)
        self.intra_hdec = HyperDecoder(rng, cfg, en.SCALE_FLOOR, dtype)

        self.motion_z_prior = en.FactorizedPrior(cfg.hyper_channels, dtype=dtype)
        self.residual_z_prior = en.FactorizedPrior(cfg.hyper_channels, dtype=dtype)
        self.intra_z_prior = en.FactorizedPrior(cfg.hyper_channels, dtype=dtype)
        self.gaussian = en.GaussianConditional()

        self.gains = {
            "motion_y": GainSet(levels, n, dtype=dtype),
            "motion_z": GainSet(levels, cfg.hyper_channels, dtype=dtype),
            "residual_y": GainSet(levels, n, dtype=dtype),
            "residual_z": GainSet(levels, cfg.hyper_channels, dtype=dtype),
            "intra_y": GainSet(levels, n, dtype=dtype),
            "intra_z": GainSet(levels, cfg.hyper_channels, dtype=dtype),
        }

    # -- parameter registry -----------------------------------------------

    def params(self) -> dict:
        out = {}
        if self.motion_unet is not None:
            out.update(self.motion_unet.params("motion_unet"))
        if self.fusion_unet is not None:
            out.update(self.fusion_unet.params("fusion_unet"))
        out.update(self.motion_enc.params("motion_enc"))
        out.update(self.motion_dec.params("motion_dec"))
        out.update(self.motion_henc.params("motion_henc"))
        out.update(self.motion_hdec.params("motion_hdec"))
        out.update(self.residual_enc.params("residual_enc"))
        out.update(self.residual_dec.params("residual_dec"))
        out.update(self.residual_henc.params("residual_henc"))
        out.update(self.residual_hdec.params("residual_hdec"))
        out.update(self.intra_enc.params("intra_enc"))
        out.update(self.intra_dec.params("intra_dec"))
        out.update(self.intra_henc.params("intra_henc"))
        out.update(self.intra_hdec.params("intra_hdec"))
        out.update(self.motion_z_prior.parameters("motion_z_prior"))
        out.update(self.residual_z_prior.parameters("residual_z_prior"))
        out.update(self.intra_z_prior.parameters("intra_z_prior"))
        for name, gs in self.gains.items():
            out.update(gs.parameters("gains." + name))
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params().values())

    def zero_grads(self) -> None:
        for p in self.params().values():
            p.zero_grad()

    # -- transforms ---------------------------------------------------------

    def motion_predict(self, x_past: Tensor, x_future: Tensor):
        """Bi-directional flow prediction from the two decoded references."""
        if x_past.shape != x_future.shape or x_past.shape[1] != 3:
            raise ValueError(f"references must share [B,3,H,W], got {x_past.shape} and {x_future.shape}")
        if self.motion_unet is None:
            zeros = Tensor(np.zeros((x_past.shape[0], 2) + x_past.shape[2:], dtype=x_past.dtype))
            return zeros, zeros
        out = self.motion_unet(ad.concat([x_past, x_future], axis=1))
        return out[:, 0:2], out[:, 2:4]

    def motion_refine_encode(self, mv_p, mv_f, xpred_p, xpred_f, x_past, x_future, x_current) -> Tensor:
        parts = [mv_p, mv_f, xpred_p, xpred_f, x_past, x_future, x_current]
        x = ad.concat(parts, axis=1)
        if x.shape[1] != self.MOTION_INPUT_CHANNELS:
            raise ValueError(f"motion encoder expects {self.MOTION_INPUT_CHANNELS} channels, got {x.shape[1]}")
        return self.motion_enc(x)

    def motion_refine_decode(self, y_rec: Tensor):
        out = self.motion_dec(y_rec)
        return out[:, 0:2], out[:, 2:4]

    def fusion_masks(self, xcomp_p, xcomp_f, mv_p, mv_f, x_past, x_future):
        """Two sigmoid masks in (0,1); zero head weights give flat 0.5 masks."""
        if self.fusion_unet is None:
            half = Tensor(np.full((xcomp_p.shape[0], 1) + xcomp_p.shape[2:], 0.5, dtype=xcomp_p.dtype))
            return half, half
        x = ad.concat([xcomp_p, xcomp_f, mv_p, mv_f, x_past, x_future], axis=1)
        if x.shape[1] != self.FUSION_INPUT_CHANNELS:
            raise ValueError(f"fusion network expects {self.FUSION_INPUT_CHANNELS} channels, got {x.shape[1]}")
        out = ad.sigmoid(self.fusion_unet(x))
        return out[:, 0:1], out[:, 1:2]

    def residual_autoencode(self, res: Tensor):
        """Latent and direct (unquantized) reconstruction of a residual frame."""
        if res.shape[1] != 3:
            raise ValueError(f"residual must be [B,3,H,W], got {res.shape}")
        y = self.residual_enc(res)
        return y, self.residual_dec(y)

    def hyper_transform(self, bottleneck: str, direction: str, x: Tensor):
        """Hyper path for 'motion', 'residual' or 'intra' bottlenecks."""
        henc = getattr(self, f"{bottleneck}_henc")
        hdec = getattr(self, f"{bottleneck}_hdec")
        if direction == "encode":
            return henc(x)
        if direction == "decode":
            return hdec(x)
        raise ValueError(f"direction must be encode or decode, got {direction!r}")

    def intra_forward(self, frame: Tensor):
        """Keyframe transform without quantization: (latent, hyper, recon)."""
        y = self.intra_enc(frame)
        z = self.intra_henc(y)
        return y, z, self.intra_dec(y)

    # -- checkpoint io -----------------------------------------------------------

    def save_checkpoint(self, path, meta: dict | None = None, extra_arrays: dict | None = None) -> None:
        save_checkpoint(path, self.config, self.params(), meta, extra_arrays)

    @classmethod
    def load_checkpoint(cls, path, dtype=np.float64):
        config, arrays, meta = read_checkpoint(path)
        model = cls(config, seed=0, dtype=dtype)
        params = model.params()
        extra = {}
        for name, arr in arrays.items():
            if name in params:
                p = params[name]
                if p.data.shape != arr.shape:
                    raise ValueError(f"checkpoint shape {arr.shape} != model shape {p.data.shape} for {name!r}")
                p.data = arr.astype(model.dtype)
            else:
                extra[name] = arr
        return model, meta, extra


# -- checkpoint container ------------------------------------------------------------


def save_checkpoint(path, config: CodecConfig, arrays: dict, meta=None, extra_arrays=None) -> None:
    """Binary container: magic, version, config JSON, meta JSON, named f64 arrays."""
    items = {name: t.data if isinstance(t, Tensor) else np.asarray(t) for name, t in arrays.items()}
    if extra_arrays:
        for name, arr in extra_arrays.items():
            items[name] = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<B", CHECKPOINT_VERSION)
    cfg_bytes = config.to_json().encode()
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    blob += struct.pack("<I", len(cfg_bytes)) + cfg_bytes
    blob += struct.pack("<I", len(meta_bytes)) + meta_bytes
    blob += struct.pack("<I", len(items))
    for name in sorted(items):
        arr = np.ascontiguousarray(items[name], dtype="<f8")
        nb = name.encode()
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        blob += arr.tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


def read_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file (magic {buf[:4]!r})")
    if buf[4] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {buf[4]}")
    off = 5
    (cfg_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    config = CodecConfig.from_json(buf[off : off + cfg_len].decode())
    off += cfg_len
    (meta_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    meta = json.loads(buf[off : off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + name_len].decode()
        off += name_len
        ndim = buf[off]
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off) if ndim else ()
        off += 4 * ndim
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
        arrays[name] = arr
    return config, arrays, meta
