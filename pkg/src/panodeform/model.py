"""Four-stage pyramid segmentation network with deformable components.

The encoder downsamples by strides {4, 8, 16, 32} using deformable patch
embeddings followed by transformer layers with spatial-reduction attention.
The decoder maps every stage to a common embedding width, mixes tokens with
the deformable MLP, upsamples everything to quarter resolution, sums the
stages, and classifies with layernorm + a linear head.  The summed map is
also exposed as the fused feature that the adaptation loss aligns.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import deform
from . import tensor as T
from .tensor import ShapeError, Tensor
from . import tensor_io


@dataclass
class ModelConfig:
    classes: int = 5
    channels: tuple[int, ...] = (16, 32, 48, 64)
    layers: tuple[int, ...] = (1, 1, 1, 1)
    heads: tuple[int, ...] = (1, 2, 2, 4)
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    patch_sizes: tuple[int, ...] = (7, 3, 3, 3)
    patch_strides: tuple[int, ...] = (4, 2, 2, 2)
    emb_channels: int = 32
    decoder_patch: int = 3
    mlp_ratio: int = 2
    r: float = 4.0
    border: str = "clamp"
    pano_border: str | None = None  # e.g. "wrap_horizontal" for seam continuity

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ShapeError("the network has exactly 4 stages")
        if self.emb_channels < self.classes:
            raise ShapeError("embedding width must cover the class count")
        for c, h in zip(self.channels, self.heads):
            if c % h:
                raise ShapeError("heads must divide stage channels")

    @property
    def stage_strides(self) -> tuple[int, ...]:
        out, s = [], 1
        for t in self.patch_strides:
            s *= t
            out.append(s)
        return tuple(out)  # (4, 8, 16, 32)

    @classmethod
    def nano(cls, classes: int = 5) -> "ModelConfig":
        return cls(classes=classes)

    @classmethod
    def tiny(cls, classes: int = 19) -> "ModelConfig":
        """Full-width configuration (kept constructible for shape checks)."""
        return cls(
            classes=classes,
            channels=(64, 128, 320, 512),
            layers=(2, 2, 2, 2),
            heads=(1, 2, 5, 8),
            emb_channels=128,
            mlp_ratio=4,
        )


@dataclass
class ForwardResult:
    logits: Tensor  # (H, W, K)
    quarter_logits: Tensor  # (H/4, W/4, K)
    fused: Tensor  # (H/4, W/4, emb_channels)
    pyramid: list[Tensor] = field(default_factory=list)
    attentions: list[Tensor] = field(default_factory=list)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2 * std
    return out


class _Params:
    """Named parameter store with seeded, name-keyed initialization."""

    def __init__(self, seed: int):
        self.seed = seed
        self.store: dict[str, Tensor] = {}

    def make(self, name: str, shape, kind: str) -> Tensor:
        if name in self.store:
            raise KeyError(f"duplicate parameter {name}")
        if kind == "zero":
            data = np.zeros(shape)
        elif kind == "one":
            data = np.ones(shape)
        elif kind == "trunc":
            rng = np.random.default_rng(
                np.random.SeedSequence([self.seed, zlib.crc32(name.encode())])
            )
            data = _trunc_normal(rng, shape)
        else:
            raise ValueError(kind)
        t = Tensor(data, requires_grad=True)
        self.store[name] = t
        return t


class _Linear:
    def __init__(self, p: _Params, name: str, cin: int, cout: int):
        self.w = p.make(f"{name}.w", (cin, cout), "trunc")
        self.b = p.make(f"{name}.b", (cout,), "zero")

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class _LayerNorm:
    def __init__(self, p: _Params, name: str, c: int):
        self.g = p.make(f"{name}.g", (c,), "one")
        self.b = p.make(f"{name}.b", (c,), "zero")

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.g, self.b)


class _PatchEmbed:
    """Deformable patch embedding layer; offset predictor starts at zero."""

    def __init__(self, p: _Params, name: str, cfg: deform.PatchEmbedConfig):
        self.cfg = cfg
        g = cfg.size * cfg.size
        self.conv_w = p.make(f"{name}.off_w", (3, 3, cfg.in_channels, 2 * g), "zero")
        self.conv_b = p.make(f"{name}.off_b", (2 * g,), "zero")
        self.proj_w = p.make(
            f"{name}.proj_w", (cfg.size * cfg.size * cfg.in_channels, cfg.out_channels), "trunc"
        )
        self.proj_b = p.make(f"{name}.proj_b", (cfg.out_channels,), "zero")

    def __call__(self, x: Tensor, border: str) -> Tensor:
        if self.cfg.deformable:
            return deform.deformable_pe(
                x, self.conv_w, self.conv_b, self.proj_w, self.proj_b, self.cfg, border
            )
        return deform.standard_pe(x, self.proj_w, self.proj_b, self.cfg, border)


class _Attention:
    """Multi-head self-attention with pooled keys/values."""

    def __init__(self, p: _Params, name: str, c: int, heads: int, sr: int):
        self.heads = heads
        self.sr = sr
        self.c = c
        self.q = _Linear(p, f"{name}.q", c, c)
        self.k = _Linear(p, f"{name}.k", c, c)
        self.v = _Linear(p, f"{name}.v", c, c)
        self.o = _Linear(p, f"{name}.o", c, c)
        self.last_attention: Tensor | None = None

    def __call__(self, xmap: Tensor) -> Tensor:
        h, w, c = xmap.shape
        n = h * w
        d = c // self.heads
        tokens = T.reshape(xmap, (n, c))
        pooled = T.avg_pool(xmap, self.sr) if self.sr > 1 else xmap
        m = pooled.shape[0] * pooled.shape[1]
        kv_tokens = T.reshape(pooled, (m, c))

        def split(t: Tensor, length: int) -> Tensor:
            return T.transpose(T.reshape(t, (length, self.heads, d)), (1, 0, 2))

        q = split(self.q(tokens), n)
        k = split(self.k(kv_tokens), m)
        v = split(self.v(kv_tokens), m)
        logits = T.scale(T.bmm(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d))
        attn = T.softmax(logits, axis=-1)
        self.last_attention = attn
        mixed = T.bmm(attn, v)  # (heads, n, d)
        out = T.reshape(T.transpose(mixed, (1, 0, 2)), (n, c))
        return T.reshape(self.o(out), (h, w, c))


class _EncoderBlock:
    def __init__(self, p: _Params, name: str, c: int, heads: int, sr: int, mlp_ratio: int):
        self.ln1 = _LayerNorm(p, f"{name}.ln1", c)
        self.attn = _Attention(p, f"{name}.attn", c, heads, sr)
        self.ln2 = _LayerNorm(p, f"{name}.ln2", c)
        hidden = c * mlp_ratio
        self.fc1 = _Linear(p, f"{name}.fc1", c, hidden)
        self.fc2 = _Linear(p, f"{name}.fc2", hidden, c)

    def __call__(self, xmap: Tensor) -> Tensor:
        h, w, c = xmap.shape
        xmap = T.add(xmap, self.attn(self.ln1(xmap)))
        tokens = T.reshape(self.ln2(xmap), (h * w, c))
        mlp = self.fc2(T.gelu(self.fc1(tokens)))
        return T.add(xmap, T.reshape(mlp, (h, w, c)))


class _EncoderStage:
    def __init__(self, p: _Params, name: str, cfg: ModelConfig, idx: int, cin: int):
        pe_cfg = deform.PatchEmbedConfig(
            size=cfg.patch_sizes[idx],
            stride=cfg.patch_strides[idx],
            in_channels=cin,
            out_channels=cfg.channels[idx],
            deformable=True,
            r=cfg.r,
        )
        self.embed = _PatchEmbed(p, f"{name}.pe", pe_cfg)
        self.blocks = [
            _EncoderBlock(
                p, f"{name}.blk{i}", cfg.channels[idx], cfg.heads[idx], cfg.sr_ratios[idx], cfg.mlp_ratio
            )
            for i in range(cfg.layers[idx])
        ]
        self.norm = _LayerNorm(p, f"{name}.ln", cfg.channels[idx])

    def __call__(self, x: Tensor, border: str) -> Tensor:
        x = self.embed(x, border)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class _DecoderStage:
    """Mixer-style stage: deformable embed, deformable mix, channel MLP."""

    def __init__(self, p: _Params, name: str, cfg: ModelConfig, cin: int):
        ce = cfg.emb_channels
        pe_cfg = deform.PatchEmbedConfig(
            size=cfg.decoder_patch, stride=1, in_channels=cin, out_channels=ce, deformable=True, r=cfg.r
        )
        self.embed = _PatchEmbed(p, f"{name}.pe", pe_cfg)
        g = deform.offset_groups(ce)
        self.mix_conv_w = p.make(f"{name}.mix_off_w", (3, 3, ce, 2 * g), "zero")
        self.mix_conv_b = p.make(f"{name}.mix_off_b", (2 * g,), "zero")
        self.mix_w = p.make(f"{name}.mix_w", (ce, ce), "trunc")
        self.mix_b = p.make(f"{name}.mix_b", (ce,), "zero")
        self.fc1 = _Linear(p, f"{name}.fc1", ce, ce)
        self.fc2 = _Linear(p, f"{name}.fc2", ce, ce)
        self.r = cfg.r

    def __call__(self, x: Tensor, border: str) -> Tensor:
        z = self.embed(x, border)
        mixed = deform.deformable_mlp_mix(
            z, self.mix_conv_w, self.mix_conv_b, self.mix_w, self.mix_b, self.r, border
        )
        z = T.add(z, mixed)
        h, w, c = z.shape
        tokens = T.reshape(z, (h * w, c))
        mlp = self.fc2(T.gelu(self.fc1(tokens)))
        return T.add(z, T.reshape(mlp, (h, w, c)))


class SegNet:
    """The full segmentation network."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self._params = _Params(seed)
        chans = (3,) + tuple(cfg.channels[:-1])
        self.stages = [
            _EncoderStage(self._params, f"enc{i}", cfg, i, chans[i]) for i in range(4)
        ]
        self.dec_stages = [
            _DecoderStage(self._params, f"dec{i}", cfg, cfg.channels[i]) for i in range(4)
        ]
        self.head_ln = _LayerNorm(self._params, "head.ln", cfg.emb_channels)
        self.head_fc = _Linear(self._params, "head.fc", cfg.emb_channels, cfg.classes)

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self._params.store

    def num_params(self) -> int:
        return sum(t.size for t in self._params.store.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.store.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params.store) - set(arrays)
        if missing:
            raise tensor_io.DataError(f"checkpoint missing {sorted(missing)[:3]}...")
        for k, t in self._params.store.items():
            if arrays[k].shape != t.data.shape:
                raise tensor_io.DataError(f"shape mismatch for {k}")
            t.data = np.ascontiguousarray(arrays[k], dtype=np.float64)

    def save(self, directory) -> None:
        tensor_io.save_params(directory, self.state_arrays())

    def load(self, directory) -> None:
        self.load_state(tensor_io.load_params(directory))

    # -- forward ------------------------------------------------------------

    def border_for(self, domain: str | None) -> str:
        """Sampling border mode for a scene domain (panoramas may wrap)."""
        if domain == "panorama" and self.cfg.pano_border:
            return self.cfg.pano_border
        return self.cfg.border

    def encode(self, x: Tensor, border: str | None = None) -> list[Tensor]:
        h, w, _ = x.shape
        if h % 32 or w % 32:
            raise ShapeError(f"input {h}x{w} must be divisible by 32")
        border = border or self.cfg.border
        pyr = []
        cur = x
        for stage in self.stages:
            cur = stage(cur, border)
            pyr.append(cur)
        return pyr

    def decode(self, pyr: list[Tensor], border: str | None = None) -> tuple[Tensor, Tensor]:
        """Returns (quarter-resolution logits, fused embedding map)."""
        if len(pyr) != 4:
            raise ShapeError("expected a 4-level pyramid")
        border = border or self.cfg.border
        oh, ow = pyr[0].shape[0], pyr[0].shape[1]
        ups = []
        for stage, z in zip(self.dec_stages, pyr):
            zz = stage(z, border)
            ups.append(T.upsample_bilinear(zz, oh, ow))
        fused = T.add(T.add(ups[0], ups[1]), T.add(ups[2], ups[3]))
        normed = self.head_ln(fused)
        tokens = T.reshape(normed, (oh * ow, self.cfg.emb_channels))
        logits = T.reshape(self.head_fc(tokens), (oh, ow, self.cfg.classes))
        return logits, fused

    def fuse_features(self, pyr: list[Tensor], border: str | None = None) -> Tensor:
        """Sum of the four decoder-stage embeddings at quarter resolution."""
        return self.decode(pyr, border)[1]

    def forward(self, x: Tensor, border: str | None = None) -> ForwardResult:
        h, w, _ = x.shape
        pyr = self.encode(x, border)
        quarter, fused = self.decode(pyr, border)
        logits = T.upsample_bilinear(quarter, h, w)
        attns = [
            blk.attn.last_attention for stage in self.stages for blk in stage.blocks
        ]
        return ForwardResult(
            logits=logits, quarter_logits=quarter, fused=fused, pyramid=pyr, attentions=attns
        )

    def predict(self, image: np.ndarray, domain: str | None = None) -> np.ndarray:
        """Argmax label map for an H x W x 3 image in [0, 1]."""
        out = self.forward(Tensor(image), self.border_for(domain))
        return np.argmax(out.logits.data, axis=-1).astype(np.int64)


def describe(cfg: ModelConfig, h: int = 64, w: int = 128) -> str:
    """Human-readable stage shapes and parameter counts."""
    net = SegNet(cfg, seed=0)
    lines = [f"input {h}x{w}x3, classes={cfg.classes}"]
    for i, stride in enumerate(cfg.stage_strides):
        lines.append(
            f"stage {i + 1}: /{stride} -> {h // stride}x{w // stride}x{cfg.channels[i]}"
            f" ({cfg.layers[i]} layer(s), {cfg.heads[i]} head(s), sr {cfg.sr_ratios[i]})"
        )
    lines.append(f"decoder: 4 x {cfg.emb_channels} channels at {h // 4}x{w // 4}")
    per_stage: dict[str, int] = {}
    for name, t in net.parameters().items():
        key = name.split(".")[0]
        per_stage[key] = per_stage.get(key, 0) + t.size
    for key in sorted(per_stage):
        lines.append(f"params[{key}] = {per_stage[key]}")
    lines.append(f"params[total] = {net.num_params()}")
    return "\n".join(lines)
