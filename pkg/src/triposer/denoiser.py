"""Conditional U-Net noise predictor for triplane reposing.

The three planes travel through the network as one ``3 * k``-channel image
(plane-major channels).  Conditioning reaches the network two ways:

* ``concat``: the noisy latent, the init triplane and the expanded skeleton
  encoding are stacked per plane and fed to the first convolution;
* ``cross_attention``: at every level listed in ``attention_resolutions`` the
  feature map attends to condition tokens obtained by average-pooling the
  condition planes to that level's size (``3 * r * r`` tokens).

``both`` enables the two pathways together.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import TrainingExample
from .errors import FormatError, NumericalError
from .triplane import concat_condition, unflatten

CONDITIONING_MODES = ("concat", "cross_attention", "both")
CKPT_FORMAT = "triposer-checkpoint"
CKPT_VERSION = 1


@dataclass
class DenoiserConfig:
    triplane_channels: int = 4
    resolution: int = 32
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    attention_resolutions: tuple[int, ...] = (32, 16, 8)
    attention_heads: int = 4
    conditioning_mode: str = "both"
    time_embed_dim: int = 128
    num_groups: int = 8
    num_timesteps: int = 1000
    skeleton_encoding: str = "index"
    heatmap_sigma_px: float | None = None

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        self.attention_resolutions = tuple(sorted({int(r) for r in self.attention_resolutions}, reverse=True))

    def level_sizes(self) -> list[int]:
        return [self.resolution >> k for k in range(len(self.channel_multipliers))]

    def level_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    @property
    def uses_concat(self) -> bool:
        return self.conditioning_mode in ("concat", "both")

    @property
    def uses_cross_attention(self) -> bool:
        return self.conditioning_mode in ("cross_attention", "both")

    def validate(self) -> None:
        if self.conditioning_mode not in CONDITIONING_MODES:
            raise ValueError(f"conditioning_mode must be one of {CONDITIONING_MODES}")
        if self.triplane_channels < 1 or self.base_channels < 1 or not self.channel_multipliers:
            raise ValueError("channel counts must be positive")
        if self.resolution % (1 << (len(self.channel_multipliers) - 1)):
            raise ValueError("resolution must be divisible by 2**(levels - 1)")
        if self.attention_heads < 1:
            raise ValueError("attention_heads must be >= 1")
        sizes = self.level_sizes()
        for r in self.attention_resolutions:
            if r not in sizes:
                raise ValueError(f"attention resolution {r} not reachable; levels are {sizes}")
            width = self.level_channels()[sizes.index(r)]
            if width % self.attention_heads:
                raise ValueError(f"{self.attention_heads} heads do not divide width {width} at {r}")
        for ch in self.level_channels():
            if ch % self.num_groups:
                raise ValueError(f"{self.num_groups} groups do not divide {ch} channels")
        if self.time_embed_dim < 2 or self.base_channels % 2:
            raise ValueError("time embedding needs even widths")
        if self.skeleton_encoding not in ("index", "heatmap"):
            raise ValueError("skeleton_encoding must be 'index' or 'heatmap'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown denoiser config keys: {sorted(unknown)}")
        return cls(**d)


def sinusoidal_embedding(t: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TimeEmbedding(nn.Module):
    def __init__(self, freq_dim: int, dim: int):
        super().__init__()
        self.freq_dim = freq_dim
        self.fc1 = nn.Linear(freq_dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        emb = sinusoidal_embedding(t, self.freq_dim, self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(emb)))


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return (x if self.skip is None else self.skip(x)) + h


def multihead_attention(q, k, v, heads: int):
    B, Lq, ch = q.shape
    Lk = k.shape[1]
    d = ch // heads
    q = q.reshape(B, Lq, heads, d).transpose(1, 2)
    k = k.reshape(B, Lk, heads, d).transpose(1, 2)
    v = v.reshape(B, Lk, heads, d).transpose(1, 2)
    w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
    return (w @ v).transpose(1, 2).reshape(B, Lq, ch)


class SelfAttention(nn.Module):
    def __init__(self, ch: int, heads: int, size: int, groups: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, ch)
        self.qkv = nn.Linear(ch, 3 * ch)
        self.proj = nn.Linear(ch, ch)
        self.pos = nn.Parameter(torch.zeros(size * size, ch))

    def forward(self, x):
        B, ch, H, W = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2) + self.pos
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)
        out = self.proj(multihead_attention(q, k, v, self.heads))
        return x + out.transpose(1, 2).reshape(B, ch, H, W)


class CrossAttention(nn.Module):
    """Feature map queries against condition tokens, added back residually."""

    def __init__(self, ch: int, cond_ch: int, heads: int, size: int, groups: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, ch)
        self.q = nn.Linear(ch, ch)
        self.kv = nn.Linear(cond_ch, 2 * ch)
        self.proj = nn.Linear(ch, ch)
        self.q_pos = nn.Parameter(torch.zeros(size * size, ch))
        self.kv_pos = nn.Parameter(torch.zeros(3 * size * size, cond_ch))

    def forward(self, x, cond_tokens):
        B, ch, H, W = x.shape
        if cond_tokens.shape[1] != 3 * H * W:
            raise ValueError(f"expected {3 * H * W} condition tokens, got {cond_tokens.shape[1]}")
        q = self.q(self.norm(x).flatten(2).transpose(1, 2) + self.q_pos)
        k, v = self.kv(cond_tokens + self.kv_pos).chunk(2, dim=-1)
        out = self.proj(multihead_attention(q, k, v, self.heads))
        return x + out.transpose(1, 2).reshape(B, ch, H, W)


class AttentionBlock(nn.Module):
    def __init__(self, ch: int, heads: int, size: int, groups: int, cond_ch: int | None):
        super().__init__()
        self.self_attn = SelfAttention(ch, heads, size, groups)
        self.cross_attn = CrossAttention(ch, cond_ch, heads, size, groups) if cond_ch else None

    def forward(self, x, cond_tokens=None):
        x = self.self_attn(x)
        if self.cross_attn is not None:
            x = self.cross_attn(x, cond_tokens)
        return x


def condition_tokens(cond: torch.Tensor, size: int) -> torch.Tensor:
    """(B, 3k, H, W) condition planes -> (B, 3 * size**2, k) tokens by average pooling."""
    B, ck, H, W = cond.shape
    k = ck // 3
    pooled = F.adaptive_avg_pool2d(cond.reshape(B * 3, k, H, W), size)
    return pooled.reshape(B, 3, k, size * size).permute(0, 1, 3, 2).reshape(B, 3 * size * size, k)


class _Level(nn.Module):
    def __init__(self, res: ResBlock, attn: AttentionBlock | None, resample: nn.Module | None):
        super().__init__()
        self.res = res
        self.attn = attn
        self.resample = resample


class _Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Denoiser(nn.Module):
    """Noise prediction ``eps(latent, t, cond)`` on flat triplane tensors.

    ``latent`` is (B, 6C, H, W), geometry and color stacked per plane;
    ``cond`` is (B, 12C, H, W), init triplane then expanded encoding per
    plane.  The output has the latent's shape.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        config.validate()
        self.config = config
        C = config.triplane_channels
        g = config.num_groups
        temb = config.time_embed_dim
        self.latent_channels = 6 * C
        self.cond_channels = 12 * C
        cond_tok = 4 * C if config.uses_cross_attention else None

        self.time = TimeEmbedding(config.base_channels, temb)
        in_ch = 18 * C if config.uses_concat else 6 * C
        self.conv_in = nn.Conv2d(in_ch, config.base_channels, 3, padding=1)

        sizes, chans = config.level_sizes(), config.level_channels()
        attn_at = set(config.attention_resolutions)
        heads = config.attention_heads

        def attn(ch, size):
            return AttentionBlock(ch, heads, size, g, cond_tok) if size in attn_at else None

        self.down = nn.ModuleList()
        ch = config.base_channels
        for k, (size, out) in enumerate(zip(sizes, chans)):
            last = k == len(sizes) - 1
            down = None if last else nn.Conv2d(out, out, 3, stride=2, padding=1)
            self.down.append(_Level(ResBlock(ch, out, temb, g), attn(out, size), down))
            ch = out

        self.mid1 = ResBlock(ch, ch, temb, g)
        self.mid_attn = attn(ch, sizes[-1])
        self.mid2 = ResBlock(ch, ch, temb, g)

        self.up = nn.ModuleList()
        for k in reversed(range(len(sizes))):
            out = chans[k]
            up = _Upsample(out) if k > 0 else None
            self.up.append(_Level(ResBlock(ch + chans[k], out, temb, g), attn(out, sizes[k]), up))
            ch = out

        self.norm_out = nn.GroupNorm(g, ch)
        self.conv_out = nn.Conv2d(ch, self.latent_channels, 3, padding=1)

    def _check_inputs(self, latent, t, cond):
        c = self.config
        B = latent.shape[0]
        want = (B, self.latent_channels, c.resolution, c.resolution)
        if tuple(latent.shape) != want:
            raise ValueError(f"latent shape {tuple(latent.shape)} != {want}")
        if tuple(cond.shape) != (B, self.cond_channels, c.resolution, c.resolution):
            raise ValueError(f"condition shape {tuple(cond.shape)} does not match latent")
        if t.shape != (B,):
            raise ValueError(f"t must have shape ({B},)")
        if ((t < 1) | (t > c.num_timesteps)).any():
            raise ValueError(f"t outside [1, {c.num_timesteps}]")

    def forward(self, latent: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        if not isinstance(t, torch.Tensor):
            t = torch.full((latent.shape[0],), int(t), dtype=torch.long)
        self._check_inputs(latent, t, cond)
        C = self.config.triplane_channels
        temb = self.time(t)

        if self.config.uses_concat:
            planes = unflatten(cond)
            x = concat_condition(latent, planes[:, :, : 2 * C], planes[:, :, 2 * C :], flat=True)
        else:
            x = latent
        tokens = {}
        if self.config.uses_cross_attention:
            for r in self.config.attention_resolutions:
                tokens[r] = condition_tokens(cond, r)

        h = self.conv_in(x)
        skips = []
        for level in self.down:
            h = level.res(h, temb)
            if level.attn is not None:
                h = level.attn(h, tokens.get(h.shape[-1]))
            skips.append(h)
            if level.resample is not None:
                h = level.resample(h)

        h = self.mid1(h, temb)
        if self.mid_attn is not None:
            h = self.mid_attn(h, tokens.get(h.shape[-1]))
        h = self.mid2(h, temb)

        for level in self.up:
            h = level.res(torch.cat([h, skips.pop()], dim=1), temb)
            if level.attn is not None:
                h = level.attn(h, tokens.get(h.shape[-1]))
            if level.resample is not None:
                h = level.resample(h)

        return self.conv_out(F.silu(self.norm_out(h)))


def init_parameters(model: nn.Module, seed: int, zero_output: bool = True) -> None:
    """Fan-in scaled normal weights, zero biases, unit norm gains, zero output conv."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith("conv_out.") and zero_output:
                p.zero_()
            elif name.endswith("pos"):
                p.copy_(0.02 * torch.randn(p.shape, generator=g, dtype=p.dtype))
            elif name.endswith("bias"):
                p.zero_()
            elif p.ndim == 1:
                p.fill_(1.0)
            else:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) / math.sqrt(fan_in))


def build(config: DenoiserConfig, seed: int = 0) -> Denoiser:
    model = Denoiser(config)
    init_parameters(model, seed)
    return model


def parameter_manifest(config: DenoiserConfig) -> list[tuple[str, tuple[int, ...]]]:
    with torch.device("meta"):
        model = Denoiser(config)
    return [(n, tuple(p.shape)) for n, p in model.named_parameters()]


def collate(examples) -> TrainingExample:
    return TrainingExample(
        torch.cat([e.latent for e in examples]),
        torch.cat([e.t.reshape(-1) for e in examples]),
        torch.cat([e.eps for e in examples]),
        torch.cat([e.cond for e in examples]),
    )


def per_sample_loss(model, batch: TrainingExample) -> torch.Tensor:
    pred = model(batch.latent, batch.t, batch.cond)
    per = ((batch.eps - pred) ** 2).flatten(1).mean(1)
    bad = (~torch.isfinite(per)).nonzero()
    if bad.numel():
        idx = int(bad[0, 0])
        raise NumericalError(f"non-finite loss for sample {idx}", sample=idx)
    return per


def loss_and_gradients(model: nn.Module, batch) -> tuple[float, dict[str, torch.Tensor]]:
    """Mean squared noise-prediction error and its gradient for every parameter."""
    if isinstance(batch, (list, tuple)):
        if not batch:
            raise ValueError("batch is empty")
        batch = collate(batch)
    model.zero_grad(set_to_none=True)
    loss = per_sample_loss(model, batch).mean()
    loss.backward()
    grads = {
        n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for n, p in model.named_parameters()
    }
    return float(loss.detach()), grads


# -- checkpoint format -----------------------------------------------------


def pack_tensors(named) -> tuple[list[dict], bytes]:
    entries, chunks, offset = [], [], 0
    for name, tensor in named:
        data = tensor.detach().cpu().numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    return entries, b"".join(chunks)


def unpack_tensors(entries: list[dict], blob: bytes) -> dict[str, torch.Tensor]:
    out, offset = {}, 0
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if e["offset"] != offset or e["nbytes"] != nbytes:
            raise FormatError(f"entry {e['name']} has inconsistent offset/size", "schema")
        if offset + nbytes > len(blob):
            raise FormatError("tensor blob is truncated", "truncated")
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset).astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"non-finite values in {e['name']}", "nonfinite")
        out[e["name"]] = torch.from_numpy(arr.reshape(shape).copy())
        offset += nbytes
    if offset != len(blob):
        raise FormatError("tensor blob has trailing bytes", "truncated")
    return out


def save_checkpoint(model: Denoiser, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, blob = pack_tensors(model.named_parameters())
    manifest = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "config": model.config.to_dict(),
        "parameters": entries,
        "extra": extra or {},
    }
    (path / "params.bin").write_bytes(blob)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"{path}: no manifest.json", "missing")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: invalid JSON", "schema") from exc
    if manifest.get("format") != CKPT_FORMAT:
        raise FormatError(f"{mpath}: not a checkpoint manifest", "magic")
    if manifest.get("version") != CKPT_VERSION:
        raise FormatError(f"{mpath}: unsupported version {manifest.get('version')}", "version")
    return manifest


def load_checkpoint(path) -> tuple[Denoiser, dict]:
    """Rebuild the model from its manifest; returns ``(model, extra)``."""
    path = Path(path)
    manifest = read_manifest(path)
    try:
        config = DenoiserConfig.from_dict(manifest["config"])
        model = Denoiser(config)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid config ({exc})", "schema") from exc
    expected = [(n, list(p.shape)) for n, p in model.named_parameters()]
    found = [(e["name"], list(e["shape"])) for e in manifest["parameters"]]
    if expected != found:
        raise FormatError(f"{path}: parameter manifest does not match config", "schema")
    tensors = unpack_tensors(manifest["parameters"], (path / "params.bin").read_bytes())
    with torch.no_grad():
        for n, p in model.named_parameters():
            p.copy_(tensors[n])
    return model, manifest.get("extra", {})
