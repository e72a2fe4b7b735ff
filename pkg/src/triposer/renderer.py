"""Triplane decoding and orthographic emission-absorption rendering."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import FormatError
from .skeleton import WorldBounds
from .triplane import Triplane, sample_planes

AXIS_VIEWS = {
    "+x": (1.0, 0.0, 0.0), "-x": (-1.0, 0.0, 0.0),
    "+y": (0.0, 1.0, 0.0), "-y": (0.0, -1.0, 0.0),
    "+z": (0.0, 0.0, 1.0), "-z": (0.0, 0.0, -1.0),
}


@dataclass(frozen=True)
class RenderConfig:
    """``view`` is an axis name (the camera sits on that side of the cube) or (azimuth, elevation) in degrees."""

    size: int = 64
    view: str | tuple[float, float] = "+z"
    samples_per_ray: int = 128
    density_scale: float = 1.0
    sharpness: float = 20.0
    decoder: str = "analytic"

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if self.size < 8:
            raise ValueError("image size must be >= 8")
        if self.decoder not in ("analytic", "learned"):
            raise ValueError("decoder must be 'analytic' or 'learned'")
        if isinstance(self.view, str) and self.view.lower() not in AXIS_VIEWS:
            raise ValueError(f"unknown view {self.view!r}")


@dataclass(eq=False)
class Image:
    rgb: np.ndarray
    alpha: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape


# -- decoders --------------------------------------------------------------


def analytic_decode(geo: torch.Tensor, col: torch.Tensor, sharpness: float = 20.0):
    """Density and RGB from summed triplane features (``geo``/``col`` are (..., C))."""
    g0 = geo[..., 0] / 3.0
    density = F.softplus(sharpness * (g0 - 0.5))
    rgb = torch.clamp(col[..., :3] / 3.0, 0.0, 1.0)
    return density, rgb


class LearnedDecoder(nn.Module):
    """Two-layer MLP on the concatenated geometry+color feature."""

    def __init__(self, channels: int, hidden: int = 64):
        super().__init__()
        self.channels = channels
        self.hidden = hidden
        self.fc1 = nn.Linear(2 * channels, hidden)
        self.fc2 = nn.Linear(hidden, 4)

    def forward(self, geo, col):
        h = self.fc2(F.silu(self.fc1(torch.cat([geo, col], dim=-1))))
        return F.softplus(h[..., 0]), torch.sigmoid(h[..., 1:])


def decode(t: Triplane, p, mode: str = "analytic", sharpness: float = 20.0,
           decoder: LearnedDecoder | None = None):
    """Density (>= 0) and RGB at one point or an (M, 3) array of points."""
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts_t = torch.from_numpy(pts.reshape(1, -1, 3))
    geo = sample_planes(torch.from_numpy(t.geometry.astype(np.float64))[None], pts_t, t.bounds)[0]
    col = sample_planes(torch.from_numpy(t.color.astype(np.float64))[None], pts_t, t.bounds)[0]
    with torch.no_grad():
        if mode == "analytic":
            density, rgb = analytic_decode(geo, col, sharpness)
        elif mode == "learned":
            if decoder is None:
                raise ValueError("learned mode needs a decoder")
            density, rgb = decoder(geo.to(decoder.fc1.weight.dtype), col.to(decoder.fc1.weight.dtype))
        else:
            raise ValueError(f"unknown decoder mode {mode!r}")
    density, rgb = density.double().numpy(), rgb.double().numpy()
    if single:
        return float(density[0]), rgb[0]
    return density, rgb


# -- cameras and compositing -----------------------------------------------


def view_basis(view) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(forward, right, up) unit vectors for a camera looking at the cube center."""
    if isinstance(view, str):
        to_cam = np.array(AXIS_VIEWS[view.lower()])
    else:
        az, el = (math.radians(float(v)) for v in view)
        to_cam = np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
    forward = -to_cam
    world_up = np.array([0.0, 1.0, 0.0])
    if abs(forward @ world_up) > 1 - 1e-9:
        world_up = np.array([0.0, 0.0, -1.0]) if forward[1] < 0 else np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, world_up)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return forward, right, up


def camera_samples(bounds: WorldBounds, view, size: int, n: int, dtype=torch.float64):
    """Sample points (size, size, n, 3) and segment length for orthographic rays.

    Rays pass through pixel centers of an image plane spanning the cube's
    projected extent; samples sit at the midpoints of ``n`` equal segments
    covering the cube's extent along the view direction.
    """
    forward, right, up = view_basis(view)
    center = (np.asarray(bounds.lo) + np.asarray(bounds.hi)) / 2
    half = np.asarray(bounds.size) / 2
    ext_f = float(np.abs(forward) @ half)
    ext_img = float(max(np.abs(right) @ half, np.abs(up) @ half))
    s = (np.arange(size) + 0.5) / size * 2 - 1
    cols = s * ext_img
    rows = -s * ext_img
    depth = ((np.arange(n) + 0.5) / n * 2 - 1) * ext_f
    pts = (
        center
        + cols[None, :, None, None] * right
        + rows[:, None, None, None] * up
        + depth[None, None, :, None] * forward
    )
    return torch.as_tensor(pts, dtype=dtype), 2 * ext_f / n


def composite(density: torch.Tensor, rgb: torch.Tensor, delta: float):
    """Front-to-back alpha compositing along the second-to-last sample axis.

    ``density`` is (..., n), ``rgb`` (..., n, 3).  Returns premultiplied RGB
    (..., 3) and accumulated alpha (...).
    """
    alpha = 1.0 - torch.exp(-density * delta)
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[..., :1]), 1.0 - alpha[..., :-1]], dim=-1), dim=-1
    )
    w = trans * alpha
    return (w.unsqueeze(-1) * rgb).sum(-2), w.sum(-1)


def render_planes(geometry: torch.Tensor, color: torch.Tensor, bounds: WorldBounds, view,
                  size: int, samples: int, density_scale: float = 1.0, sharpness: float = 20.0,
                  decoder: LearnedDecoder | None = None):
    """Differentiable render of a batch of triplanes (B, 3, C, H, W) -> rgb (B, S, S, 3), alpha (B, S, S)."""
    B = geometry.shape[0]
    pts, delta = camera_samples(bounds, view, size, samples, geometry.dtype)
    flat = pts.reshape(1, -1, 3).expand(B, -1, -1)
    geo = sample_planes(geometry, flat, bounds)
    col = sample_planes(color, flat, bounds)
    if decoder is None:
        density, rgb = analytic_decode(geo, col, sharpness)
    else:
        density, rgb = decoder(geo, col)
    density = (density_scale * density).reshape(B, size, size, samples)
    rgb = rgb.reshape(B, size, size, samples, 3)
    return composite(density, rgb, delta)


def render(t: Triplane, cfg: RenderConfig = RenderConfig(), decoder: LearnedDecoder | None = None) -> Image:
    if cfg.decoder == "learned" and decoder is None:
        raise ValueError("learned decoder mode needs a decoder")
    dtype = decoder.fc1.weight.dtype if decoder is not None else torch.float64
    geo = torch.from_numpy(t.geometry).to(dtype)[None]
    col = torch.from_numpy(t.color).to(dtype)[None]
    with torch.no_grad():
        rgb, alpha = render_planes(
            geo, col, t.bounds, cfg.view, cfg.size, cfg.samples_per_ray,
            cfg.density_scale, cfg.sharpness, decoder if cfg.decoder == "learned" else None,
        )
    return Image(rgb[0].double().numpy().clip(0, 1), alpha[0].double().numpy().clip(0, 1))


# -- learned decoder fitting and storage -----------------------------------


def fit_learned_decoder(triplanes, steps: int = 500, points: int = 4096, seed: int = 0,
                        hidden: int = 64, lr: float = 1e-2, sharpness: float = 20.0) -> LearnedDecoder:
    """Regress the analytic decoder's outputs on random points of the given triplanes."""
    g = torch.Generator().manual_seed(seed)
    C = triplanes[0].channels
    torch.manual_seed(seed)
    dec = LearnedDecoder(C, hidden)
    opt = torch.optim.Adam(dec.parameters(), lr=lr)
    geos = torch.stack([torch.from_numpy(t.geometry) for t in triplanes])
    cols = torch.stack([torch.from_numpy(t.color) for t in triplanes])
    bounds = triplanes[0].bounds
    lo, hi = torch.tensor(bounds.lo), torch.tensor(bounds.hi)
    for _ in range(steps):
        pts = (lo + (hi - lo) * torch.rand((len(triplanes), points, 3), generator=g)).float()
        geo = sample_planes(geos, pts, bounds)
        col = sample_planes(cols, pts, bounds)
        d_ref, c_ref = analytic_decode(geo, col, sharpness)
        d, c = dec(geo, col)
        loss = F.mse_loss(torch.log1p(d), torch.log1p(d_ref)) + F.mse_loss(c, c_ref)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return dec


def save_decoder(decoder: LearnedDecoder, path) -> None:
    from .denoiser import pack_tensors

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, blob = pack_tensors(decoder.named_parameters())
    meta = {"channels": decoder.channels, "hidden": decoder.hidden, "parameters": entries}
    (path / "decoder.bin").write_bytes(blob)
    (path / "decoder.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_decoder(path) -> LearnedDecoder:
    from .denoiser import unpack_tensors

    path = Path(path)
    try:
        meta = json.loads((path / "decoder.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: no readable decoder.json", "missing") from exc
    dec = LearnedDecoder(meta["channels"], meta["hidden"])
    tensors = unpack_tensors(meta["parameters"], (path / "decoder.bin").read_bytes())
    with torch.no_grad():
        for n, p in dec.named_parameters():
            p.copy_(tensors[n])
    return dec


# -- image files -----------------------------------------------------------


def quantize(img: Image) -> np.ndarray:
    return np.round(np.clip(img.rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(img, path) -> None:
    """Binary PPM (P6, 8-bit).  ``img`` is an :class:`Image` or an (H, W, 3) uint8 array."""
    if not path:
        raise ValueError("empty output path")
    data = quantize(img) if isinstance(img, Image) else np.asarray(img, dtype=np.uint8)
    H, W, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header", "truncated")
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM", "magic")
    W, H, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported", "format")
    body = raw[pos + 1:]
    if len(body) != W * H * 3:
        raise FormatError(f"{path}: pixel data size mismatch", "truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(H, W, 3)


def contact_sheet(images) -> Image:
    """Tile frames left to right."""
    images = list(images)
    if not images:
        raise ValueError("no frames to tile")
    return Image(np.concatenate([i.rgb for i in images], axis=1),
                 np.concatenate([i.alpha for i in images], axis=1))
