"""Triplane feature container, plane sampling and the ``TRPL`` binary format.

Layout is ``(plane, channel, row, col)`` with planes ordered XY, XZ, YZ,
the same order used by :mod:`triposer.skeleton`.  Geometry and color live in
two separate tensors and are only stacked per plane when forming a diffusion
latent ``(3, 2C, H, W)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FormatError
from .skeleton import HeatmapEncoding, SkeletonEncoding, WorldBounds, expand_to_channels

MAGIC = b"TRPL"
VERSION = 1
KIND_AVATAR = 0
KIND_ENCODING = 1

_HEADER = struct.Struct("<4sIIIII")
_BOUNDS = struct.Struct("<6d")
HEADER_SIZE = _HEADER.size + _BOUNDS.size


@dataclass(eq=False)
class Triplane:
    geometry: np.ndarray
    color: np.ndarray
    bounds: WorldBounds = field(default_factory=WorldBounds)
    kind: int = KIND_AVATAR

    def __post_init__(self):
        self.geometry = np.ascontiguousarray(self.geometry, dtype=np.float32)
        self.color = np.ascontiguousarray(self.color, dtype=np.float32)
        g, c = self.geometry.shape, self.color.shape
        if len(g) != 4 or g[0] != 3:
            raise ValueError(f"geometry must be (3, C, H, W), got {g}")
        if g != c:
            raise ValueError(f"geometry {g} and color {c} shapes differ")
        if not (np.all(np.isfinite(self.geometry)) and np.all(np.isfinite(self.color))):
            raise ValueError("triplane values must be finite")

    @property
    def channels(self) -> int:
        return self.geometry.shape[1]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.geometry.shape[2], self.geometry.shape[3]

    def latent(self) -> np.ndarray:
        """Geometry and color stacked per plane, shape (3, 2C, H, W)."""
        return np.concatenate([self.geometry, self.color], axis=1)

    @classmethod
    def from_latent(cls, latent, bounds: WorldBounds, kind: int = KIND_AVATAR) -> "Triplane":
        x = latent.detach().cpu().numpy() if isinstance(latent, torch.Tensor) else np.asarray(latent)
        if x.ndim == 3:
            x = unflatten(x)
        C = x.shape[1] // 2
        return cls(x[:, :C], x[:, C:], bounds, kind)

    def bit_equal(self, other: "Triplane") -> bool:
        return (
            self.kind == other.kind
            and self.bounds == other.bounds
            and self.geometry.shape == other.geometry.shape
            and self.geometry.tobytes() == other.geometry.tobytes()
            and self.color.tobytes() == other.color.tobytes()
        )


def zeros_like_triplane(C: int, H: int, W: int, bounds: WorldBounds | None = None) -> Triplane:
    z = np.zeros((3, C, H, W), dtype=np.float32)
    return Triplane(z, z.copy(), bounds or WorldBounds())


# -- reshaping -------------------------------------------------------------


def flatten(x):
    """(..., 3, C, H, W) -> (..., 3C, H, W); flat channel k is plane k // C, channel k % C."""
    if x.ndim < 4 or x.shape[-4] != 3:
        raise ValueError(f"expected (..., 3, C, H, W), got {tuple(x.shape)}")
    s = tuple(x.shape)
    return x.reshape(s[:-4] + (3 * s[-3],) + s[-2:])


def unflatten(x):
    """(..., 3C, H, W) -> (..., 3, C, H, W)."""
    s = tuple(x.shape)
    if x.ndim < 3 or s[-3] % 3:
        raise ValueError(f"flat channel count must be divisible by 3, got {s}")
    return x.reshape(s[:-3] + (3, s[-3] // 3) + s[-2:])


def _cat(parts, axis):
    if isinstance(parts[0], torch.Tensor):
        return torch.cat(parts, dim=axis)
    return np.concatenate(parts, axis=axis)


def concat_condition(latent, init, enc, flat: bool = False):
    """Stack noisy latent, init triplane and expanded encoding per plane.

    Per-plane channel order: latent (2C: geometry then color), init geometry
    (C), init color (C), occupancy block (C), index block (C); 6C in total.
    ``latent`` may be flat (3 * 2C channels) or per-plane; leading batch
    dimensions are carried through.
    """
    if isinstance(init, Triplane):
        init = init.latent()
    # a flat batch of three (3, 6C, H, W) looks per-plane by ndim; the channel
    # count (2C per plane, like init) tells them apart
    if latent.ndim >= 4 and latent.shape[-4] == 3 and latent.shape[-3] == init.shape[-3]:
        lat = latent
    else:
        lat = unflatten(latent)
    if isinstance(enc, (SkeletonEncoding, HeatmapEncoding)):
        enc = expand_to_channels(enc, lat.shape[-3] // 2)
    if isinstance(lat, torch.Tensor):
        init = torch.as_tensor(init, dtype=lat.dtype)
        enc = torch.as_tensor(enc, dtype=lat.dtype)
        if lat.ndim > init.ndim:
            init = init.expand(lat.shape[:-4] + tuple(init.shape))
            enc = enc.expand(lat.shape[:-4] + tuple(enc.shape))
    else:
        init = np.broadcast_to(init, lat.shape[:-4] + init.shape)
        enc = np.broadcast_to(enc, lat.shape[:-4] + enc.shape)
    C2 = lat.shape[-3]
    if C2 % 2 or init.shape[-3] != C2 or enc.shape[-3] != C2:
        raise ValueError(
            f"channel mismatch: latent {C2}, init {init.shape[-3]}, encoding {enc.shape[-3]}"
        )
    if lat.shape[-2:] != init.shape[-2:] or lat.shape[-2:] != enc.shape[-2:]:
        raise ValueError("latent, init and encoding resolutions differ")
    out = _cat([lat, init, enc], axis=-3)
    return flatten(out) if flat else out


def condition_tensor(init: Triplane, enc) -> np.ndarray:
    """Init triplane plus expanded encoding, (3, 4C, H, W): the non-noise part of the stack."""
    return np.concatenate([init.latent(), expand_to_channels(enc, init.channels)], axis=1)


# -- sampling --------------------------------------------------------------


def _plane_grids(points: torch.Tensor, bounds: WorldBounds) -> torch.Tensor:
    lo = torch.tensor(bounds.lo, dtype=points.dtype)
    hi = torch.tensor(bounds.hi, dtype=points.dtype)
    g = (points - lo) / (hi - lo) * 2 - 1
    # grid_sample wants (x=column, y=row); rows run from the axis max downward
    return torch.stack(
        [
            torch.stack([g[..., 0], -g[..., 1]], -1),
            torch.stack([g[..., 0], -g[..., 2]], -1),
            torch.stack([g[..., 1], -g[..., 2]], -1),
        ],
        dim=-3,
    )


def sample_planes(planes: torch.Tensor, points: torch.Tensor, bounds: WorldBounds) -> torch.Tensor:
    """Bilinear triplane lookup summed over the three planes.

    ``planes`` is (B, 3, C, H, W), ``points`` (B, M, 3); returns (B, M, C).
    Samples within half a pixel of the border clamp to the edge texel and
    points outside the bounds cube read as zero.  Differentiable in both
    arguments.
    """
    B, _, C, H, W = planes.shape
    M = points.shape[1]
    grid = _plane_grids(points, bounds).reshape(B * 3, 1, M, 2)
    out = F.grid_sample(
        planes.reshape(B * 3, C, H, W), grid,
        mode="bilinear", padding_mode="border", align_corners=False,
    )
    out = out.reshape(B, 3, C, M).sum(1).transpose(1, 2)
    lo = torch.tensor(bounds.lo, dtype=points.dtype)
    hi = torch.tensor(bounds.hi, dtype=points.dtype)
    inside = ((points >= lo) & (points <= hi)).all(-1)
    return out * inside.unsqueeze(-1).to(out.dtype)


def query_points(t: Triplane, points, field: str = "geometry") -> np.ndarray:
    """Vectorised :func:`query` over an (M, 3) array of points; returns (M, C) float64."""
    if field not in ("geometry", "color"):
        raise ValueError(f"field must be 'geometry' or 'color', not {field!r}")
    planes = torch.from_numpy(getattr(t, field).astype(np.float64))[None]
    pts = torch.from_numpy(np.array(points, dtype=np.float64).reshape(1, -1, 3))
    return sample_planes(planes, pts, t.bounds)[0].numpy()


def query(t: Triplane, p, field: str = "geometry") -> np.ndarray:
    """Feature C-vector at world point ``p``."""
    return query_points(t, np.asarray(p, dtype=np.float64)[None], field)[0]


# -- serialization ---------------------------------------------------------


def to_bytes(t: Triplane) -> bytes:
    C = t.channels
    H, W = t.resolution
    header = _HEADER.pack(MAGIC, VERSION, t.kind, C, H, W) + _BOUNDS.pack(*t.bounds.to_list())
    return header + t.geometry.astype("<f4").tobytes() + t.color.astype("<f4").tobytes()


def from_bytes(data: bytes) -> Triplane:
    if len(data) < HEADER_SIZE:
        raise FormatError("file shorter than the TRPL header", "truncated")
    magic, version, kind, C, H, W = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", "magic")
    if version != VERSION:
        raise FormatError(f"unsupported TRPL version {version}", "version")
    if kind not in (KIND_AVATAR, KIND_ENCODING):
        raise FormatError(f"unknown TRPL kind {kind}", "kind")
    n = 3 * C * H * W
    expected = HEADER_SIZE + 2 * n * 4
    if len(data) != expected:
        raise FormatError(f"payload is {len(data)} bytes, header implies {expected}", "truncated")
    try:
        bounds = WorldBounds.from_list(_BOUNDS.unpack_from(data, _HEADER.size))
    except ValueError as exc:
        raise FormatError(f"invalid bounds: {exc}", "bounds") from exc
    body = np.frombuffer(data, dtype="<f4", offset=HEADER_SIZE).astype(np.float32)
    if not np.all(np.isfinite(body)):
        raise FormatError("non-finite values in payload", "nonfinite")
    geometry = body[:n].reshape(3, C, H, W)
    color = body[n:].reshape(3, C, H, W)
    return Triplane(geometry, color, bounds, kind)


def save(t: Triplane, path) -> None:
    Path(path).write_bytes(to_bytes(t))


def load(path) -> Triplane:
    return from_bytes(Path(path).read_bytes())


def encoding_to_triplane(enc, C: int, bounds: WorldBounds) -> Triplane:
    """Debug dump of an expanded encoding: occupancy block as geometry, index block as color."""
    x = expand_to_channels(enc, C)
    return Triplane(x[:, :C], x[:, C:], bounds, KIND_ENCODING)


def triplane_to_encoding(t: Triplane) -> SkeletonEncoding:
    if t.kind != KIND_ENCODING:
        raise FormatError("triplane file does not hold a skeleton encoding", "kind")
    return SkeletonEncoding(t.geometry[:, 0].round(), t.color[:, 0].astype(np.float64))
