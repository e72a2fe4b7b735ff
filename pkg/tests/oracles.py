"""Independent slow reference implementations used as test oracles.

Everything here is written per pixel / per point with plain Python floats so
that it shares no vectorised code path with the package.
"""
from __future__ import annotations

import math

import numpy as np

AXES = {0: (0, 1), 1: (0, 2), 2: (1, 2)}


def to_pixel(p, plane, lo, hi, H, W):
    a, b = AXES[plane]
    u = (p[a] - lo[a]) / (hi[a] - lo[a]) * W
    v = (hi[b] - p[b]) / (hi[b] - lo[b]) * H
    return u, v


def seg_dist2(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    t = 0.0
    if L2 != 0.0:
        t = ((px - ax) * dx + (py - ay) * dy) / L2
        t = min(1.0, max(0.0, t))
    ex = px - (ax + t * dx)
    ey = py - (ay + t * dy)
    return ex * ex + ey * ey


def rasterize(joints, bones, plane, lo, hi, H, W, r, hw):
    """Per-pixel occupancy/index: joints first (lowest index), then bones by (i+j, i)."""
    n = len(joints)
    uv = [to_pixel(j, plane, lo, hi, H, W) for j in joints]
    ranked_bones = sorted((min(b), max(b)) for b in bones)
    ranked_bones.sort(key=lambda b: (b[0] + b[1], b[0]))
    occ = np.zeros((H, W), dtype=np.uint8)
    idx = np.zeros((H, W), dtype=np.float64)
    r2, hw2 = r * r, hw * hw
    for row in range(H):
        py = row + 0.5
        for col in range(W):
            px = col + 0.5
            value = None
            for i in range(n):
                du, dv = px - uv[i][0], py - uv[i][1]
                if du * du + dv * dv <= r2:
                    value = i / (n - 1)
                    break
            if value is None:
                for i, j in ranked_bones:
                    if seg_dist2(px, py, uv[i][0], uv[i][1], uv[j][0], uv[j][1]) <= hw2:
                        value = (i + j) / (2 * (n - 1))
                        break
            if value is not None:
                occ[row, col] = 1
                idx[row, col] = value
    return occ, idx


def bilinear_plane(img, u, v):
    """Sample a (H, W) image at continuous pixel coords with edge clamping (texel centers at +0.5)."""
    H, W = img.shape
    x = min(max(u - 0.5, 0.0), W - 1.0)
    y = min(max(v - 0.5, 0.0), H - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    fx, fy = x - x0, y - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def triplane_query(planes, p, lo, hi):
    """planes: (3, C, H, W) float64; sum of bilinear samples, zero outside the box."""
    if any(p[k] < lo[k] or p[k] > hi[k] for k in range(3)):
        return np.zeros(planes.shape[1])
    _, C, H, W = planes.shape
    out = np.zeros(C)
    for plane in range(3):
        u, v = to_pixel(p, plane, lo, hi, H, W)
        for c in range(C):
            out[c] += bilinear_plane(planes[plane, c], u, v)
    return out


def capsule_plane_grid(joints, segs, radii, colors, plane, lo, hi, H, W, C, tau):
    """Per-pixel ground truth for one plane: returns (geometry (C,H,W), color (C,H,W))."""
    a, b = AXES[plane]
    geo = np.zeros((C, H, W))
    col = np.zeros((C, H, W))
    for row in range(H):
        wy = hi[b] - (row + 0.5) / H * (hi[b] - lo[b])
        for c_ in range(W):
            wx = lo[a] + (c_ + 0.5) / W * (hi[a] - lo[a])
            best, best_s, best_k = math.inf, 0.0, 0
            for k, (i, j) in enumerate(segs):
                ax, ay = joints[i][a], joints[i][b]
                dx, dy = joints[j][a] - ax, joints[j][b] - ay
                L2 = dx * dx + dy * dy
                s = 0.0 if L2 == 0 else min(1.0, max(0.0, ((wx - ax) * dx + (wy - ay) * dy) / L2))
                d = math.hypot(wx - (ax + s * dx), wy - (ay + s * dy)) - radii[k]
                if d < best:
                    best, best_s, best_k = d, s, k
            g0 = min(1.0, max(0.0, 1.0 - best / tau))
            geo[0, row, c_] = g0
            for ch in range(1, C):
                f = (ch + 1) // 2
                ang = math.pi * f * best_s
                geo[ch, row, c_] = g0 * (math.sin(ang) if ch % 2 else math.cos(ang))
            if g0 > 0:
                col[:3, row, c_] = colors[best_k]
    return geo, col


def capsule_hit(char_joints, segs, radii, origin, direction, t0, t1, n):
    """True when any of ``n`` midpoint samples along the ray lies inside a capsule."""
    for s in range(n):
        t = t0 + (s + 0.5) * (t1 - t0) / n
        p = [origin[k] + t * direction[k] for k in range(3)]
        for k, (i, j) in enumerate(segs):
            A, B = char_joints[i], char_joints[j]
            d = [B[q] - A[q] for q in range(3)]
            L2 = sum(x * x for x in d)
            w = 0.0 if L2 == 0 else min(1.0, max(0.0, sum((p[q] - A[q]) * d[q] for q in range(3)) / L2))
            e2 = sum((p[q] - (A[q] + w * d[q])) ** 2 for q in range(3))
            if e2 <= radii[k] ** 2:
                return True
    return False


# -- gradients ------------------------------------------------------------------


def directional_fd_errors(fn, tensors, n_dirs=100, seed=0, h=1e-5):
    """Relative errors between autograd and central-difference directional derivatives.

    ``fn()`` returns a scalar and reads the float64 leaf ``tensors`` (which
    are perturbed in place).  Directions are random unit vectors over the
    concatenation of all tensors.
    """
    import torch

    for t in tensors:
        t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    gen = torch.Generator().manual_seed(seed)
    errs = []
    with torch.no_grad():
        for _ in range(n_dirs):
            dirs = [torch.randn(t.shape, generator=gen, dtype=t.dtype) for t in tensors]
            norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
            dirs = [d / norm for d in dirs]
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
            for t, d in zip(tensors, dirs):
                t.add_(h * d)
            up = float(fn())
            for t, d in zip(tensors, dirs):
                t.sub_(2 * h * d)
            down = float(fn())
            for t, d in zip(tensors, dirs):
                t.add_(h * d)
            fd = (up - down) / (2 * h)
            errs.append(abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8))
    return errs


def check_module_gradients(module, inputs, n_dirs=100, seed=0):
    """Max relative FD error over parameters and float inputs of ``module`` (float64, perturbed init)."""
    import torch

    from triposer.denoiser import init_parameters

    module = module.double()
    gen = torch.Generator().manual_seed(seed + 100)
    init_parameters(module, seed, zero_output=False)
    with torch.no_grad():
        for p in module.parameters():  # nonzero biases/positions so every path is exercised
            p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    leaves = [x.double().requires_grad_() for x in inputs if x.is_floating_point()]
    params = list(module.parameters())
    out0 = None

    def fn():
        it = iter(leaves)
        args = [next(it) if x.is_floating_point() else x for x in inputs]
        out = module(*args)
        nonlocal out0
        if out0 is None:
            out0 = torch.randn(out.shape, generator=torch.Generator().manual_seed(seed), dtype=out.dtype)
        return (out * out0).sum()

    errs = directional_fd_errors(fn, params + leaves, n_dirs=n_dirs, seed=seed)
    return max(errs)


def count_parameters(cfg) -> int:
    """Parameter count of the U-Net from its layer formula (no module instantiation)."""
    C, base, temb = cfg.triplane_channels, cfg.base_channels, cfg.time_embed_dim
    sizes = [cfg.resolution >> k for k in range(len(cfg.channel_multipliers))]
    chans = [base * m for m in cfg.channel_multipliers]
    attn_at = set(cfg.attention_resolutions)
    cross = cfg.conditioning_mode in ("cross_attention", "both")
    concat = cfg.conditioning_mode in ("concat", "both")
    cc = 4 * C

    def lin(i, o):
        return i * o + o

    def conv(i, o, k):
        return i * o * k * k + o

    def res(i, o):
        n = 2 * i + conv(i, o, 3) + lin(temb, o) + 2 * o + conv(o, o, 3)
        return n + (conv(i, o, 1) if i != o else 0)

    def attn(ch, s):
        if s not in attn_at:
            return 0
        n = 2 * ch + lin(ch, 3 * ch) + lin(ch, ch) + s * s * ch
        if cross:
            n += 2 * ch + lin(ch, ch) + lin(cc, 2 * ch) + lin(ch, ch) + s * s * ch + 3 * s * s * cc
        return n

    total = lin(base, temb) + lin(temb, temb)
    total += conv((18 if concat else 6) * C, base, 3)
    ch = base
    for k, (s, o) in enumerate(zip(sizes, chans)):
        total += res(ch, o) + attn(o, s)
        if k < len(sizes) - 1:
            total += conv(o, o, 3)
        ch = o
    total += 2 * res(ch, ch) + attn(ch, sizes[-1])
    for k in reversed(range(len(sizes))):
        o = chans[k]
        total += res(ch + o, o) + attn(o, sizes[k])
        if k > 0:
            total += conv(o, o, 3)
        ch = o
    return total + 2 * ch + conv(ch, 6 * C, 3)


def orthographic_rays(view, size, lo, hi):
    """Ray origins (size, size, 3) on the near face and unit direction for an orthographic camera.

    Rebuilt here from the camera definition (look at the cube center, world
    +y up, image rows top to bottom) rather than reusing the renderer.
    """
    if isinstance(view, str):
        axis = "xyz".index(view[1])
        to_cam = np.zeros(3)
        to_cam[axis] = 1.0 if view[0] == "+" else -1.0
    else:
        az, el = math.radians(view[0]), math.radians(view[1])
        to_cam = np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
    d = -to_cam
    up0 = np.array([0.0, 1.0, 0.0])
    if abs(d[1]) > 1 - 1e-9:
        up0 = np.array([0.0, 0.0, 1.0 if d[1] > 0 else -1.0])
    right = np.cross(d, up0)
    right /= np.linalg.norm(right)
    up = np.cross(right, d)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    c, half = (lo + hi) / 2, (hi - lo) / 2
    depth = float(np.abs(d) @ half)
    span = float(max(np.abs(right) @ half, np.abs(up) @ half))
    s = ((np.arange(size) + 0.5) / size * 2 - 1) * span
    origins = c - depth * d + s[None, :, None] * right - s[:, None, None] * up
    return origins, d, 2 * depth


def capsule_silhouette(joints, segs, radii, view, size, lo, hi, n):
    """Boolean (size, size) mask: some midpoint sample along the pixel's ray lies inside a capsule."""
    origins, d, length = orthographic_rays(view, size, lo, hi)
    ts = (np.arange(n) + 0.5) / n * length
    P = origins[:, :, None, :] + ts[None, None, :, None] * d
    hit = np.zeros(P.shape[:3], dtype=bool)
    for (i, j), r in zip(segs, radii):
        a, b = np.asarray(joints[i], float), np.asarray(joints[j], float)
        ab = b - a
        L2 = ab @ ab
        w = np.zeros(P.shape[:3]) if L2 == 0 else np.clip((P - a) @ ab / L2, 0.0, 1.0)
        e = P - (a + w[..., None] * ab)
        hit |= (e * e).sum(-1) <= r * r
    return hit.any(-1)
