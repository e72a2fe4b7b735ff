"""Training loop, reposing entry point and per-frame sequence generation."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import renderer
from .denoiser import (
    Denoiser, DenoiserConfig, build, load_checkpoint, save_checkpoint,
)
from .diffusion import NoiseSchedule, ancestral_sample, make_linear_schedule, predict_x0, training_example
from .errors import FormatError, NumericalError
from .skeleton import MotionSequence, Skeleton, encode, load_skeleton
from .synthetic import read_manifest
from .triplane import Triplane, condition_tensor, flatten, load, unflatten

# (until_iteration, reconstructions); ``None`` means "for all remaining iterations"
AVATAR_LADDER = ((50_000, 15), (100_000, 3), (None, 1))
REPOSE_LADDER = ((50_000, 30), (300_000, 15), (800_000, 5), (None, 1))


@dataclass
class TrainConfig:
    lr: float = 1e-4
    warmup: int = 500
    decay_step: int = 500_000
    decay_factor: float = 0.5
    total_iters: int = 2_000_000
    batch_size: int = 8
    recon_schedule: tuple = REPOSE_LADDER
    recon_weight: float = 0.1
    recon_size: int = 16
    recon_samples: int = 16
    seed: int = 0
    dataset: str = ""
    out_dir: str = "run"
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: dict = field(default_factory=lambda: {"T": 1000})
    checkpoint_every: int = 1000
    log_every: int = 1
    grad_clip: float = 0.0  # max global gradient norm; 0 disables

    def __post_init__(self):
        if isinstance(self.denoiser, dict):
            self.denoiser = DenoiserConfig.from_dict(self.denoiser)
        self.recon_schedule = tuple(
            (None if u is None else int(u), int(n)) for u, n in self.recon_schedule
        )
        self.validate()

    def validate(self) -> None:
        if self.total_iters < 1 or self.batch_size < 1:
            raise ValueError("total_iters and batch_size must be >= 1")
        if not 0 <= self.warmup < self.total_iters:
            raise ValueError("need 0 <= warmup < total_iters")
        if self.decay_step < 1 or not 0 < self.decay_factor <= 1:
            raise ValueError("decay_step must be >= 1 and decay_factor in (0, 1]")
        bounds = [u for u, _ in self.recon_schedule]
        if any(u is None for u in bounds[:-1]):
            raise ValueError("only the last reconstruction entry may be open-ended")
        finite = [u for u in bounds if u is not None]
        if any(b <= a for a, b in zip(finite, finite[1:])):
            raise ValueError("reconstruction schedule must be strictly increasing")
        if any(n < 0 for _, n in self.recon_schedule):
            raise ValueError("reconstruction counts must be >= 0")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("checkpoint_every and log_every must be >= 1")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")
        self.denoiser.validate()
        if int(self.schedule.get("T", 1000)) != self.denoiser.num_timesteps:
            raise ValueError("schedule T and denoiser num_timesteps differ")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["denoiser"] = self.denoiser.to_dict()
        d["recon_schedule"] = [list(e) for e in self.recon_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: cannot read config ({exc})", "schema") from exc
        return cls.from_dict(d)

    def noise_schedule(self) -> NoiseSchedule:
        return schedule_from_dict(self.schedule)


def schedule_from_dict(d: dict) -> NoiseSchedule:
    return make_linear_schedule(int(d.get("T", 1000)), d.get("gamma_start"), d.get("gamma_end"))


# -- optimizer schedules ---------------------------------------------------


def lr_at(it: int, cfg: TrainConfig) -> float:
    if it < 0:
        raise ValueError("iteration must be >= 0")
    warm = 1.0 if cfg.warmup == 0 else min(1.0, it / cfg.warmup)
    return cfg.lr * warm * cfg.decay_factor ** (it // cfg.decay_step)


def reconstructions_at(it: int, schedule) -> int:
    """Piecewise-constant lookup; an entry ``(until, n)`` covers iterations below ``until``."""
    if isinstance(schedule, TrainConfig):
        schedule = schedule.recon_schedule
    for until, n in schedule:
        if until is None or it < until:
            return int(n)
    return 0


# -- data ------------------------------------------------------------------


@dataclass(eq=False)
class TrainingSet:
    targets: torch.Tensor      # (N, 6C, H, W) flat latents
    conds: torch.Tensor        # (N, 12C, H, W)
    target_planes: list[Triplane]
    bounds: object
    entries: list[dict]

    def __len__(self) -> int:
        return self.targets.shape[0]


def condition_for(init: Triplane, target: Skeleton, config: DenoiserConfig) -> np.ndarray:
    """Flat (12C, H, W) conditioning stack for one (init, target skeleton) pair."""
    H, W = init.resolution
    enc = encode(target, init.bounds, H, W, mode=config.skeleton_encoding, sigma_px=config.heatmap_sigma_px)
    return flatten(condition_tensor(init, enc))


def load_training_set(path, config: DenoiserConfig) -> TrainingSet:
    path = Path(path)
    manifest = read_manifest(path / "manifest.json")
    params = manifest["params"]
    if params["C"] != config.triplane_channels or params["H"] != config.resolution or params["W"] != config.resolution:
        raise FormatError(
            f"dataset (C={params['C']}, {params['H']}x{params['W']}) does not match the denoiser config",
            "mismatch",
        )
    inits, targets, conds, planes = {}, [], [], []
    for e in manifest["samples"]:
        if e["init"] not in inits:
            inits[e["init"]] = load(path / e["init"])
        init = inits[e["init"]]
        target = load(path / e["target"])
        if target.resolution != init.resolution or target.bounds != init.bounds:
            raise FormatError(f"{e['target']}: metadata differs from its init triplane", "mismatch")
        targets.append(flatten(target.latent()))
        conds.append(condition_for(init, load_skeleton(path / e["skeleton"]), config))
        planes.append(target)
    return TrainingSet(
        torch.from_numpy(np.stack(targets)), torch.from_numpy(np.stack(conds).astype(np.float32)),
        planes, planes[0].bounds, manifest["samples"],
    )


# -- training --------------------------------------------------------------


@dataclass
class TrainState:
    model: Denoiser
    optimizer: torch.optim.Adam
    generator: torch.Generator
    iteration: int = 0


def _make_state(cfg: TrainConfig) -> TrainState:
    model = build(cfg.denoiser, seed=cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    gen = torch.Generator().manual_seed(cfg.seed)
    return TrainState(model, opt, gen, 0)


def save_train_state(state: TrainState, cfg: TrainConfig, path) -> Path:
    path = save_checkpoint(state.model, path, {"iteration": state.iteration, "train_config": cfg.to_dict()})
    torch.save(
        {"optimizer": state.optimizer.state_dict(), "generator": state.generator.get_state(),
         "iteration": state.iteration},
        path / "train_state.pt",
    )
    return path


def load_train_state(path, cfg: TrainConfig) -> TrainState:
    path = Path(path)
    model, extra = load_checkpoint(path)
    if model.config.to_dict() != cfg.denoiser.to_dict():
        raise FormatError(f"{path}: checkpoint config differs from the run config", "mismatch")
    try:
        blob = torch.load(path / "train_state.pt", weights_only=True)
    except (OSError, RuntimeError) as exc:
        raise FormatError(f"{path}: no optimizer state to resume from", "missing") from exc
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    opt.load_state_dict(blob["optimizer"])
    gen = torch.Generator()
    gen.set_state(blob["generator"])
    return TrainState(model, opt, gen, int(blob["iteration"]))


def random_views(n: int, generator: torch.Generator) -> list[tuple[float, float]]:
    u = torch.rand((n, 2), generator=generator, dtype=torch.float64)
    return [(float(360.0 * a), float(180.0 / math.pi * math.asin(2.0 * b - 1.0))) for a, b in u]


def reconstruction_loss(x0_hat: torch.Tensor, x0: torch.Tensor, bounds, views, cfg: TrainConfig) -> torch.Tensor:
    """Mean image MSE between renders of predicted and true triplanes, one random view per term.

    ``x0_hat`` and ``x0`` are (n, 6C, H, W); term ``i`` uses ``views[i]``.
    """
    C = cfg.denoiser.triplane_channels
    pred = unflatten(x0_hat.clamp(-1.0, 1.0))
    true = unflatten(x0)
    terms = []
    for i, view in enumerate(views):
        rgb_p, a_p = renderer.render_planes(pred[i:i + 1, :, :C], pred[i:i + 1, :, C:], bounds, view,
                                            cfg.recon_size, cfg.recon_samples)
        with torch.no_grad():
            rgb_t, a_t = renderer.render_planes(true[i:i + 1, :, :C], true[i:i + 1, :, C:], bounds, view,
                                                cfg.recon_size, cfg.recon_samples)
        terms.append(((rgb_p - rgb_t) ** 2).mean() + ((a_p - a_t) ** 2).mean())
    return torch.stack(terms).mean()


def train_step(state: TrainState, data: TrainingSet, sched: NoiseSchedule, cfg: TrainConfig) -> dict:
    it = state.iteration
    g = state.generator
    idx = torch.randint(0, len(data), (cfg.batch_size,), generator=g)
    F0 = data.targets[idx]
    ex = training_example(F0, data.conds[idx], sched, g)
    n_rec = reconstructions_at(it, cfg.recon_schedule)
    lr = lr_at(it, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    model = state.model
    model.train()
    state.optimizer.zero_grad(set_to_none=True)
    eps_hat = model(ex.latent, ex.t, ex.cond)
    per = ((ex.eps - eps_hat) ** 2).flatten(1).mean(1)
    bad = (~torch.isfinite(per)).nonzero()
    if bad.numel():
        k = int(bad[0, 0])
        raise NumericalError(f"non-finite loss at iteration {it} (sample {int(idx[k])})",
                             iteration=it, sample=int(idx[k]))
    eps_loss = per.mean()
    loss = eps_loss
    rec_val = 0.0
    if n_rec > 0 and cfg.recon_weight > 0:
        pick = torch.randint(0, cfg.batch_size, (n_rec,), generator=g)
        views = random_views(n_rec, g)
        x0_hat = predict_x0(ex.latent[pick], ex.t[pick], eps_hat[pick], sched)
        rec = reconstruction_loss(x0_hat, F0[pick], data.bounds, views, cfg)
        loss = loss + cfg.recon_weight * rec
        rec_val = float(rec.detach())
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss at iteration {it}", iteration=it)
    loss.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    if cfg.grad_clip > 0:
        gnorm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip))
    else:
        gnorm = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(p.grad) for p in params])))
    state.optimizer.step()
    state.iteration += 1
    return {"iter": it, "loss": loss.item(), "eps_loss": eps_loss.item(), "recon_loss": rec_val,
            "lr": lr, "reconstructions": n_rec, "grad_norm": gnorm}


def train(cfg: TrainConfig, resume=None, data: TrainingSet | None = None, max_iters: int | None = None,
          on_log=None) -> Path:
    """Run (or resume) training; returns the final checkpoint directory.

    Checkpoints land in ``<out_dir>/ckpt_<iter>``; the run log is
    ``<out_dir>/log.jsonl``.  ``max_iters`` stops early (used for
    interrupted-run tests) without changing what each step computes.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = load_training_set(cfg.dataset, cfg.denoiser)
    sched = cfg.noise_schedule()
    state = load_train_state(resume, cfg) if resume else _make_state(cfg)
    stop = cfg.total_iters if max_iters is None else min(cfg.total_iters, max_iters)
    log_path = out / "log.jsonl"
    mode = "a" if resume else "w"
    t_start = time.perf_counter()
    last = None
    with open(log_path, mode) as log:
        while state.iteration < stop:
            try:
                rec = train_step(state, data, sched, cfg)
            except NumericalError as exc:
                dump = save_train_state(state, cfg, out / f"abort_{state.iteration:07d}")
                exc.diagnostics["state_dump"] = str(dump)
                raise
            rec["wall_time"] = time.perf_counter() - t_start
            if rec["iter"] % cfg.log_every == 0:
                log.write(json.dumps(rec) + "\n")
            if on_log is not None:
                on_log(rec)
            if state.iteration % cfg.checkpoint_every == 0 or state.iteration == stop:
                last = save_train_state(state, cfg, out / f"ckpt_{state.iteration:07d}")
    if last is None:
        last = save_train_state(state, cfg, out / f"ckpt_{state.iteration:07d}")
    return last


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- generation ------------------------------------------------------------


def _check_compatible(model: Denoiser, init: Triplane, sched: NoiseSchedule) -> None:
    cfg = model.config
    if init.channels != cfg.triplane_channels or init.resolution != (cfg.resolution, cfg.resolution):
        raise FormatError(
            f"init triplane (C={init.channels}, {init.resolution}) does not match the model "
            f"(C={cfg.triplane_channels}, {cfg.resolution})", "mismatch",
        )
    if sched.T != cfg.num_timesteps:
        raise FormatError(f"schedule has {sched.T} steps, model was built for {cfg.num_timesteps}", "mismatch")


CLIP_X0 = 1.0  # triplane features live in [-1, 1]


def repose(model: Denoiser, init: Triplane, target: Skeleton, sched: NoiseSchedule, seed: int,
           clip_x0: float | None = CLIP_X0) -> Triplane:
    """One full reverse diffusion run conditioned on ``init`` and the encoded ``target``."""
    _check_compatible(model, init, sched)
    cond = torch.from_numpy(condition_for(init, target, model.config))[None].float()
    C, H, W = init.channels, *init.resolution
    gen = torch.Generator().manual_seed(int(seed))
    model.eval()
    x = ancestral_sample(model, cond, sched, gen, (1, 6 * C, H, W), clip_x0=clip_x0)
    return Triplane.from_latent(x[0], init.bounds, init.kind)


def repose_batch(model: Denoiser, inits, targets, sched: NoiseSchedule, seed: int,
                 batch_size: int = 64, clip_x0: float | None = CLIP_X0) -> list[Triplane]:
    """Batched reposing for evaluation; deterministic in ``seed`` but not equal to per-call :func:`repose`."""
    if len(inits) != len(targets):
        raise ValueError("inits and targets differ in length")
    for init in inits:
        _check_compatible(model, init, sched)
    gen = torch.Generator().manual_seed(int(seed))
    model.eval()
    out = []
    for s in range(0, len(inits), batch_size):
        chunk = list(zip(inits[s:s + batch_size], targets[s:s + batch_size]))
        cond = torch.from_numpy(np.stack([condition_for(i, t, model.config) for i, t in chunk])).float()
        C, (H, W) = chunk[0][0].channels, chunk[0][0].resolution
        x = ancestral_sample(model, cond, sched, gen, (len(chunk), 6 * C, H, W), clip_x0=clip_x0)
        out.extend(Triplane.from_latent(x[k], i.bounds, i.kind) for k, (i, _) in enumerate(chunk))
    return out


def frame_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(t)]).generate_state(1)[0])


def animate(model: Denoiser, init: Triplane, motion: MotionSequence, sched: NoiseSchedule, seed: int,
            frame_seeds=None, chain: bool = False, on_frame=None,
            clip_x0: float | None = CLIP_X0) -> list[Triplane]:
    """One :func:`repose` per motion frame, all anchored on ``init``.

    ``chain=True`` instead conditions frame ``t`` on frame ``t - 1``'s
    output (experimental).  ``on_frame(t, triplane)`` is called as each
    frame completes so callers can flush partial results.
    """
    K = len(motion)
    seeds = [frame_seed(seed, t) for t in range(K)] if frame_seeds is None else list(frame_seeds)
    if len(seeds) != K:
        raise ValueError("need one seed per frame")
    frames, anchor = [], init
    for t in range(K):
        out = repose(model, anchor, motion.frames[t], sched, seeds[t], clip_x0=clip_x0)
        frames.append(out)
        if chain:
            anchor = out
        if on_frame is not None:
            on_frame(t, out)
    return frames


# -- evaluation helpers ----------------------------------------------------


def geometry_psnr(pred: Triplane, ref: Triplane, peak: float = 2.0) -> float:
    """PSNR over all geometry channels; ``peak`` is the value range ([-1, 1] -> 2)."""
    mse = float(np.mean((pred.geometry.astype(np.float64) - ref.geometry) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    from scipy.ndimage import binary_dilation

    if radius <= 0:
        return mask.astype(bool)
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    disk = xx * xx + yy * yy <= radius * radius
    return np.stack([binary_dilation(m, structure=disk) for m in mask.astype(bool)])


def support_iou(pred: Triplane, target: Skeleton, threshold: float = 0.5, dilation: int = 2) -> float:
    """IoU between geometry-channel-0 support and the dilated skeleton occupancy, over all planes."""
    H, W = pred.resolution
    occ = encode(target, pred.bounds, H, W).occupancy
    ref = dilate(occ, dilation)
    sup = pred.geometry[:, 0] > threshold
    union = (sup | ref).sum()
    return float((sup & ref).sum() / union) if union else 1.0
