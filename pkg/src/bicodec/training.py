"""Multi-rate rate-distortion training on synthetic frame triplets.

Each step runs the full B-frame pipeline at every rate level and minimizes

    L = sum_n (lambda_n * D_n + R_n)

with one gain/inverse-gain pair per level.  The level-independent prefix
(motion prediction, motion encoding, hyper encoding) is computed once; the
per-level paths are evaluated in a single pass by stacking the levels along
the batch axis, which is numerically identical to looping and summing.

The intra (keyframe) model is fine-tuned jointly: by default each step
trains it at one rotating rate level, weighted by ``intra_weight``.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import gain as gn
from . import networks as nw
from . import warp
from .autodiff import Tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambdas: tuple = (0.0067, 0.025, 0.048, 0.093)
    batch_size: int = 4
    patch_size: int = 64
    iterations: int = 10_000
    learning_rate: float = 1e-4
    plateau_patience: int = 1_000
    clip_norm: float = 1.0
    seed: int = 0
    level_sample: bool = False  # draw one level per step instead of the full sum
    intra_weight: float = 1.0
    intra_rotate: bool = True  # train the intra model at one rotating level per step
    loss_smoothing: float = 0.99
    checkpoint_every: int = 2_000
    dtype: str = "float32"

    def __post_init__(self):
        lams = tuple(float(x) for x in self.lambdas)
        if any(b <= a for a, b in zip(lams, lams[1:])) or any(x <= 0 for x in lams):
            raise ValueError("lambdas must be positive and strictly increasing")
        self.lambdas = lams

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class TripletBatch:
    """Past / current / future patches in [0,1], plus diagnostic true flow."""

    past: Tensor
    current: Tensor
    future: Tensor
    true_flow: np.ndarray | None = None  # current->past displacement, never trained on

    def __post_init__(self):
        if not (self.past.shape == self.current.shape == self.future.shape):
            raise ValueError("triplet frames must share a shape")


@dataclass
class StepStats:
    loss: float
    distortion: np.ndarray  # per level, MSE
    bpp: np.ndarray  # per level, estimated bits per pixel
    grad_scale: float
    intra_distortion: float = math.nan
    intra_bpp: float = math.nan


def rd_loss(distortions, rates, lambdas) -> Tensor:
    """Multi-level objective: sum of lambda_n * D_n + R_n over the levels."""
    if not (len(distortions) == len(rates) == len(lambdas)):
        raise ValueError(
            f"level count mismatch: {len(distortions)} distortions, {len(rates)} rates, {len(lambdas)} lambdas"
        )
    total = None
    for d, r, lam in zip(distortions, rates, lambdas):
        d = d if isinstance(d, Tensor) else Tensor(d)
        r = r if isinstance(r, Tensor) else Tensor(r)
        term = d * float(lam) + r
        total = term if total is None else total + term
    return total


def _tile_levels(t: Tensor, n: int) -> Tensor:
    """Stack n copies along the batch axis (level-major ordering)."""
    return ad.concat([t] * n, axis=0)


def _level_gains(gainset, levels, dtype):
    g = ad.concat([gainset.level_vectors(n)[0] for n in levels], axis=0)
    ig = ad.concat([gainset.level_vectors(n)[1] for n in levels], axis=0)
    return g, ig


def _apply_stacked_gain(latent: Tensor, gain_flat: Tensor, n_levels: int) -> Tensor:
    b_total, c = latent.shape[0], latent.shape[1]
    per = b_total // n_levels
    g = gain_flat.reshape(n_levels, 1, c, 1, 1)
    x = latent.reshape(n_levels, per, c, latent.shape[2], latent.shape[3])
    return (x * g).reshape(b_total, c, latent.shape[2], latent.shape[3])


def bframe_rd_terms(model: nw.CodecModel, batch: TripletBatch, levels, noise_rng) -> tuple:
    """Stacked forward pass; returns (distortion Tensor [L], rate-bpp Tensor [L])."""
    xp, xc, xf = batch.past, batch.current, batch.future
    n_levels = len(levels)
    bsz = xc.shape[0]
    npix = bsz * xc.shape[2] * xc.shape[3]

    flow_p, flow_f = model.motion_predict(xp, xf)
    pred_p = warp.backwarp(xp, flow_p)
    pred_f = warp.backwarp(xf, flow_f)
    y_m = model.motion_refine_encode(flow_p, flow_f, pred_p, pred_f, xp, xf, xc)
    z_m = model.motion_henc(y_m)

    # stack the rate levels along the batch axis
    y_ms = _tile_levels(y_m, n_levels)
    z_ms = _tile_levels(z_m, n_levels)
    xps, xfs, xcs = (_tile_levels(t, n_levels) for t in (xp, xf, xc))
    flow_ps, flow_fs = _tile_levels(flow_p, n_levels), _tile_levels(flow_f, n_levels)

    gy, igy = _level_gains(model.gains["motion_y"], levels, model.dtype)
    gz, igz = _level_gains(model.gains["motion_z"], levels, model.dtype)
    z_t = gn.quantize(_apply_stacked_gain(z_ms, gz, n_levels), "train", noise_rng)
    bits_mz, per_mz = model.motion_z_prior.bits(z_t)
    mu_m, sig_m = model.motion_hdec(_apply_stacked_gain(z_t, igz, n_levels))
    y_t = gn.quantize(_apply_stacked_gain(y_ms, gy, n_levels), "train", noise_rng)
    _, per_my = model.gaussian.bits(
        y_t, _apply_stacked_gain(mu_m, gy, n_levels), _apply_stacked_gain(sig_m, gy, n_levels)
    )
    res_p, res_f = model.motion_refine_decode(_apply_stacked_gain(y_t, igy, n_levels))
    mv_p = flow_ps + res_p
    mv_f = flow_fs + res_f
    comp_p = warp.backwarp(xps, mv_p)
    comp_f = warp.backwarp(xfs, mv_f)
    m1, m2 = model.fusion_masks(comp_p, comp_f, mv_p, mv_f, xps, xfs)
    x_comp = warp.fuse_bidirectional(comp_p, comp_f, m1, m2)

    res = xcs - x_comp
    y_r = model.residual_enc(res)
    z_r = model.residual_henc(y_r)
    gy2, igy2 = _level_gains(model.gains["residual_y"], levels, model.dtype)
    gz2, igz2 = _level_gains(model.gains["residual_z"], levels, model.dtype)
    z_rt = gn.quantize(_apply_stacked_gain(z_r, gz2, n_levels), "train", noise_rng)
    _, per_rz = model.residual_z_prior.bits(z_rt)
    mu_r, sig_r = model.residual_hdec(_apply_stacked_gain(z_rt, igz2, n_levels))
    y_rt = gn.quantize(_apply_stacked_gain(y_r, gy2, n_levels), "train", noise_rng)
    _, per_ry = model.gaussian.bits(
        y_rt, _apply_stacked_gain(mu_r, gy2, n_levels), _apply_stacked_gain(sig_r, gy2, n_levels)
    )
    res_hat = model.residual_dec(_apply_stacked_gain(y_rt, igy2, n_levels))
    x_hat = x_comp + res_hat

    sq = (x_hat - xcs) ** 2.0
    distortion = sq.reshape(n_levels, -1).mean(axis=1)
    rate_bits = (
        per_my.reshape(n_levels, -1).sum(axis=1)
        + per_mz.reshape(n_levels, -1).sum(axis=1)
        + per_ry.reshape(n_levels, -1).sum(axis=1)
        + per_rz.reshape(n_levels, -1).sum(axis=1)
    )
    return distortion, rate_bits * (1.0 / npix)


def intra_rd_terms(model: nw.CodecModel, frame: Tensor, levels, noise_rng) -> tuple:
    """Keyframe model distortion/rate per level (same stacking scheme)."""
    n_levels = len(levels)
    npix = frame.shape[0] * frame.shape[2] * frame.shape[3]
    y = model.intra_enc(frame)
    z = model.intra_henc(y)
    ys, zs, xs = _tile_levels(y, n_levels), _tile_levels(z, n_levels), _tile_levels(frame, n_levels)
    gy, igy = _level_gains(model.gains["intra_y"], levels, model.dtype)
    gz, igz = _level_gains(model.gains["intra_z"], levels, model.dtype)
    z_t = gn.quantize(_apply_stacked_gain(zs, gz, n_levels), "train", noise_rng)
    _, per_z = model.intra_z_prior.bits(z_t)
    mu, sig = model.intra_hdec(_apply_stacked_gain(z_t, igz, n_levels))
    y_t = gn.quantize(_apply_stacked_gain(ys, gy, n_levels), "train", noise_rng)
    _, per_y = model.gaussian.bits(
        y_t, _apply_stacked_gain(mu, gy, n_levels), _apply_stacked_gain(sig, gy, n_levels)
    )
    x_hat = model.intra_dec(_apply_stacked_gain(y_t, igy, n_levels))
    sq = (x_hat - xs) ** 2.0
    distortion = sq.reshape(n_levels, -1).mean(axis=1)
    rate_bits = per_y.reshape(n_levels, -1).sum(axis=1) + per_z.reshape(n_levels, -1).sum(axis=1)
    return distortion, rate_bits * (1.0 / npix)


def train_step(
    model: nw.CodecModel,
    batch: TripletBatch,
    opt: ad.AdamState,
    cfg: TrainConfig,
    noise_rng: np.random.Generator,
    step_index: int = 0,
) -> StepStats:
    """One optimization step of the joint multi-rate objective."""
    params = model.params()
    model.zero_grads()
    all_levels = list(range(len(cfg.lambdas)))
    if cfg.level_sample:
        levels = [int(noise_rng.integers(0, len(all_levels)))]
        lams = [cfg.lambdas[levels[0]]]
    else:
        levels = all_levels
        lams = list(cfg.lambdas)

    dist, rate = bframe_rd_terms(model, batch, levels, noise_rng)
    lam_vec = Tensor(np.asarray(lams, dtype=model.dtype))
    loss = (dist * lam_vec).sum() + rate.sum()

    intra_d = intra_r = math.nan
    if cfg.intra_weight > 0:
        intra_levels = [step_index % len(all_levels)] if cfg.intra_rotate else levels
        intra_lams = [cfg.lambdas[n] for n in intra_levels]
        di, ri = intra_rd_terms(model, batch.current, intra_levels, noise_rng)
        intra_loss = (di * Tensor(np.asarray(intra_lams, dtype=model.dtype))).sum() + ri.sum()
        loss = loss + intra_loss * cfg.intra_weight
        intra_d = float(di.data.mean())
        intra_r = float(ri.data.mean())

    if not np.isfinite(loss.data):
        raise TrainingDiverged(_divergence_report(dist, rate, levels))
    loss.backward()
    scale = ad.clip_global_grad_norm(params, cfg.clip_norm)
    ad.adam_step(opt, params)
    return StepStats(
        loss=float(loss.data),
        distortion=dist.data.copy(),
        bpp=rate.data.copy(),
        grad_scale=scale,
        intra_distortion=intra_d,
        intra_bpp=intra_r,
    )


def _divergence_report(dist, rate, levels) -> str:
    parts = []
    for i, n in enumerate(levels):
        d, r = float(dist.data[i]), float(rate.data[i])
        if not math.isfinite(d):
            parts.append(f"level {n}: distortion={d}")
        if not math.isfinite(r):
            parts.append(f"level {n}: rate={r}")
    return "non-finite loss (" + ("; ".join(parts) or "aggregate only") + ")"


# -- synthetic data -----------------------------------------------------------------


@dataclass
class SynthSpec:
    """Synthetic triplet generator settings."""

    families: tuple = ("sinusoid", "rectangles", "affine_noise")
    patch_size: int = 64
    max_shift: float = 3.0

    def __post_init__(self):
        known = {"sinusoid", "rectangles", "affine_noise", "static"}
        bad = set(self.families) - known
        if bad:
            raise ValueError(f"unknown pattern families {sorted(bad)}")


def _sinusoid_frames(rng, size, max_shift, batch):
    ys, xs = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float), indexing="ij")
    frames = np.zeros((3, batch, 3, size, size))
    flows = np.zeros((batch, 2, size, size))
    for b in range(batch):
        v = rng.uniform(-max_shift, max_shift, 2)
        for c in range(3):
            fx, fy = rng.uniform(0.02, 0.12, 2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.2, 0.45)
            for t, when in enumerate((0.0, 0.5, 1.0)):
                arg = 2 * np.pi * (fx * (xs - v[0] * when) + fy * (ys - v[1] * when)) + phase
                frames[t, b, c] = 0.5 + amp * np.sin(arg)
        flows[b, 0] = v[0] * 0.5
        flows[b, 1] = v[1] * 0.5
    return frames, flows


def _rectangle_frames(rng, size, max_shift, batch):
    ys, xs = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float), indexing="ij")
    frames = np.zeros((3, batch, 3, size, size))
    flows = np.zeros((batch, 2, size, size))
    for b in range(batch):
        base = rng.uniform(0.1, 0.9, 3)
        for c in range(3):
            frames[:, b, c] = base[c]
        for _ in range(rng.integers(2, 5)):
            w, h = rng.uniform(size * 0.15, size * 0.5, 2)
            cx, cy = rng.uniform(0, size, 2)
            v = rng.uniform(-max_shift, max_shift, 2)
            color = rng.uniform(0, 1, 3)
            for t, when in enumerate((0.0, 0.5, 1.0)):
                px, py = cx + v[0] * when, cy + v[1] * when
                # 1-pixel soft edges keep the motion sub-pixel differentiable
                cov_x = np.clip(np.minimum(xs - (px - w / 2), (px + w / 2) - xs) + 0.5, 0, 1)
                cov_y = np.clip(np.minimum(ys - (py - h / 2), (py + h / 2) - ys) + 0.5, 0, 1)
                cov = cov_x * cov_y
                for c in range(3):
                    frames[t, b, c] = frames[t, b, c] * (1 - cov) + color[c] * cov
            inside = ((np.abs(xs - (cx + v[0] * 0.5)) < w / 2) & (np.abs(ys - (cy + v[1] * 0.5)) < h / 2))
            flows[b, 0][inside] = v[0] * 0.5
            flows[b, 1][inside] = v[1] * 0.5
    return frames, flows


def _smooth_noise(rng, size):
    freq = rng.integers(3, 9)
    coarse = rng.random((3, freq, freq))
    ups = np.zeros((3, size, size))
    grid = np.linspace(0, freq - 1, size)
    i0 = np.floor(grid).astype(int)
    i1 = np.minimum(i0 + 1, freq - 1)
    fr = grid - i0
    for c in range(3):
        row = coarse[c][i0][:, i0] * (1 - fr[None, :]) + coarse[c][i0][:, i1] * fr[None, :]
        row2 = coarse[c][i1][:, i0] * (1 - fr[None, :]) + coarse[c][i1][:, i1] * fr[None, :]
        ups[c] = row * (1 - fr[:, None]) + row2 * fr[:, None]
    return ups


def _affine_noise_frames(rng, size, max_shift, batch):
    frames = np.zeros((3, batch, 3, size, size))
    flows = np.zeros((batch, 2, size, size))
    ys, xs = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float), indexing="ij")
    cx = cy = (size - 1) / 2.0
    for b in range(batch):
        tex = _smooth_noise(rng, size)
        shift = rng.uniform(-max_shift, max_shift, 2)
        rot = rng.uniform(-0.03, 0.03)
        zoom = rng.uniform(-0.02, 0.02)
        dx = shift[0] + rot * -(ys - cy) + zoom * (xs - cx)
        dy = shift[1] + rot * (xs - cx) + zoom * (ys - cy)
        for t, when in enumerate((0.0, 0.5, 1.0)):
            sx = np.clip(xs + dx * when, 0, size - 1)
            sy = np.clip(ys + dy * when, 0, size - 1)
            x0 = np.floor(sx).astype(int)
            y0 = np.floor(sy).astype(int)
            x1 = np.minimum(x0 + 1, size - 1)
            y1 = np.minimum(y0 + 1, size - 1)
            fx, fy = sx - x0, sy - y0
            for c in range(3):
                tex_c = tex[c]
                top = tex_c[y0, x0] * (1 - fx) + tex_c[y0, x1] * fx
                bot = tex_c[y1, x0] * (1 - fx) + tex_c[y1, x1] * fx
                frames[t, b, c] = top * (1 - fy) + fy * bot
        flows[b, 0] = dx * 0.5
        flows[b, 1] = dy * 0.5
    return frames, flows


_FAMILY_RENDERERS = {
    "sinusoid": _sinusoid_frames,
    "rectangles": _rectangle_frames,
    "affine_noise": _affine_noise_frames,
    "static": lambda rng, size, max_shift, batch: _rectangle_frames(rng, size, 0.0, batch),
}


def synth_triplets(spec: SynthSpec, seed: int, batch_size: int = 4, dtype=np.float64):
    """Endless deterministic stream of TripletBatch drawn from the spec families."""
    rng = np.random.default_rng(seed)
    while True:
        family = spec.families[int(rng.integers(0, len(spec.families)))]
        frames, flows = _FAMILY_RENDERERS[family](rng, spec.patch_size, spec.max_shift, batch_size)
        frames = np.clip(frames, 0.0, 1.0)
        yield TripletBatch(
            past=Tensor(frames[0], dtype=dtype),
            current=Tensor(frames[1], dtype=dtype),
            future=Tensor(frames[2], dtype=dtype),
            true_flow=flows,
        )


def make_eval_clips(num_clips: int, frames_per_clip: int, size: int, seed: int, max_shift: float = 3.0):
    """Held-out synthetic sequences (list of [T,3,H,W] arrays) for evaluation."""
    rng = np.random.default_rng(seed)
    spec = SynthSpec(patch_size=size, max_shift=max_shift)
    clips = []
    for k in range(num_clips):
        family = spec.families[k % len(spec.families)]
        # chain triplets so motion continues across the clip
        seq = []
        t = 0
        while len(seq) < frames_per_clip:
            frames, _ = _FAMILY_RENDERERS[family](rng, size, max_shift, 1)
            seq.extend([frames[0, 0], frames[1, 0], frames[2, 0]])
        clips.append(np.clip(np.stack(seq[:frames_per_clip]), 0.0, 1.0))
    return clips


# -- dataset loading ------------------------------------------------------------------


def load_triplet_dataset(root, patch_size: int, batch_size: int, seed: int, dtype=np.float64):
    """Stream seeded random crops from <root>/<clip>/frame_{0,1,2}.raw triplets.

    Each clip directory carries meta.json {width, height, channels, bitdepth}.
    Unreadable or undersized clips are skipped with a warning; an empty
    usable set is an error.
    """
    import logging

    root = Path(root)
    clips = []
    for clip_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            meta = json.loads((clip_dir / "meta.json").read_text())
            w, h = int(meta["width"]), int(meta["height"])
            if int(meta.get("channels", 3)) != 3 or int(meta.get("bitdepth", 8)) != 8:
                raise ValueError("expected 8-bit RGB triplets")
            if w < patch_size or h < patch_size:
                raise ValueError(f"frames {w}x{h} smaller than patch {patch_size}")
            frames = []
            for i in range(3):
                raw = (clip_dir / f"frame_{i}.raw").read_bytes()
                if len(raw) != 3 * w * h:
                    raise ValueError(f"frame_{i}.raw has {len(raw)} bytes, expected {3 * w * h}")
                frames.append(np.frombuffer(raw, dtype=np.uint8).reshape(3, h, w))
            clips.append(np.stack(frames).astype(np.float64) / 255.0)
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
            logging.getLogger(__name__).warning("skipping clip %s: %s", clip_dir.name, exc)
    if not clips:
        raise ValueError(f"no readable triplets under {root}")

    rng = np.random.default_rng(seed)

    def stream():
        while True:
            past, cur, fut = [], [], []
            for _ in range(batch_size):
                clip = clips[int(rng.integers(0, len(clips)))]
                _, _, h, w = clip.shape
                oy = int(rng.integers(0, h - patch_size + 1))
                ox = int(rng.integers(0, w - patch_size + 1))
                crop = clip[:, :, oy : oy + patch_size, ox : ox + patch_size]
                past.append(crop[0])
                cur.append(crop[1])
                fut.append(crop[2])
            yield TripletBatch(
                past=Tensor(np.stack(past), dtype=dtype),
                current=Tensor(np.stack(cur), dtype=dtype),
                future=Tensor(np.stack(fut), dtype=dtype),
            )

    return stream()


# -- training loop --------------------------------------------------------------------


def train_loop(
    model: nw.CodecModel,
    batches,
    cfg: TrainConfig,
    checkpoint_path=None,
    log_path=None,
    resume_state: dict | None = None,
    progress=None,
):
    """Run cfg.iterations steps with plateau LR halving and periodic checkpoints.

    ``batches`` is an iterator of TripletBatch.  Returns the final trainer
    state dict (also embedded in the checkpoint for bitwise resume).
    """
    params = model.params()
    opt = ad.AdamState(params, lr=cfg.learning_rate)
    noise_rng = np.random.default_rng(cfg.seed + 1)
    state = {
        "step": 0,
        "lr": cfg.learning_rate,
        "smoothed": None,
        "best": math.inf,
        "since_best": 0,
    }
    if resume_state:
        state.update(resume_state["trainer"])
        opt.load_state_arrays(resume_state["arrays"], t=state["step"], lr=state["lr"])
        noise_rng.bit_generator.state = json.loads(state["noise_rng"])

    log_rows = []
    t_start = time.perf_counter()
    while state["step"] < cfg.iterations:
        batch = next(batches)
        stats = train_step(model, batch, opt, cfg, noise_rng, step_index=state["step"])
        state["step"] += 1

        s = stats.loss if state["smoothed"] is None else (
            cfg.loss_smoothing * state["smoothed"] + (1 - cfg.loss_smoothing) * stats.loss
        )
        state["smoothed"] = s
        if s < state["best"] - 1e-9:
            state["best"] = s
            state["since_best"] = 0
        else:
            state["since_best"] += 1
            if state["since_best"] >= cfg.plateau_patience:
                state["lr"] /= 2.0
                opt.lr = state["lr"]
                state["since_best"] = 0
        log_rows.append(
            [state["step"], stats.loss, *stats.distortion.tolist(), *stats.bpp.tolist(), state["lr"]]
        )
        if progress is not None and state["step"] % progress == 0:
            rate = state["step"] / (time.perf_counter() - t_start)
            print(
                f"step {state['step']}/{cfg.iterations} loss {s:.5f} lr {state['lr']:.2e} "
                f"({rate:.2f} it/s)",
                flush=True,
            )
        if checkpoint_path and (
            state["step"] % cfg.checkpoint_every == 0 or state["step"] == cfg.iterations
        ):
            _save_trainer_checkpoint(model, opt, state, noise_rng, cfg, checkpoint_path)

    if log_path:
        _write_log(log_path, cfg, log_rows)
    if checkpoint_path:
        _save_trainer_checkpoint(model, opt, state, noise_rng, cfg, checkpoint_path)
    return state


def _save_trainer_checkpoint(model, opt, state, noise_rng, cfg, path):
    trainer = dict(state)
    trainer["noise_rng"] = json.dumps(noise_rng.bit_generator.state)
    meta = {"trainer": trainer, "train_config": asdict(cfg)}
    model.save_checkpoint(path, meta=meta, extra_arrays=opt.state_arrays())


def load_resume_state(path):
    """Split a trainer checkpoint into (model, resume_state) for train_loop."""
    config, arrays, meta = nw.read_checkpoint(path)
    cfg = TrainConfig(**meta["train_config"])
    model = nw.CodecModel(config, seed=0, dtype=cfg.np_dtype())
    params = model.params()
    extra = {}
    for name, arr in arrays.items():
        if name in params:
            params[name].data = arr.astype(model.dtype)
        else:
            extra[name] = arr
    trainer = dict(meta["trainer"])
    resume = {"trainer": trainer, "arrays": extra, "noise_rng": trainer["noise_rng"]}
    resume["trainer"]["noise_rng"] = trainer["noise_rng"]
    return model, cfg, resume


def _write_log(path, cfg, rows):
    levels = len(cfg.lambdas)
    header = (
        ["iteration", "loss"]
        + [f"distortion_l{n}" for n in range(levels)]
        + [f"bpp_l{n}" for n in range(levels)]
        + ["lr"]
    )
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
