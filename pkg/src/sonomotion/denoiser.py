"""Encoder-only transformer that predicts clean motion from noisy motion.

Token layout (fused SSL mode, the default):
    [timestep | genre | audio+ssl frame tokens (T) | motion tokens (T)]
so the sequence length is 2T + 2 and the prediction is read from the last T
output tokens. ``ssl_mode="separate"`` gives the sound-source location its
own per-frame token stream (length 3T + 2).
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import save_checkpoint
from .diffusion import NoiseSchedule, q_sample, sample_array
from .errors import ConfigError, ContractError, NumericError
from .losses import LossWeights, l_data, l_foot, l_geo, l_rot, l_traj, total_loss
from .nn import (EncoderBlock, Embedding, LayerNorm, Linear, Module,
                 sinusoidal_embedding)
from .optim import AdamW
from .skeleton import (FRAME_WIDTH, MotionSequence, SkeletonSpec,
                       compute_velocities, detect_foot_contacts,
                       disassemble_vector)

AUDIO_WIDTH = 2272
SSL_WIDTH = 3


@dataclass
class DenoiserConfig:
    latent: int = 512
    heads: int = 8
    layers: int = 4
    ff_mult: int = 4
    motion_width: int = FRAME_WIDTH
    audio_width: int = AUDIO_WIDTH
    ssl_width: int = SSL_WIDTH
    genre_vocab: int = 3
    max_frames: int = 240
    ssl_mode: str = "fused"   # "fused" per-frame [audio|ssl], or "separate"

    def __post_init__(self):
        if self.latent % self.heads:
            raise ConfigError(f"latent {self.latent} not divisible by "
                              f"{self.heads} heads")
        if self.ssl_mode not in ("fused", "separate"):
            raise ConfigError(f"unknown ssl_mode {self.ssl_mode!r}")

    @property
    def condition_tokens(self) -> int:
        per_frame = 2 if self.ssl_mode == "separate" else 1
        return per_frame * self.max_frames + 2

    @property
    def max_tokens(self) -> int:
        return self.condition_tokens + self.max_frames


class MotionDenoiser(Module):
    """G(x_t, t; a, s, g) -> x0_hat."""

    def __init__(self, config: DenoiserConfig, rng: np.random.Generator):
        d = config.latent
        self.config = config
        self.time_proj = Linear(d, d, rng)
        self.genre_emb = Embedding(config.genre_vocab, d, rng)
        if config.ssl_mode == "fused":
            self.cond_proj = Linear(config.audio_width + config.ssl_width, d, rng)
        else:
            self.cond_proj = Linear(config.audio_width, d, rng)
            self.ssl_proj = Linear(config.ssl_width, d, rng)
        self.motion_proj = Linear(config.motion_width, d, rng)
        self.pos_emb = Tensor(rng.uniform(-0.02, 0.02, (config.max_tokens, d)),
                              requires_grad=True)
        self.blocks = [EncoderBlock(d, config.heads, config.ff_mult, rng)
                       for _ in range(config.layers)]
        self.final_norm = LayerNorm(d)
        self.head = Linear(d, config.motion_width, rng)

    # -- condition handling -------------------------------------------------

    def _coerce(self, x_t, t, a, s, g):
        """Normalize inputs to batched ndarrays; returns (arrays..., squeeze)."""
        x = np.asarray(getattr(x_t, "data", x_t), dtype=np.float64)
        a = np.asarray(getattr(a, "data", a), dtype=np.float64)
        s = np.asarray(getattr(s, "data", s), dtype=np.float64)
        squeeze = x.ndim == 2
        if squeeze:
            x, a, s = x[None], a[None], s[None]
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
        g_arr = np.atleast_1d(np.asarray(g, dtype=np.int64))
        b, frames, w = x.shape
        if w != self.config.motion_width:
            raise ContractError(f"motion width {w} != {self.config.motion_width}")
        if frames > self.config.max_frames:
            raise ContractError(
                f"{frames} frames exceed configured max {self.config.max_frames}")
        if a.shape != (b, frames, self.config.audio_width):
            raise ContractError(
                f"audio shape {a.shape} != {(b, frames, self.config.audio_width)}")
        if s.shape != (b, frames, self.config.ssl_width):
            raise ContractError(
                f"ssl shape {s.shape} != {(b, frames, self.config.ssl_width)}")
        if t_arr.shape != (b,) or g_arr.shape != (b,):
            raise ContractError("t and g must supply one value per batch item")
        if g_arr.min() < 0 or g_arr.max() >= self.config.genre_vocab:
            raise ContractError(f"genre ids must lie in 0..{self.config.genre_vocab - 1}")
        return x, t_arr, a, s, g_arr, squeeze

    def embed_conditions(self, t, a, s, g) -> Tensor:
        """Condition token sequence: timestep, genre, then per-frame tokens."""
        a_arr = np.asarray(getattr(a, "data", a), dtype=np.float64)
        if a_arr.ndim == 2:
            dummy_x = np.zeros((a_arr.shape[0], self.config.motion_width))
        else:
            dummy_x = np.zeros(a_arr.shape[:2] + (self.config.motion_width,))
        x, t_arr, a, s, g_arr, squeeze = self._coerce(dummy_x, t, a, s, g)
        tokens = self._condition_tokens(t_arr, a, s, g_arr)
        return tokens[0] if squeeze else tokens

    def _condition_tokens(self, t_arr, a, s, g_arr) -> Tensor:
        b, frames, _ = a.shape
        d = self.config.latent
        sin = Tensor(sinusoidal_embedding(t_arr, d))
        t_tok = ad.reshape(self.time_proj(sin), (b, 1, d))
        g_tok = ad.reshape(self.genre_emb(g_arr), (b, 1, d))
        if self.config.ssl_mode == "fused":
            frame_tok = self.cond_proj(Tensor(np.concatenate([a, s], axis=2)))
            return ad.concat([t_tok, g_tok, frame_tok], axis=1)
        audio_tok = self.cond_proj(Tensor(a))
        ssl_tok = self.ssl_proj(Tensor(s))
        return ad.concat([t_tok, g_tok, ssl_tok, audio_tok], axis=1)

    # -- forward -------------------------------------------------------------

    def predict_x0(self, x_t, t, a, s, g) -> Tensor:
        x, t_arr, a, s, g_arr, squeeze = self._coerce(x_t, t, a, s, g)
        b, frames, _ = x.shape
        cond = self._condition_tokens(t_arr, a, s, g_arr)
        motion_tok = self.motion_proj(Tensor(x))
        tokens = ad.concat([cond, motion_tok], axis=1)
        n_tok = tokens.shape[1]
        tokens = ad.add(tokens, self.pos_emb[:n_tok, :])
        for i, block in enumerate(self.blocks):
            try:
                tokens = block(tokens)
            except NumericError as e:
                raise NumericError(f"transformer layer {i}: {e}") from e
        out = self.head(self.final_norm(tokens[:, n_tok - frames:, :]))
        return out[0] if squeeze else out

    __call__ = predict_x0


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0           # 0 disables periodic checkpoints
    out_dir: str | None = None
    foot_mode: str = "magnitude"
    foot_speed_threshold: float = 0.1
    foot_height_threshold: float = 0.06

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")


@dataclass
class TrainSample:
    """One conditioning/motion pair prepared for training."""

    x0: np.ndarray        # (T, 300)
    audio: np.ndarray     # (T, 2272)
    ssl: np.ndarray       # (T, 3)
    genre: int
    contacts: np.ndarray = None  # (T, 2) bool, derived from x0 if omitted


def prepare_samples(raw, skel: SkeletonSpec, fps: float,
                    cfg: TrainConfig) -> list[TrainSample]:
    out = []
    for item in raw:
        s = item if isinstance(item, TrainSample) else TrainSample(*item)
        if s.contacts is None:
            s.contacts = detect_foot_contacts(
                s.x0[:, :75], fps, skel,
                cfg.foot_speed_threshold, cfg.foot_height_threshold)
        out.append(s)
    return out


def dataset_fingerprint(samples: list[TrainSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(np.ascontiguousarray(s.x0).tobytes())
        h.update(np.ascontiguousarray(s.audio).tobytes())
        h.update(np.ascontiguousarray(s.ssl).tobytes())
        h.update(bytes([s.genre]))
    return h.hexdigest()[:16]


def write_model_card(path, config: DenoiserConfig, train_cfg: TrainConfig,
                     data_hash: str) -> None:
    lines = ["sonomotion denoiser model card",
             f"created: {time.strftime('%Y-%m-%d %H:%M:%S')}",
             f"data_hash: {data_hash}",
             "", "[model]"]
    lines += [f"{k} = {v}" for k, v in asdict(config).items()]
    lines += ["", "[training]"]
    lines += [f"{k} = {v}" for k, v in asdict(train_cfg).items()]
    Path(path).write_text("\n".join(lines) + "\n")


def train_denoiser(model: MotionDenoiser, schedule: NoiseSchedule, samples,
                   skel: SkeletonSpec, train_cfg: TrainConfig,
                   weights: LossWeights | None = None, fps: float = 30.0,
                   log_fn=None) -> dict[str, list[float]]:
    """Standard x0-prediction training loop.

    Per step: draw a batch, sample per-item timesteps uniformly from
    1..steps, noise the clean motion, predict x0, apply the weighted loss,
    and take one AdamW step. Returns per-epoch curves for every term.
    """
    samples = prepare_samples(samples, skel, fps, train_cfg)
    if not samples:
        raise ContractError("empty training set")
    if weights is None:
        weights = LossWeights.with_schedule(train_cfg.epochs)
    rng = np.random.default_rng(train_cfg.seed)
    params = model.parameters()
    opt = AdamW(params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)

    x0_all = np.stack([s.x0 for s in samples])
    audio_all = np.stack([s.audio for s in samples])
    ssl_all = np.stack([s.ssl for s in samples])
    genre_all = np.array([s.genre for s in samples], dtype=np.int64)
    contact_all = np.stack([s.contacts for s in samples])

    out_dir = Path(train_cfg.out_dir) if train_cfg.out_dir else None
    metrics_file = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out_dir / "metrics.log", "w")
        write_model_card(out_dir / "model_card.txt", model.config, train_cfg,
                         dataset_fingerprint(samples))

    curves: dict[str, list[float]] = {k: [] for k in
                                      ("total", "data", "geo", "foot", "traj", "rot")}
    curves["lambda_traj"] = []
    curves["lambda_rot"] = []
    n = len(samples)
    bs = min(train_cfg.batch_size, n)
    try:
        for epoch in range(train_cfg.epochs):
            order = rng.permutation(n)
            sums = {k: 0.0 for k in ("total", "data", "geo", "foot", "traj", "rot")}
            steps = 0
            w_used = weights.at_epoch(epoch)
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                x0 = x0_all[idx]
                t = rng.integers(1, schedule.steps + 1, size=idx.size)
                noise = rng.standard_normal(x0.shape)
                x_t = q_sample(x0, t, noise, schedule)
                with Tape() as tape:
                    pred = model.predict_x0(x_t, t, audio_all[idx], ssl_all[idx],
                                            genre_all[idx])
                    target = Tensor(x0)
                    terms = {}
                    for name, fn in (
                            ("data", lambda: l_data(pred, target)),
                            ("geo", lambda: l_geo(pred, target, skel)),
                            ("foot", lambda: l_foot(pred, target, contact_all[idx],
                                                    train_cfg.foot_mode)),
                            ("traj", lambda: l_traj(pred, target)),
                            ("rot", lambda: l_rot(pred, target))):
                        try:
                            terms[name] = fn()
                        except NumericError as e:
                            raise NumericError(
                                f"loss term '{name}' failed at epoch {epoch}: {e}"
                            ) from e
                        if not np.isfinite(terms[name].data):
                            raise NumericError(
                                f"loss term '{name}' is non-finite at epoch {epoch}")
                    loss, w_used = total_loss(terms, weights, epoch)
                    tape.backward(loss)
                opt.step()
                for name in terms:
                    sums[name] += terms[name].item()
                sums["total"] += loss.item()
                steps += 1
            for name in sums:
                curves[name].append(sums[name] / steps)
            curves["lambda_traj"].append(w_used["traj"])
            curves["lambda_rot"].append(w_used["rot"])
            line = (f"epoch={epoch} total={curves['total'][-1]:.6f} "
                    f"data={curves['data'][-1]:.6f} geo={curves['geo'][-1]:.6f} "
                    f"foot={curves['foot'][-1]:.6f} traj={curves['traj'][-1]:.6f} "
                    f"rot={curves['rot'][-1]:.6f} "
                    f"lambda_data={w_used['data']:g} lambda_geo={w_used['geo']:g} "
                    f"lambda_foot={w_used['foot']:g} lambda_traj={w_used['traj']:g} "
                    f"lambda_rot={w_used['rot']:g}")
            if metrics_file:
                metrics_file.write(line + "\n")
                metrics_file.flush()
            if log_fn:
                log_fn(epoch, line)
            if (out_dir and train_cfg.checkpoint_every
                    and (epoch + 1) % train_cfg.checkpoint_every == 0):
                save_checkpoint(out_dir / f"checkpoint_{epoch + 1:06d}.snm",
                                model.named_parameters())
        if out_dir:
            save_checkpoint(out_dir / "checkpoint_final.snm",
                            model.named_parameters())
    finally:
        if metrics_file:
            metrics_file.close()
    return curves


def sample_motion(model: MotionDenoiser, schedule: NoiseSchedule,
                  audio: np.ndarray, ssl: np.ndarray, genre: int,
                  rng: np.random.Generator, step_subset=None, fps: float = 30.0,
                  recompute_velocity: bool = True) -> MotionSequence:
    """Draw one motion conditioned on (audio, ssl, genre)."""
    frames = audio.shape[0]

    def model_fn(x, t):
        return model.predict_x0(x, t, audio, ssl, genre).data

    x = sample_array(model_fn, (frames, model.config.motion_width), schedule,
                     rng, step_subset)
    m = disassemble_vector(x, fps)
    if recompute_velocity:
        m.v = compute_velocities(m.p, fps)
    return m
