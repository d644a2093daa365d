"""Autoregressive pixel-density models.

The reference model is a two-layer masked-convolution network whose head
emits, for every pixel and colour channel, a K-component mixture of
discretized logistics over the 256 intensity values. Pixel ``(i, j)`` is
predicted only from pixels strictly earlier in raster order; the three
channels of a pixel are modelled independently given that context.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .optim import Adam

MAGIC = b"RPDENS01"
FORMAT_VERSION = 1
MIN_LOG_SCALE = -7.0

# (row, col) offsets read by each masked 3x3 layer
OFFSETS_A = ((-1, -1), (-1, 0), (-1, 1), (0, -1))
OFFSETS_B = OFFSETS_A + ((0, 0),)


@dataclass
class DensityConfig:
    k: int = 3
    channels: int = 16
    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 3e-3
    seed: int = 0


@dataclass
class PixelLogLikTensor:
    """Per-component log-likelihoods of one frame.

    ``grid[i, j, c * K + k]`` is the log-probability of channel ``c`` at
    pixel ``(i, j)`` under mixture component ``k``; ``log_weights`` has the
    same layout and holds the log mixture weights.
    """

    grid: np.ndarray
    log_weights: np.ndarray
    aggregate: float

    @property
    def k(self):
        return self.grid.shape[-1] // 3

    def recompute_aggregate(self):
        h, w, _ = self.grid.shape
        z = (self.grid + self.log_weights).reshape(h, w, 3, self.k)
        return float(_logsumexp(z, axis=-1).sum())


def _logsumexp(z, axis):
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.log(np.sum(np.exp(z - m), axis=axis)) + np.squeeze(m, axis=axis)


def _shift(x, di, dj):
    """``y[:, i, j] = x[:, i + di, j + dj]`` with zero padding."""
    n, h, w, c = x.shape
    y = np.zeros_like(x)
    i0, i1 = max(0, -di), min(h, h - di)
    j0, j1 = max(0, -dj), min(w, w - dj)
    if i0 < i1 and j0 < j1:
        y[:, i0:i1, j0:j1] = x[:, i0 + di:i1 + di, j0 + dj:j1 + dj]
    return y


def _check_frames(frames):
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError(f"frames must be (N, H, W, 3), got {frames.shape}")
    if frames.dtype != np.uint8:
        if np.any(frames < 0) or np.any(frames > 255):
            raise ValueError("pixel intensities must lie in [0, 255]")
        frames = frames.astype(np.uint8)
    return frames


class DensityModel:
    """Interface: anything that yields per-component log-likelihoods."""

    height: int
    width: int
    k: int

    def component_logprobs(self, frames):
        """Return ``(log_weights, logp)``, both ``(N, H, W, 3, K)``."""
        raise NotImplementedError

    def _check_shape(self, frames):
        frames = _check_frames(frames)
        if frames.shape[1:3] != (self.height, self.width):
            raise ValueError(
                f"frame size {frames.shape[1:3]} does not match model "
                f"({self.height}, {self.width})")
        return frames

    def value_probabilities(self, frame):
        """Modelled probability of every intensity at every pixel/channel.

        Returns an ``(H, W, 3, 256)`` array. Each pixel is evaluated with
        the frame's own causal context, so candidate values substituted at
        ``(i, j)`` never influence the prediction at ``(i, j)``.
        """
        frame = self._check_shape(frame)[0]
        h, w, _ = frame.shape
        out = np.empty((h, w, 3, 256))
        batch = np.repeat(frame[None], 256, axis=0)
        vals = np.arange(256, dtype=np.uint8)
        for i in range(h):
            for j in range(w):
                trial = batch.copy()
                trial[:, i, j, :] = vals[:, None]
                logw, lp = self.component_logprobs(trial)
                mix = _logsumexp(logw[:, i, j] + lp[:, i, j], axis=-1)
                out[i, j] = np.exp(mix).T
        return out


class UniformDensity(DensityModel):
    """Every intensity equally likely; a fixed reference model."""

    def __init__(self, height, width, k=1):
        self.height, self.width, self.k = height, width, k

    def component_logprobs(self, frames):
        frames = self._check_shape(frames)
        shape = frames.shape + (self.k,)
        return (np.full(shape, -np.log(self.k)), np.full(shape, -np.log(256.0)))


class MaskedConvDensity(DensityModel):
    """Two masked 3x3 convolutions, ReLU, and a 1x1 mixture head."""

    def __init__(self, height, width, k, channels, params=None, seed=0, version=FORMAT_VERSION):
        self.height, self.width = int(height), int(width)
        self.k, self.channels = int(k), int(channels)
        self.seed = int(seed)
        self.version = version
        self.params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        c, out = self.channels, 9 * self.k
        w1 = rng.normal(0.0, 1.0 / np.sqrt(3 * len(OFFSETS_A)), (len(OFFSETS_A), 3, c))
        w2 = rng.normal(0.0, 1.0 / np.sqrt(c * len(OFFSETS_B)), (len(OFFSETS_B), c, c))
        wo = rng.normal(0.0, 0.1 / np.sqrt(c), (c, out))
        bo = np.zeros(out)
        # head layout per channel: [logits(K), means(K), log_scales(K)]
        heads = bo.reshape(3, 3, self.k)
        heads[:, 1, :] = np.linspace(-0.5, 0.5, self.k) if self.k > 1 else 0.0
        heads[:, 2, :] = np.log(0.2)
        params = {"w1": w1, "b1": np.zeros(c), "w2": w2, "b2": np.zeros(c),
                  "wo": wo, "bo": heads.reshape(-1)}
        return {name: _as_f32(v) for name, v in params.items()}

    def value_probabilities(self, frame):
        # the prediction at (i, j) never reads (i, j), so one pass suffices
        log_w, mean, log_scale = self.predict(frame)
        vals = np.arange(256, dtype=np.uint8)[:, None, None, None, None]
        shape = (256,) + mean.shape[1:]
        lp, _, _ = kernels.logistic_logprob(np.broadcast_to(vals, shape),
                                            np.broadcast_to(mean[0], shape),
                                            np.broadcast_to(log_scale[0], shape),
                                            with_grad=False)
        mix = _logsumexp(log_w[0] + lp, axis=-1)
        return np.exp(np.moveaxis(mix, 0, -1))

    def n_params(self):
        return int(sum(v.size for v in self.params.values()))

    # forward / backward -------------------------------------------------
    def _forward(self, frames):
        p = self.params
        x = frames.astype(np.float64) / 127.5 - 1.0
        s1 = [_shift(x, di, dj) for di, dj in OFFSETS_A]
        a1 = sum(s @ p["w1"][o] for o, s in enumerate(s1)) + p["b1"]
        h1 = np.maximum(a1, 0.0)
        s2 = [_shift(h1, di, dj) for di, dj in OFFSETS_B]
        a2 = sum(s @ p["w2"][o] for o, s in enumerate(s2)) + p["b2"]
        h2 = np.maximum(a2, 0.0)
        out = h2 @ p["wo"] + p["bo"]
        cache = (s1, a1, s2, a2, h2)
        return out, cache

    def _split(self, out):
        n, h, w, _ = out.shape
        heads = out.reshape(n, h, w, 3, 3, self.k)
        logits, mean, raw_ls = heads[..., 0, :], heads[..., 1, :], heads[..., 2, :]
        log_scale = np.maximum(raw_ls, MIN_LOG_SCALE)
        log_w = logits - _logsumexp(logits, axis=-1)[..., None]
        return log_w, mean, log_scale, raw_ls

    def predict(self, frames):
        """Mixture parameters ``(log_weights, mean, log_scale)`` per sub-pixel."""
        frames = self._check_shape(frames)
        out, _ = self._forward(frames)
        log_w, mean, log_scale, _ = self._split(out)
        return log_w, mean, log_scale

    def component_logprobs(self, frames):
        frames = self._check_shape(frames)
        log_w, mean, log_scale = self.predict(frames)
        vals = np.broadcast_to(frames[..., None], mean.shape)
        lp, _, _ = kernels.logistic_logprob(vals, mean, log_scale, with_grad=False)
        return log_w, lp

    def loss_and_grad(self, frames):
        """Mean negative log-likelihood per sub-pixel and its gradient."""
        frames = self._check_shape(frames)
        n, h, w, _ = frames.shape
        out, (s1, a1, s2, a2, h2) = self._forward(frames)
        log_w, mean, log_scale, raw_ls = self._split(out)
        vals = np.broadcast_to(frames[..., None], mean.shape)
        lp, gmu, gls = kernels.logistic_logprob(vals, mean, log_scale)
        z = log_w + lp
        mix = _logsumexp(z, axis=-1)
        scale = 1.0 / (n * h * w * 3)
        loss = -float(mix.sum()) * scale
        resp = np.exp(z - mix[..., None])
        g_logits = -(resp - np.exp(log_w)) * scale
        g_mean = -resp * gmu * scale
        g_ls = -resp * gls * scale * (raw_ls >= MIN_LOG_SCALE)
        g_out = np.stack([g_logits, g_mean, g_ls], axis=-2).reshape(out.shape)

        p = self.params
        cout = g_out.shape[-1]
        grads = {"wo": h2.reshape(-1, self.channels).T @ g_out.reshape(-1, cout),
                 "bo": g_out.reshape(-1, cout).sum(0)}
        g_a2 = (g_out @ p["wo"].T) * (a2 > 0)
        grads["b2"] = g_a2.reshape(-1, self.channels).sum(0)
        grads["w2"] = np.stack([
            s.reshape(-1, self.channels).T @ g_a2.reshape(-1, self.channels) for s in s2])
        g_h1 = np.zeros_like(a1)
        for o, (di, dj) in enumerate(OFFSETS_B):
            g_h1 += _shift(g_a2 @ p["w2"][o].T, -di, -dj)
        g_a1 = g_h1 * (a1 > 0)
        grads["b1"] = g_a1.reshape(-1, self.channels).sum(0)
        grads["w1"] = np.stack([
            s.reshape(-1, 3).T @ g_a1.reshape(-1, self.channels) for s in s1])
        return loss, grads

    # persistence ----------------------------------------------------------
    def to_bytes(self):
        names = sorted(self.params)
        header = {
            "format": "ratpad.density", "version": self.version,
            "height": self.height, "width": self.width, "k": self.k,
            "channels": self.channels, "seed": self.seed,
            "params": [[name, list(self.params[name].shape)] for name in names],
        }
        hbytes = json.dumps(header, sort_keys=True).encode()
        block = b"".join(self.params[name].astype("<f4").tobytes() for name in names)
        return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + block

    @classmethod
    def from_bytes(cls, data):
        if data[:8] != MAGIC:
            raise ValueError("not a density model file (bad magic)")
        (hlen,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12:12 + hlen])
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported density model version {header.get('version')}")
        offset = 12 + hlen
        params = {}
        for name, shape in header["params"]:
            size = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=offset)
            params[name] = arr.astype(np.float64).reshape(shape)
            offset += 4 * size
        if offset != len(data):
            raise ValueError("density model file has trailing or missing bytes")
        return cls(header["height"], header["width"], header["k"], header["channels"],
                   params=params, seed=header["seed"], version=header["version"])

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _as_f32(arr):
    # parameters live on the float32 grid so that save/load is lossless
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def _as_videos(frames):
    """Normalise input to a list of (T, H, W, 3) uint8 arrays."""
    if isinstance(frames, np.ndarray):
        if frames.ndim == 4:
            return [_check_frames(f) for f in frames]
        if frames.ndim == 5:
            return [_check_frames(v) for v in frames]
        raise ValueError(f"unsupported frame array shape {frames.shape}")
    return [_check_frames(v) for v in frames]


def fit_density(frames, config=None):
    """Fit a :class:`MaskedConvDensity` on bona fide frames.

    ``frames`` is either a collection of frames or a collection of videos
    (each a ``(T, H, W, 3)`` array). Each epoch draws one random frame per
    video. Training is deterministic given ``config.seed``.
    """
    config = config or DensityConfig()
    videos = _as_videos(frames)
    if not videos:
        raise ValueError("no training frames")
    hw = {v.shape[1:3] for v in videos}
    if len(hw) != 1:
        raise ValueError("inconsistent frame size")
    h, w = hw.pop()
    model = MaskedConvDensity(h, w, config.k, config.channels, seed=config.seed)
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(lr=config.learning_rate)
    params = model.params
    for _ in range(config.epochs):
        picks = np.stack([v[rng.integers(len(v))] for v in videos])
        order = rng.permutation(len(picks))
        for start in range(0, len(order), config.batch_size):
            batch = picks[order[start:start + config.batch_size]]
            _, grads = model.loss_and_grad(batch)
            opt.step(params, grads)
    model.params = {name: _as_f32(v) for name, v in params.items()}
    return model


def per_pixel_loglik(model, frame):
    """Per-component log-likelihood tensor of one frame."""
    frame = _check_frames(frame)
    if frame.shape[0] != 1:
        raise ValueError("per_pixel_loglik expects a single frame")
    return batch_loglik(model, frame)[0]


def batch_loglik(model, frames, chunk=64):
    """:func:`per_pixel_loglik` over many frames, evaluated in chunks."""
    frames = model._check_shape(frames)
    out = []
    for start in range(0, len(frames), chunk):
        log_w, lp = model.component_logprobs(frames[start:start + chunk])
        n, h, w, _, k = lp.shape
        agg = _logsumexp(log_w + lp, axis=-1).reshape(n, -1).sum(1)
        for idx in range(n):
            out.append(PixelLogLikTensor(lp[idx].reshape(h, w, 3 * k),
                                         log_w[idx].reshape(h, w, 3 * k), float(agg[idx])))
    return out


def video_aggregate_loglik(model, video):
    """Mean per-frame aggregate log-likelihood of a video."""
    video = _check_frames(video) if len(video) else np.empty((0,))
    if len(video) == 0:
        raise ValueError("empty video")
    return float(np.mean([t.aggregate for t in batch_loglik(model, video)]))
