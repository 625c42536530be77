"""Audio to patches: log-mel spectrograms, 16x16 patch tiling, random masking
and a small additive synthesiser for desk-scale datasets."""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, InputError

PATCH = 16

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    labels: dict[str, Any] = field(default_factory=dict)
    clipped: bool = False

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    win_length: int = 400
    hop_length: int = 160
    n_fft: int = 400
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float | None = None
    log_eps: float = 1e-5

    def validate(self) -> None:
        if self.n_mels % PATCH:
            raise ConfigError(f"n_mels={self.n_mels} is not a multiple of {PATCH}")
        if self.win_length > self.n_fft:
            raise ConfigError("win_length must not exceed n_fft")
        if self.log_eps <= 0:
            raise ConfigError("log_eps must be positive")


@dataclass
class LogMelSpec:
    values: np.ndarray  # (frames, bins)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


@dataclass
class PatchBatch:
    patches: np.ndarray  # (N, 256)
    positions: np.ndarray  # (N, 2) int: (time block, freq block)
    grid: tuple[int, int]

    def __len__(self) -> int:
        return len(self.patches)


@dataclass
class MaskSplit:
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    ratio: float
    seed: int


# -- mel -------------------------------------------------------------------
def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_points(cfg: MelConfig) -> np.ndarray:
    f_max = cfg.f_max if cfg.f_max is not None else cfg.sample_rate / 2
    mels = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(f_max), cfg.n_mels + 2)
    return mel_to_hz(mels)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    return mel_points(cfg)[1:-1]


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """HTK-spaced triangular filters, shape ``(n_mels, n_fft // 2 + 1)``,
    peak weight 1 at each centre frequency."""
    fft_freqs = np.fft.rfftfreq(cfg.n_fft, d=1.0 / cfg.sample_rate)
    pts = mel_points(cfg)
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (fft_freqs[None, :] - lo) / (mid - lo)
    down = (hi - fft_freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def _frames(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def compute_log_mel(clip: AudioClip, cfg: MelConfig = MelConfig()) -> LogMelSpec:
    """Magnitude STFT (Hann window, no centre padding) -> mel -> log(x + eps)."""
    cfg.validate()
    if clip.sample_rate != cfg.sample_rate:
        raise InputError(f"clip sample rate {clip.sample_rate} != configured {cfg.sample_rate} (no resampling)")
    x = np.asarray(clip.samples, dtype=np.float64)
    if len(x) < cfg.win_length:
        raise InputError(f"clip has {len(x)} samples, shorter than one {cfg.win_length}-sample frame")
    frames = _frames(x, cfg.win_length, cfg.hop_length) * np.hanning(cfg.win_length + 2)[1:-1]
    mag = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1))
    mel = mag @ mel_filterbank(cfg).T
    return LogMelSpec(np.log(mel + cfg.log_eps))


def frames_for(seconds: float, cfg: MelConfig) -> int:
    n = int(round(seconds * cfg.sample_rate))
    return 1 + (n - cfg.win_length) // cfg.hop_length


# -- patches ---------------------------------------------------------------
def patchify(spec: LogMelSpec) -> PatchBatch:
    """Tile into non-overlapping 16x16 blocks, time-major; a trailing partial
    time block is dropped."""
    v = np.asarray(spec.values)
    frames, bins = v.shape
    if bins % PATCH:
        raise ConfigError(f"{bins} mel bins is not a multiple of {PATCH}")
    if frames < PATCH:
        raise InputError(f"{frames} frames is fewer than one {PATCH}-frame patch")
    rows, cols = frames // PATCH, bins // PATCH
    blocks = v[: rows * PATCH].reshape(rows, PATCH, cols, PATCH).transpose(0, 2, 1, 3)
    patches = blocks.reshape(rows * cols, PATCH * PATCH)
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    positions = np.stack([rr.ravel(), cc.ravel()], axis=1)
    return PatchBatch(patches.copy(), positions, (rows, cols))


def unpatchify(batch: PatchBatch) -> np.ndarray:
    rows, cols = batch.grid
    blocks = batch.patches.reshape(rows, cols, PATCH, PATCH).transpose(0, 2, 1, 3)
    return blocks.reshape(rows * PATCH, cols * PATCH)


def masked_count(n_total: int, ratio: float) -> int:
    # round half up
    return int(np.floor(ratio * n_total + 0.5))


def random_mask(n_total: int, ratio: float, seed: int | np.random.SeedSequence) -> MaskSplit:
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio {ratio} outside [0, 1]")
    if n_total < 1:
        raise InputError("n_total must be >= 1")
    rng = np.random.default_rng(seed)
    n_mask = masked_count(n_total, ratio)
    perm = rng.permutation(n_total)
    masked = np.sort(perm[:n_mask])
    visible = np.sort(perm[n_mask:])
    s = seed if isinstance(seed, int) else int(seed.generate_state(1)[0])
    return MaskSplit(visible, masked, ratio, s)


def crop(clip: AudioClip, seconds: float, rng: np.random.Generator) -> AudioClip:
    n = int(round(seconds * clip.sample_rate))
    if len(clip.samples) < n:
        raise InputError(f"clip of {clip.duration:.3f}s shorter than crop {seconds}s")
    start = int(rng.integers(0, len(clip.samples) - n + 1))
    return AudioClip(clip.samples[start : start + n], clip.sample_rate, dict(clip.labels), clip.clipped)


def standardize(values: np.ndarray, mean: float, std: float) -> np.ndarray:
    return (values - mean) / std


# -- synthesis -------------------------------------------------------------
EVENT_KINDS = ("tone", "chirp", "noise", "am")


def _event_wave(ev: dict, t: np.ndarray, sr: int, rng: np.random.Generator) -> np.ndarray:
    kind = ev["kind"]
    amp = float(ev.get("amp", 0.5))
    if kind == "tone":
        return amp * np.sin(2 * np.pi * float(ev["freq"]) * t + float(ev.get("phase", 0.0)))
    if kind == "chirp":
        f0, f1 = float(ev["f0"]), float(ev["f1"])
        dur = max(t[-1] - t[0], 1.0 / sr) if len(t) else 1.0
        tt = t - t[0] if len(t) else t
        # exponential sweep, instantaneous frequency f0 * (f1/f0)^(tt/dur)
        k = np.log(f1 / f0) / dur
        phase = 2 * np.pi * f0 * (np.expm1(k * tt) / k if abs(k) > 1e-12 else tt)
        return amp * np.sin(phase)
    if kind == "am":
        depth = float(ev.get("depth", 1.0))
        env = 1.0 - depth * 0.5 * (1.0 - np.cos(2 * np.pi * float(ev["rate"]) * t))
        return amp * env * np.sin(2 * np.pi * float(ev["freq"]) * t)
    if kind == "noise":
        x = rng.standard_normal(len(t))
        lo, hi = ev.get("low"), ev.get("high")
        if lo is not None or hi is not None:
            spec = np.fft.rfft(x)
            f = np.fft.rfftfreq(len(x), 1.0 / sr)
            keep = np.ones_like(f, dtype=bool)
            if lo is not None:
                keep &= f >= float(lo)
            if hi is not None:
                keep &= f <= float(hi)
            x = np.fft.irfft(spec * keep, n=len(x))
            x /= max(np.std(x), 1e-12)
        return amp * x / 3.0
    raise InputError(f"unknown event kind {kind!r}; expected one of {EVENT_KINDS}")


def synth_scene(recipe: dict, seed: int) -> AudioClip:
    """Additively render ``recipe['events']`` over ``recipe['duration']`` seconds.

    Only noise events draw random numbers, each from its own stream keyed by
    ``(seed, event index)``, so deterministic events are identical across
    seeds. Sums beyond [-1, 1] are clipped and ``clipped`` is set.
    """
    sr = int(recipe.get("sample_rate", 16000))
    n = int(round(float(recipe["duration"]) * sr))
    out = np.zeros(n)
    tags = []
    ramp = max(1, int(0.005 * sr))
    for i, ev in enumerate(recipe.get("events", [])):
        a = max(0, int(round(float(ev.get("start", 0.0)) * sr)))
        b = min(n, int(round(float(ev.get("end", recipe["duration"])) * sr)))
        if b <= a:
            continue
        rng = np.random.default_rng([seed, i])
        t = np.arange(a, b) / sr
        w = _event_wave(ev, t, sr, rng)
        r = min(ramp, (b - a) // 2)
        if r > 0:
            fade = np.linspace(0.0, 1.0, r, endpoint=False)
            w[:r] *= fade
            w[b - a - r :] *= fade[::-1]
        out[a:b] += w
        tags.append(ev["kind"])
    clipped = bool(np.any(np.abs(out) > 1.0))
    if clipped:
        np.clip(out, -1.0, 1.0, out=out)
    labels = {"events": tags}
    if "label" in recipe:
        labels["label"] = recipe["label"]
    return AudioClip(out, sr, labels, clipped)


def load_recipe(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        recipe = tomllib.load(fh)
    if "duration" not in recipe:
        raise InputError(f"{os.fspath(path)}: recipe needs a 'duration'")
    for ev in recipe.get("events", []):
        if ev.get("kind") not in EVENT_KINDS:
            raise InputError(f"{os.fspath(path)}: unknown event kind {ev.get('kind')!r}")
    return recipe


# -- files -----------------------------------------------------------------
def read_wav(path: str | os.PathLike) -> AudioClip:
    """16-bit PCM or 32-bit float WAV; multi-channel input is averaged."""
    sr, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise InputError(f"{os.fspath(path)}: unsupported WAV sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if not np.all(np.isfinite(x)):
        raise InputError(f"{os.fspath(path)}: non-finite samples")
    return AudioClip(x, int(sr))


def write_wav(path: str | os.PathLike, clip: AudioClip, pcm16: bool = False) -> None:
    if pcm16:
        data = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype(np.int16)
    else:
        data = clip.samples.astype(np.float32)
    wavfile.write(path, clip.sample_rate, data)


def read_manifest(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["path", "label", "split"]:
            raise InputError(f"{os.fspath(path)}: manifest header must be 'path,label,split'")
        rows = list(reader)
    base = os.path.dirname(os.path.abspath(path))
    for row in rows:
        if not os.path.isabs(row["path"]):
            row["path"] = os.path.join(base, row["path"])
    return rows


def write_manifest(path: str | os.PathLike, rows: list[dict[str, str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["path", "label", "split"], lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in ("path", "label", "split")})


def warn_clipped(clip: AudioClip, where: str) -> None:
    if clip.clipped:
        warnings.warn(f"{where}: synthesised scene exceeded amplitude 1 and was clipped", stacklevel=2)
