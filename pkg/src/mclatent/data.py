"""Datasets as sources of raw log-mel spectrograms.

Every dataset exposes ``len()``, ``spec(i)`` (frames x bins, unnormalised
log-mel) and ``label(i)``. Clip ``i`` is a pure function of the dataset seed
and ``i``.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError
from .frontend import PATCH, AudioClip, MelConfig, compute_log_mel, frames_for, read_manifest, read_wav, synth_scene

EVENT_CLASSES = ("tone", "chirp", "noise", "am")


def _loguniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def random_event(kind: str, rng: np.random.Generator, start: float, end: float, amp: float) -> dict:
    ev = {"kind": kind, "start": start, "end": end, "amp": amp}
    if kind == "tone":
        ev["freq"] = _loguniform(rng, 150.0, 6000.0)
    elif kind == "chirp":
        f0 = _loguniform(rng, 150.0, 6000.0)
        f1 = _loguniform(rng, 150.0, 6000.0)
        while abs(np.log(f1 / f0)) < np.log(2.0):
            f1 = _loguniform(rng, 150.0, 6000.0)
        ev["f0"], ev["f1"] = f0, f1
    elif kind == "am":
        ev["freq"] = _loguniform(rng, 150.0, 6000.0)
        ev["rate"] = float(rng.uniform(3.0, 12.0))
        ev["depth"] = float(rng.uniform(0.8, 1.0))
    elif kind == "noise":
        lo = _loguniform(rng, 100.0, 4000.0)
        ev["low"], ev["high"] = lo, min(7900.0, lo * float(rng.uniform(1.5, 4.0)))
    else:
        raise InputError(f"unknown event kind {kind!r}")
    return ev


def random_scene_recipe(rng: np.random.Generator, duration: float, sample_rate: int = 16000) -> dict:
    """1-3 random events of random kinds, spans and levels, over a faint
    broadband floor."""
    events = [{"kind": "noise", "amp": float(rng.uniform(0.002, 0.02))}]
    for _ in range(int(rng.integers(1, 4))):
        length = float(rng.uniform(0.3, duration))
        start = float(rng.uniform(0.0, duration - length))
        kind = EVENT_CLASSES[int(rng.integers(len(EVENT_CLASSES)))]
        events.append(random_event(kind, rng, start, start + length, float(rng.uniform(0.05, 0.3))))
    return {"duration": duration, "sample_rate": sample_rate, "events": events}


def event_task_recipe(label: int, rng: np.random.Generator, duration: float, sample_rate: int = 16000) -> dict:
    """One event of class ``EVENT_CLASSES[label]`` at a random level over a
    random-level broadband floor, plus one distractor tone or noise band."""
    length = float(rng.uniform(0.6, duration))
    start = float(rng.uniform(0.0, duration - length))
    kind = EVENT_CLASSES[label]
    events = [
        {"kind": "noise", "amp": float(rng.uniform(0.002, 0.03))},
        random_event(kind, rng, start, start + length, float(rng.uniform(0.05, 0.4))),
    ]
    dl = float(rng.uniform(0.2, duration / 2))
    ds = float(rng.uniform(0.0, duration - dl))
    dkind = ("tone", "noise")[int(rng.integers(2))]
    events.append(random_event(dkind, rng, ds, ds + dl, float(rng.uniform(0.01, 0.08))))
    return {"duration": duration, "sample_rate": sample_rate, "events": events, "label": kind}


class _CachedSpecs:
    def __init__(self):
        self._cache: dict[int, np.ndarray] = {}

    def spec(self, i: int) -> np.ndarray:
        if i not in self._cache:
            self._cache[i] = self._compute(i)
        return self._cache[i]

    def _compute(self, i: int) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError


class SceneDataset(_CachedSpecs):
    """Random multi-event synthetic scenes (the pretraining corpus)."""

    def __init__(self, n_clips: int, seconds: float, mel: MelConfig, seed: int):
        super().__init__()
        self.n, self.seconds, self.mel, self.seed = n_clips, seconds, mel, seed

    def __len__(self) -> int:
        return self.n

    def recipe(self, i: int) -> dict:
        return random_scene_recipe(np.random.default_rng([self.seed, i]), self.seconds, self.mel.sample_rate)

    def clip(self, i: int) -> AudioClip:
        return synth_scene(self.recipe(i), seed=self.seed * 1_000_003 + i)

    def _compute(self, i: int) -> np.ndarray:
        return compute_log_mel(self.clip(i), self.mel).values

    def label(self, i: int):
        return None


class EventTaskDataset(SceneDataset):
    """Four-way single-event classification task with balanced labels."""

    def __init__(self, n_clips: int, seconds: float, mel: MelConfig, seed: int):
        super().__init__(n_clips, seconds, mel, seed)
        self.labels = np.random.default_rng([seed, 10**9]).permutation(np.arange(n_clips) % len(EVENT_CLASSES))

    def recipe(self, i: int) -> dict:
        return event_task_recipe(int(self.labels[i]), np.random.default_rng([self.seed, i]), self.seconds, self.mel.sample_rate)

    def label(self, i: int) -> int:
        return int(self.labels[i])


# -- toy one-to-many task --------------------------------------------------
def two_mode_patterns(level: float = 4.0) -> np.ndarray:
    """Two fixed 16x16 (time x freq) patches: energy in the first half of the
    frames (mode 0) or in the second half (mode 1)."""
    a = np.zeros((PATCH, PATCH))
    a[: PATCH // 2] = level
    return np.stack([a, a[::-1]])


class TwoModeDataset:
    """Spectrograms tiled with patches drawn i.i.d. from two fixed patterns.

    The visible patches carry no information about any masked patch, so the
    completion of every masked patch is one of two equally likely patterns.
    """

    def __init__(self, n_clips: int, frames: int, bins: int, seed: int, noise: float = 0.05, floor: float = -4.0):
        self.n, self.frames, self.bins, self.seed, self.noise, self.floor = n_clips, frames, bins, seed, noise, floor
        self.patterns = two_mode_patterns() + floor

    def __len__(self) -> int:
        return self.n

    def modes(self, i: int) -> np.ndarray:
        rows, cols = self.frames // PATCH, self.bins // PATCH
        return np.random.default_rng([self.seed, i]).integers(0, 2, size=(rows, cols))

    def spec(self, i: int) -> np.ndarray:
        modes = self.modes(i)
        rows, cols = modes.shape
        v = self.patterns[modes].transpose(0, 2, 1, 3).reshape(rows * PATCH, cols * PATCH)
        out = np.full((self.frames, self.bins), self.floor)
        out[: rows * PATCH] = v
        rng = np.random.default_rng([self.seed, i, 1])
        return out + self.noise * rng.standard_normal(out.shape)

    def label(self, i: int) -> np.ndarray:
        return self.modes(i)


class ManifestDataset(_CachedSpecs):
    """WAV files listed in a ``path,label,split`` manifest."""

    def __init__(self, manifest: str, mel: MelConfig, split: str | None = None):
        super().__init__()
        rows = read_manifest(manifest)
        self.rows = [r for r in rows if split is None or r["split"] == split]
        if not self.rows:
            raise InputError(f"{manifest}: no rows" + (f" in split {split!r}" if split else ""))
        self.mel = mel
        self.classes = sorted({r["label"] for r in rows})

    def __len__(self) -> int:
        return len(self.rows)

    def clip(self, i: int) -> AudioClip:
        return read_wav(self.rows[i]["path"])

    def _compute(self, i: int) -> np.ndarray:
        return compute_log_mel(self.clip(i), self.mel).values

    def label(self, i: int) -> int:
        return self.classes.index(self.rows[i]["label"])


def build_dataset(cfg) -> object:
    """Pretraining dataset for a :class:`~mclatent.config.RunConfig`."""
    d = cfg.data
    mel = d.mel()
    if d.kind == "scenes":
        return SceneDataset(d.n_clips, d.clip_seconds, mel, d.seed)
    if d.kind == "two_mode":
        return TwoModeDataset(d.n_clips, frames_for(d.clip_seconds, mel), d.n_mels, d.seed)
    if d.kind == "manifest":
        if not d.manifest:
            raise InputError("data.kind = 'manifest' needs data.manifest")
        return ManifestDataset(d.manifest, mel, split="train")
    raise InputError(f"unknown data.kind {d.kind!r}")


def norm_stats(ds, limit: int = 200) -> tuple[float, float]:
    vals = np.concatenate([ds.spec(i).ravel() for i in range(min(limit, len(ds)))])
    return float(vals.mean()), float(max(vals.std(), 1e-6))
