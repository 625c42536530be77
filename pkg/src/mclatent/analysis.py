"""Which hypothesis wins where: winner logs over a dataset, utilisation
histograms, k-means over raw patches and per-hypothesis prototypes."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InputError
from .frontend import PATCH, frames_for
from .numerics import tensor as T
from .trainer import Batch, PretextState, forward, prepare_specs


@dataclass
class WinnerLog:
    clip: np.ndarray  # (M,) int
    row: np.ndarray
    col: np.ndarray
    winner: np.ndarray
    dmin: np.ndarray
    r: int
    patches: np.ndarray | None = field(default=None, repr=False)  # (M, 256) raw log-mel
    distances: np.ndarray | None = field(default=None, repr=False)  # (M, r)
    targets: np.ndarray | None = field(default=None, repr=False)  # (M, d) normalised teacher latents

    @property
    def total(self) -> int:
        return int(self.winner.shape[0])

    def counts(self) -> np.ndarray:
        return np.bincount(self.winner, minlength=self.r)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["clip", "row", "col", "winner", "dmin"])
            for rec in zip(self.clip, self.row, self.col, self.winner, self.dmin):
                w.writerow([int(rec[0]), int(rec[1]), int(rec[2]), int(rec[3]), repr(float(rec[4]))])


def read_winners(path: str | os.PathLike, r: int) -> WinnerLog:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    col = lambda k, t: np.array([t(x[k]) for x in rows], dtype=np.int64 if t is int else np.float64)  # noqa: E731
    return WinnerLog(col("clip", int), col("row", int), col("col", int), col("winner", int), col("dmin", float), r)


def eval_batch(ds, cids: list[int], state: PretextState, seed: int) -> Batch:
    """Crop and mask clips ``cids`` reproducibly from ``seed`` alone."""
    cfg = state.cfg
    frames = frames_for(cfg.data.crop_seconds, cfg.data.mel())
    offs, seeds = [], []
    for cid in cids:
        avail = ds.spec(cid).shape[0] - frames
        offs.append(int(np.random.default_rng([seed, cid, 1]).integers(0, avail + 1)) if avail > 0 else 0)
        seeds.append(np.random.SeedSequence([seed, cid, 2]))
    batch = prepare_specs([ds.spec(c) for c in cids], cfg, state.norm, seeds, offs)
    batch.clip_ids = np.asarray(cids)
    return batch


def collect_winners(state: PretextState, ds, sample_limit: int = 20000, seed: int = 0, batch_size: int = 32) -> WinnerLog:
    """Masked forward passes over clips in a seeded order until
    ``sample_limit`` masked patches are logged. No parameter is touched."""
    order = np.random.default_rng(seed).permutation(len(ds))
    parts: dict[str, list] = {k: [] for k in ("clip", "row", "col", "winner", "dmin", "patches", "d", "z")}
    mean, std = state.norm
    total = 0
    for start in range(0, len(order), batch_size):
        if total >= sample_limit:
            break
        cids = [int(c) for c in order[start : start + batch_size]]
        batch = eval_batch(ds, cids, state, seed)
        with T.no_grad():
            out = forward(state, batch)
        d = out.d.data  # (B, N, r)
        win = np.argmin(d, axis=-1)
        midx = batch.split.masked_idx
        pos = batch.positions[midx]  # (B, N, 2)
        raw = np.take_along_axis(batch.patches, midx[..., None], axis=1) * std + mean
        z = out.z_m.data
        z = z / np.maximum(np.linalg.norm(z, axis=-1, keepdims=True), 1e-8)
        B, N = win.shape
        parts["clip"].append(np.repeat(batch.clip_ids, N))
        parts["row"].append(pos[..., 0].reshape(-1))
        parts["col"].append(pos[..., 1].reshape(-1))
        parts["winner"].append(win.reshape(-1))
        parts["dmin"].append(np.take_along_axis(d, win[..., None], axis=-1).reshape(-1))
        parts["patches"].append(raw.reshape(B * N, -1))
        parts["d"].append(d.reshape(B * N, -1))
        parts["z"].append(z.reshape(B * N, -1))
        total += B * N
    cat = {k: (np.concatenate(v)[:sample_limit] if v else np.zeros(0)) for k, v in parts.items()}
    return WinnerLog(
        cat["clip"].astype(np.int64),
        cat["row"].astype(np.int64),
        cat["col"].astype(np.int64),
        cat["winner"].astype(np.int64),
        cat["dmin"],
        state.predictor.r,
        patches=cat["patches"],
        distances=cat["d"],
        targets=cat["z"],
    )


def utilisation_histogram(log: WinnerLog) -> np.ndarray:
    if log.total < 1:
        raise InputError("empty winner log")
    return log.counts() / log.total


# -- k-means ---------------------------------------------------------------
@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    distortion: float  # mean squared distance to the assigned centroid
    history: list[float]
    iterations: int


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[int(rng.integers(len(x)))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        tot = d2.sum()
        i = int(rng.choice(len(x), p=d2 / tot)) if tot > 0 else int(rng.integers(len(x)))
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> KMeansResult:
    """k-means++ seeding, then Lloyd iterations until the largest centroid
    shift drops below ``tol``. ``history[t]`` is the distortion of the
    assignment made at iteration ``t``; it never increases."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InputError(f"kmeans expects (M, D) points, got shape {x.shape}")
    if len(x) < k:
        raise InputError(f"kmeans needs at least k={k} points, got {len(x)}")
    rng = np.random.default_rng(seed)
    c = kmeans_pp_init(x, k, rng)
    history: list[float] = []
    labels, sq = kernels.kmeans_assign(x, c)
    it = 0
    for it in range(1, max_iter + 1):
        history.append(float(sq.mean()))
        new = np.empty_like(c)
        taken: set[int] = set()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                # re-seed from the point farthest from its centroid; moving it to
                # its own cluster can only lower the distortion
                order = np.argsort(-sq, kind="stable")
                far = next(int(i) for i in order if int(i) not in taken)
                taken.add(far)
                new[j] = x[far]
        shift = float(np.max(np.abs(new - c)))
        c = new
        labels, sq = kernels.kmeans_assign(x, c)
        if shift < tol:
            break
    history.append(float(sq.mean()))
    return KMeansResult(c, labels, float(sq.mean()), history, it)


def two_means_distortion(x: np.ndarray, restarts: int = 20, seed: int = 0, axes: int = 4) -> float:
    """Best 2-means distortion found by an exhaustive threshold search along
    the leading principal axes (each split polished by Lloyd) together with
    k-means++ restarts."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    best = np.inf
    for a in range(min(axes, vt.shape[0])):
        proj = xc @ vt[a]
        order = np.argsort(proj, kind="stable")
        xs = x[order]
        csum = np.cumsum(xs, axis=0)
        csq = np.cumsum((xs**2).sum(axis=1))
        n = len(xs)
        m = np.arange(1, n)
        left = csq[:-1] - (csum[:-1] ** 2).sum(axis=1) / m
        right = (csq[-1] - csq[:-1]) - ((csum[-1] - csum[:-1]) ** 2).sum(axis=1) / (n - m)
        cut = int(np.argmin(left + right)) + 1
        c = np.stack([xs[:cut].mean(axis=0), xs[cut:].mean(axis=0)])
        for _ in range(100):
            lab, sq = kernels.kmeans_assign(x, c)
            if np.bincount(lab, minlength=2).min() == 0:
                break
            new = np.stack([x[lab == j].mean(axis=0) for j in range(2)])
            if np.array_equal(new, c):
                break
            c = new
        best = min(best, float(kernels.kmeans_assign(x, c)[1].mean()))
    for s in range(restarts):
        best = min(best, kmeans(x, 2, seed=seed + s).distortion)
    return best


# -- prototypes ------------------------------------------------------------
@dataclass
class PrototypeSet:
    k: int
    centroids: dict[int, np.ndarray]  # j -> (k, 16, 16)
    sizes: dict[int, np.ndarray]
    distortion: dict[int, float]
    under_populated: dict[int, int]  # j -> patch count, for hypotheses with < k patches
    history: dict[int, list[float]] = field(default_factory=dict)  # per-iteration distortion


def prototypes(log: WinnerLog, patches: np.ndarray | None = None, k: int = 5, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> PrototypeSet:
    src = log.patches if patches is None else np.asarray(patches)
    if src is None or len(src) != log.total:
        raise InputError("prototypes need one raw patch per winner record")
    out = PrototypeSet(k, {}, {}, {}, {})
    for j in range(log.r):
        pts = src[log.winner == j]
        if len(pts) < k:
            out.under_populated[j] = int(len(pts))
            continue
        res = kmeans(pts, k, seed=seed + j, max_iter=max_iter, tol=tol)
        out.centroids[j] = res.centroids.reshape(k, PATCH, PATCH)
        out.sizes[j] = np.bincount(res.labels, minlength=k)
        out.distortion[j] = res.distortion
        out.history[j] = res.history
    return out


def time_center_of_mass(patch: np.ndarray) -> float:
    """Energy-weighted mean frame index (0..15) of a 16x16 time-major patch,
    with energy taken relative to the patch minimum."""
    p = np.asarray(patch, dtype=np.float64).reshape(PATCH, PATCH)
    w = (p - p.min()).sum(axis=1)
    if w.sum() <= 0:
        return (PATCH - 1) / 2
    return float((w * np.arange(PATCH)).sum() / w.sum())


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> tuple[float, float]:
    """8-bit binary PGM with min-max scaling; returns ``(min, max)``."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros(img.shape) if hi == lo else (img - lo) / (hi - lo)
    px = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(px.tobytes())
    return lo, hi


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    head = data.split(maxsplit=3)
    if head[0] != b"P5":
        raise InputError(f"{os.fspath(path)}: not a binary PGM")
    w, h = int(head[1]), int(head[2])
    return np.frombuffer(data[-w * h :], dtype=np.uint8).reshape(h, w)


def export_prototypes(protos: PrototypeSet, out_dir: str) -> list[str]:
    """``proto_h{j}_c{c}.pgm`` per centroid, plus ``proto_scale.csv`` (min-max
    per image) and ``prototypes.csv`` (raw values, row-major)."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    with open(os.path.join(out_dir, "proto_scale.csv"), "w", newline="") as sfh, open(
        os.path.join(out_dir, "prototypes.csv"), "w", newline=""
    ) as rfh:
        sw, rw = csv.writer(sfh, lineterminator="\n"), csv.writer(rfh, lineterminator="\n")
        sw.writerow(["hypothesis", "cluster", "size", "min", "max", "file"])
        rw.writerow(["hypothesis", "cluster"] + [f"v{i}" for i in range(PATCH * PATCH)])
        for j in sorted(protos.centroids):
            for c, img in enumerate(protos.centroids[j]):
                name = f"proto_h{j}_c{c}.pgm"
                # rows of the image are frequency bins, columns are frames
                lo, hi = write_pgm(os.path.join(out_dir, name), img.T[::-1])
                sw.writerow([j, c, int(protos.sizes[j][c]), repr(lo), repr(hi), name])
                rw.writerow([j, c] + [repr(float(v)) for v in img.reshape(-1)])
                written.append(name)
    return written
