"""On-disk dataset format, synthetic corpora and cross-validation plans.

Feature file (little-endian)::

    b"VSUMFEAT" | u32 T | u32 D | u32 reserved | u32 crc32(payload) | T*D f64

Annotation file::

    b"VSUMANNO" | u32 U | u32 T | U*T f64 user scores | T f64 mean scores
                | U*T u8 user key-shot selections

The manifest is a JSON document; file paths are relative to it.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetLoadError, InputError
from .evaluation import SegmentList, knapsack_select
from .tensor import SeededRng

FEATURE_MAGIC = b"VSUMFEAT"
ANNOTATION_MAGIC = b"VSUMANNO"
FEATURE_HEADER = 24
SETTINGS = ("canonical", "augmented", "transfer")
LABEL_STYLES = ("continuous", "binary")


@dataclass
class Video:
    video_id: str
    features: np.ndarray
    scores: np.ndarray          # mean annotator score, the training target
    user_scores: np.ndarray     # U x T
    user_summaries: np.ndarray  # U x T, bool
    fps: float = 1.0

    @property
    def T(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    name: str
    videos: list[Video]
    label_style: str = "continuous"
    f1_aggregation: str = "mean"
    root: Path | None = None

    def by_id(self) -> dict[str, Video]:
        return {v.video_id: v for v in self.videos}

    @property
    def ids(self) -> list[str]:
        return [v.video_id for v in self.videos]


# -- writing ---------------------------------------------------------------


def _fsync_write(path: Path, blob: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def encode_features(features: np.ndarray) -> bytes:
    X = np.ascontiguousarray(features, dtype="<f8")
    payload = X.tobytes()
    T, D = X.shape
    return FEATURE_MAGIC + struct.pack("<IIII", T, D, 0, zlib.crc32(payload)) + payload


def encode_annotations(user_scores, mean_scores, user_summaries) -> bytes:
    us = np.ascontiguousarray(user_scores, dtype="<f8")
    U, T = us.shape
    return (ANNOTATION_MAGIC + struct.pack("<II", U, T) + us.tobytes()
            + np.ascontiguousarray(mean_scores, dtype="<f8").tobytes()
            + np.ascontiguousarray(user_summaries, dtype=np.uint8).tobytes())


def write_features(video_id: str, features, scores, user_scores, user_summaries,
                   out_dir) -> tuple[Path, Path]:
    """Validate and write ``<id>.feat`` / ``<id>.anno``; returns both paths."""
    X = np.asarray(features, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64).ravel()
    us = np.atleast_2d(np.asarray(user_scores, dtype=np.float64))
    summ = np.atleast_2d(np.asarray(user_summaries))
    if X.ndim != 2 or X.shape[0] < 1:
        raise InputError(f"{video_id}: features must be a non-empty T x D matrix")
    if not np.all(np.isfinite(X)):
        raise InputError(f"{video_id}: non-finite features")
    T = X.shape[0]
    if s.size != T or us.shape[1] != T or summ.shape != us.shape:
        raise InputError(f"{video_id}: inconsistent shapes "
                         f"(T={T}, scores={s.size}, users={us.shape}, summaries={summ.shape})")
    for name, arr in (("scores", s), ("user scores", us)):
        if not np.all((arr >= 0) & (arr <= 1)):
            raise InputError(f"{video_id}: {name} outside [0, 1]")
    if not np.all((summ == 0) | (summ == 1)):
        raise InputError(f"{video_id}: user summaries must be 0/1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fpath, apath = out / f"{video_id}.feat", out / f"{video_id}.anno"
    _fsync_write(fpath, encode_features(X))
    _fsync_write(apath, encode_annotations(us, s, summ))
    return fpath, apath


def write_manifest(path, name: str, entries: list[dict], label_style="continuous",
                   f1_aggregation="mean") -> Path:
    doc = {"name": name, "label_style": label_style, "f1_aggregation": f1_aggregation,
           "videos": entries}
    path = Path(path)
    _fsync_write(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
    return path


# -- reading ---------------------------------------------------------------


def decode_features(blob: bytes, video_id=None, expect=None) -> np.ndarray:
    if len(blob) < FEATURE_HEADER or blob[:8] != FEATURE_MAGIC:
        raise DatasetLoadError("bad feature magic", video_id, 0)
    T, D, _, crc = struct.unpack_from("<IIII", blob, 8)
    if expect is not None:
        if T != expect[0]:
            raise DatasetLoadError(f"header T={T}, manifest T={expect[0]}", video_id, 8)
        if D != expect[1]:
            raise DatasetLoadError(f"header D={D}, manifest D={expect[1]}", video_id, 12)
    payload = blob[FEATURE_HEADER:]
    if len(payload) != T * D * 8:
        raise DatasetLoadError(f"payload holds {len(payload) // 8} values, "
                               f"expected {T * D}", video_id,
                               FEATURE_HEADER + min(len(payload), T * D * 8))
    if zlib.crc32(payload) != crc:
        raise DatasetLoadError("checksum mismatch", video_id, 20)
    X = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(T, D)
    bad = np.flatnonzero(~np.isfinite(X.ravel()))
    if bad.size:
        raise DatasetLoadError("non-finite feature value", video_id,
                               FEATURE_HEADER + 8 * int(bad[0]))
    return X


def decode_annotations(blob: bytes, video_id=None, expect=None):
    if len(blob) < 16 or blob[:8] != ANNOTATION_MAGIC:
        raise DatasetLoadError("bad annotation magic", video_id, 0)
    U, T = struct.unpack_from("<II", blob, 8)
    if expect is not None and (U, T) != expect:
        raise DatasetLoadError(f"header U={U} T={T}, manifest U={expect[0]} "
                               f"T={expect[1]}", video_id, 8)
    need = 16 + U * T * 8 + T * 8 + U * T
    if len(blob) != need:
        raise DatasetLoadError(f"annotation file is {len(blob)} bytes, expected {need}",
                               video_id, min(len(blob), need))
    pos = 16
    us = np.frombuffer(blob, "<f8", U * T, pos).astype(np.float64).reshape(U, T)
    pos += U * T * 8
    mean = np.frombuffer(blob, "<f8", T, pos).astype(np.float64)
    pos += T * 8
    summ = np.frombuffer(blob, np.uint8, U * T, pos).reshape(U, T)
    for arr, off in ((us, 16), (mean, 16 + U * T * 8)):
        bad = np.flatnonzero(~np.isfinite(arr.ravel()) | (arr.ravel() < 0) | (arr.ravel() > 1))
        if bad.size:
            raise DatasetLoadError("score outside [0, 1]", video_id, off + 8 * int(bad[0]))
    if np.any(summ > 1):
        raise DatasetLoadError("user summary byte not 0/1", video_id,
                               pos + int(np.flatnonzero(summ.ravel() > 1)[0]))
    return us, mean, summ.astype(bool)


def load_dataset(manifest_path) -> Dataset:
    """Load and validate every video named by the manifest; any mismatch
    raises ``DatasetLoadError`` and nothing is returned."""
    mpath = Path(manifest_path)
    try:
        doc = json.loads(mpath.read_text())
    except (OSError, ValueError) as exc:
        raise DatasetLoadError(f"cannot read manifest {mpath}: {exc}") from exc
    for key in ("name", "videos"):
        if key not in doc:
            raise DatasetLoadError(f"manifest missing {key!r}")
    style = doc.get("label_style", "continuous")
    if style not in LABEL_STYLES:
        raise DatasetLoadError(f"unknown label_style {style!r}")
    root = mpath.parent
    videos, seen = [], set()
    for entry in doc["videos"]:
        vid = str(entry["id"])
        if vid in seen:
            raise DatasetLoadError("duplicate video id", vid)
        seen.add(vid)
        try:
            fblob = (root / entry["features"]).read_bytes()
            ablob = (root / entry["annotations"]).read_bytes()
        except OSError as exc:
            raise DatasetLoadError(f"missing file: {exc}", vid) from exc
        T, D, U = int(entry["T"]), int(entry["D"]), int(entry["U"])
        X = decode_features(fblob, vid, (T, D))
        us, mean, summ = decode_annotations(ablob, vid, (U, T))
        videos.append(Video(vid, X, mean, us, summ, float(entry.get("fps", 1.0))))
    return Dataset(doc["name"], videos, style, doc.get("f1_aggregation", "mean"), root)


# -- synthetic corpus ------------------------------------------------------


def _random_bounds(rng: SeededRng, T: int) -> tuple:
    """About ``ceil(T/15)`` shots, alternating short (within the 15% budget)
    and long, so default KTS and knapsack settings give non-empty summaries."""
    n_seg = max(2, -(-T // 15))
    cap = max(2, int(0.15 * T))
    n_short = n_seg // 2
    short = [int(rng.integers(2, cap + 1)) for _ in range(n_short)]
    n_long = n_seg - n_short
    rest = T - sum(short)
    if rest < 2 * n_long:
        return tuple(int(round(x)) for x in np.linspace(0, T, n_seg + 1))
    cuts = sorted(rng.generator.choice(np.arange(1, rest - 2 * n_long + 1), size=n_long - 1,
                                       replace=True).tolist()) if n_long > 1 else []
    long_ = np.diff([0, *cuts, rest - 2 * n_long]) + 2
    lengths = []
    for i in range(n_seg):
        lengths.append(int(long_[i // 2]) if i % 2 == 0 else short[i // 2])
    return tuple(np.concatenate([[0], np.cumsum(lengths)]).astype(int).tolist())


def synth_video(rng: SeededRng, video_id: str, T: int, D: int, U: int,
                direction: np.ndarray | None = None) -> Video:
    """Piecewise-smooth features with segment-level latent importance and U
    noisy annotator tracks around it.

    With ``direction`` the importance of a shot rises with the projection of
    its mean feature onto it, so a corpus sharing one direction is learnable
    across videos; otherwise shot importance is drawn at random."""
    segs = SegmentList(_random_bounds(rng, T))
    X = np.empty((T, D))
    latent = np.empty(T)
    for a, b in segs.segments():
        center = rng.normal(0.0, 1.0, D)
        drift = rng.normal(0.0, 0.05, D)
        steps = np.arange(b - a)[:, None]
        X[a:b] = center + steps * drift + rng.normal(0.0, 0.1, (b - a, D))
        if direction is None:
            level = rng.uniform(0.1, 0.9)
        else:
            level = 0.1 + 0.8 / (1.0 + np.exp(-2.0 * center @ direction))
        latent[a:b] = level + 0.1 * np.sin(np.linspace(0, np.pi, b - a))
    user_scores = np.clip(latent + rng.normal(0.0, 0.15, (U, T)), 0.0, 1.0)
    summaries = np.array([knapsack_select(u, segs).selection for u in user_scores])
    return Video(video_id, X, user_scores.mean(axis=0), user_scores, summaries)


def synth_dataset(out_dir, videos: int = 6, t_range=(40, 80), D: int = 16, U: int = 5,
                  seed: int = 0, name: str = "synthetic", label_style="continuous",
                  f1_aggregation="mean") -> Path:
    """Write a synthetic corpus plus ``manifest.json``; returns the manifest path."""
    lo, hi = t_range
    if videos < 1 or U < 1 or D < 1 or lo < 2 or hi < lo:
        raise InputError("videos, U, D must be positive and 2 <= T_min <= T_max")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = SeededRng(seed)
    direction = base.normal(0.0, 1.0, D)
    direction /= np.linalg.norm(direction)
    entries = []
    for i in range(videos):
        rng = base.spawn(i)
        T = int(rng.integers(lo, hi + 1))
        vid = f"{name}_{i:03d}"
        v = synth_video(rng, vid, T, D, U, direction)
        user_scores = v.user_scores
        mean = v.scores
        if label_style == "binary":
            user_scores = v.user_summaries.astype(np.float64)
            mean = (user_scores.mean(axis=0) >= 0.5).astype(np.float64)
        fpath, apath = write_features(vid, v.features, mean, user_scores,
                                      v.user_summaries, out)
        entries.append({"id": vid, "T": T, "D": D, "U": U, "fps": 2.0,
                        "features": fpath.name, "annotations": apath.name})
    return write_manifest(out / "manifest.json", name, entries, label_style, f1_aggregation)


# -- fold planning ---------------------------------------------------------


@dataclass
class Fold:
    train: list[str]
    test: list[str]


@dataclass
class FoldPlan:
    k: int
    setting: str
    folds: list[Fold]
    target: str = ""
    aux: list[str] = field(default_factory=list)
    binary_label_datasets: list[str] = field(default_factory=list)

    def check(self) -> None:
        for f in self.folds:
            if set(f.train) & set(f.test):
                raise AssertionError("a test video appears in its fold's train list")

    def to_dict(self) -> dict:
        return {"k": self.k, "setting": self.setting, "target": self.target,
                "aux": self.aux, "binary_label_datasets": self.binary_label_datasets,
                "folds": [{"train": f.train, "test": f.test} for f in self.folds]}


def kfold_splits(ids, k: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded shuffle then contiguous partition into ``k`` test folds."""
    ids = list(getattr(ids, "ids", ids))
    n = len(ids)
    if not 1 <= k <= n:
        raise InputError(f"k={k} folds for {n} videos")
    order = SeededRng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    tests = [list(part) for part in np.array_split(np.array(shuffled, dtype=object), k)]
    folds = [Fold([v for v in shuffled if v not in set(t)], t) for t in tests]
    plan = FoldPlan(k, "canonical", folds)
    plan.check()
    return plan


def assemble_setting(target: Dataset, aux: list[Dataset] | None = None,
                     setting: str = "canonical", k: int = 5, seed: int = 0) -> FoldPlan:
    aux = list(aux or [])
    if setting not in SETTINGS:
        raise InputError(f"setting must be one of {SETTINGS}")
    binary = [d.name for d in [target, *aux] if d.label_style == "binary"]
    aux_ids = [vid for d in aux for vid in d.ids]
    if setting == "transfer":
        if not aux:
            raise InputError("transfer setting needs auxiliary datasets")
        plan = FoldPlan(1, setting, [Fold(aux_ids, list(target.ids))])
    else:
        if setting == "augmented" and not aux:
            raise InputError("augmented setting needs auxiliary datasets")
        plan = kfold_splits(target.ids, k, seed)
        plan.setting = setting
        if setting == "augmented":
            for f in plan.folds:
                f.train = f.train + aux_ids
    plan.target = target.name
    plan.aux = [d.name for d in aux]
    plan.binary_label_datasets = binary
    plan.check()
    return plan
