"""Synthetic face-embedding sets and the SETF feature file.

Each identity owns a random unit centroid. An item's clean vector is the
centroid nudged along a dataset-wide pose direction by ``sin(yaw)`` and
renormalised; the stored embedding adds isotropic Gaussian noise whose expected
L2 norm is the item's quality sigma. Near-duplicates reuse another item's clean
vector with twice the noise. Video segments share one clean vector plus a slow
random walk across consecutive frames.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

SPLITS = ("train", "probe", "gallery")
MAX_SET_SIZE = 190
FRONTAL_LIMIT = 30.0

MAGIC = b"SETF"
VERSION = 1
HEADER = struct.Struct("<4sHIQ")

RECORD_FIELDS = [
    ("set_id", "<u8"),
    ("identity", "<u4"),
    ("split", "u1"),
    ("media", "u1"),
    ("segment_id", "<u4"),
    ("frame_index", "<u4"),
    ("yaw", "<f4"),
    ("quality_sigma", "<f4"),
    ("duplicate_of", "<i8"),
]


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class GenConfig:
    num_identities: int = 50
    embed_dim: int = 128
    sets_per_identity: int = 4
    set_size_range: tuple[int, int] = (2, 10)
    pose_offset_scale: float = 0.3
    quality_noise_range: tuple[float, float] = (0.05, 0.4)
    redundancy_rate: float = 0.0
    video_fraction: float = 0.0
    seed: int = 0
    probe_sets_per_identity: int = 1
    gallery_sets_per_identity: int = 1
    # "any", "profile" or "frontal": restricts the yaw of probe-set items
    probe_pose: str = "any"
    segment_length_range: tuple[int, int] = (3, 8)

    def __post_init__(self):
        self.set_size_range = tuple(int(v) for v in self.set_size_range)
        self.quality_noise_range = tuple(float(v) for v in self.quality_noise_range)
        self.segment_length_range = tuple(int(v) for v in self.segment_length_range)
        self.validate()

    def validate(self) -> None:
        lo, hi = self.set_size_range
        if not (1 <= lo <= hi <= MAX_SET_SIZE):
            raise ConfigError(f"set_size_range {self.set_size_range} must lie within [1, {MAX_SET_SIZE}]")
        s_lo, s_hi = self.quality_noise_range
        if not (np.isfinite(s_lo) and np.isfinite(s_hi) and 0 <= s_lo <= s_hi):
            raise ConfigError(f"bad quality_noise_range {self.quality_noise_range}")
        if not (np.isfinite(self.pose_offset_scale) and self.pose_offset_scale >= 0):
            raise ConfigError("pose_offset_scale must be finite and >= 0")
        for name in ("redundancy_rate", "video_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        for name in ("num_identities", "embed_dim", "sets_per_identity"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.probe_sets_per_identity < 0 or self.gallery_sets_per_identity < 0:
            raise ConfigError("probe/gallery set counts must be >= 0")
        if self.probe_pose not in ("any", "profile", "frontal"):
            raise ConfigError(f"unknown probe_pose {self.probe_pose!r}")
        a, b = self.segment_length_range
        if not 1 <= a <= b:
            raise ConfigError("bad segment_length_range")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class FeatureRecord:
    set_id: int
    identity: int
    split: str
    media: str  # "still" or "video"
    segment_id: int
    frame_index: int
    yaw_degrees: float
    quality_sigma: float
    duplicate_of: int | None
    embedding: np.ndarray


@dataclass
class FeatureSet:
    """One template: the items of a single set in storage order."""

    set_id: int
    identity: int
    split: str
    embeddings: np.ndarray  # [T, d] float64
    yaw: np.ndarray
    quality: np.ndarray
    duplicate_of: np.ndarray  # within-set index or -1
    media: np.ndarray  # 0 still, 1 video
    segment_id: np.ndarray
    frame_index: np.ndarray

    def __len__(self) -> int:
        return len(self.embeddings)

    def segments(self) -> dict[int, np.ndarray]:
        """Video segment id -> item indices ordered by frame index."""
        out = {}
        for sid in np.unique(self.segment_id[self.media == 1]):
            idx = np.flatnonzero((self.media == 1) & (self.segment_id == sid))
            out[int(sid)] = idx[np.argsort(self.frame_index[idx], kind="stable")]
        return out

    def stills(self) -> np.ndarray:
        return np.flatnonzero(self.media == 0)


def _record_dtype(embed_dim: int) -> np.dtype:
    return np.dtype(RECORD_FIELDS + [("embedding", "<f4", (embed_dim,))])


@dataclass
class FeatureSetCollection:
    """Columnar storage of every record, grouped by ``set_id``."""

    embed_dim: int
    set_id: np.ndarray
    identity: np.ndarray
    split: np.ndarray
    media: np.ndarray
    segment_id: np.ndarray
    frame_index: np.ndarray
    yaw: np.ndarray
    quality_sigma: np.ndarray
    duplicate_of: np.ndarray
    embedding: np.ndarray  # [N, d] float32
    pose_direction: np.ndarray | None = field(default=None, compare=False)

    @classmethod
    def empty(cls, embed_dim: int) -> "FeatureSetCollection":
        arr = np.zeros(0, dtype=_record_dtype(embed_dim))
        return cls.from_structured(arr, embed_dim)

    @classmethod
    def from_structured(cls, arr: np.ndarray, embed_dim: int, pose_direction=None) -> "FeatureSetCollection":
        return cls(
            embed_dim=embed_dim,
            set_id=np.array(arr["set_id"], dtype=np.uint64),
            identity=np.array(arr["identity"], dtype=np.uint32),
            split=np.array(arr["split"], dtype=np.uint8),
            media=np.array(arr["media"], dtype=np.uint8),
            segment_id=np.array(arr["segment_id"], dtype=np.uint32),
            frame_index=np.array(arr["frame_index"], dtype=np.uint32),
            yaw=np.array(arr["yaw"], dtype=np.float32),
            quality_sigma=np.array(arr["quality_sigma"], dtype=np.float32),
            duplicate_of=np.array(arr["duplicate_of"], dtype=np.int64),
            embedding=np.array(arr["embedding"], dtype=np.float32).reshape(len(arr), embed_dim),
            pose_direction=pose_direction,
        )

    def to_structured(self) -> np.ndarray:
        arr = np.zeros(len(self), dtype=_record_dtype(self.embed_dim))
        for name, _ in RECORD_FIELDS:
            arr[name] = getattr(self, name)
        arr["embedding"] = self.embedding
        return arr

    def __len__(self) -> int:
        return len(self.set_id)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSetCollection):
            return NotImplemented
        return self.embed_dim == other.embed_dim and self.to_structured().tobytes() == other.to_structured().tobytes()

    def record(self, i: int) -> FeatureRecord:
        dup = int(self.duplicate_of[i])
        return FeatureRecord(
            set_id=int(self.set_id[i]),
            identity=int(self.identity[i]),
            split=SPLITS[self.split[i]],
            media="video" if self.media[i] else "still",
            segment_id=int(self.segment_id[i]),
            frame_index=int(self.frame_index[i]),
            yaw_degrees=float(self.yaw[i]),
            quality_sigma=float(self.quality_sigma[i]),
            duplicate_of=None if dup < 0 else dup,
            embedding=self.embedding[i].copy(),
        )

    def sets(self, split: str | None = None) -> list[FeatureSet]:
        out = []
        if len(self) == 0:
            return out
        # records of a set are stored contiguously
        starts = np.flatnonzero(np.r_[True, self.set_id[1:] != self.set_id[:-1]])
        ends = np.r_[starts[1:], len(self)]
        for s, e in zip(starts, ends):
            sp = SPLITS[self.split[s]]
            if split is not None and sp != split:
                continue
            out.append(FeatureSet(
                set_id=int(self.set_id[s]),
                identity=int(self.identity[s]),
                split=sp,
                embeddings=self.embedding[s:e].astype(np.float64),
                yaw=self.yaw[s:e].astype(np.float64),
                quality=self.quality_sigma[s:e].astype(np.float64),
                duplicate_of=self.duplicate_of[s:e].copy(),
                media=self.media[s:e].copy(),
                segment_id=self.segment_id[s:e].copy(),
                frame_index=self.frame_index[s:e].copy(),
            ))
        return out

    def num_identities(self) -> int:
        return int(self.identity.max()) + 1 if len(self) else 0


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def sample_yaw(rng: np.random.Generator, pose: str = "any") -> float:
    """60% near-frontal uniform in [-30, 30], 40% profile uniform in +-(30, 90]."""
    if pose == "frontal":
        profile = False
    elif pose == "profile":
        profile = True
    else:
        profile = rng.random() >= 0.6
    if not profile:
        return float(rng.uniform(-FRONTAL_LIMIT, FRONTAL_LIMIT))
    # uniform on (30, 90]
    mag = 90.0 - rng.uniform(0.0, 60.0)
    return float(mag if rng.random() < 0.5 else -mag)


def clean_vector(centroid: np.ndarray, yaw: float, pose_dir: np.ndarray, scale: float) -> np.ndarray:
    return _unit(centroid + scale * np.sin(np.deg2rad(yaw)) * pose_dir)


def generate(config: GenConfig) -> FeatureSetCollection:
    config.validate()
    rng = np.random.default_rng(config.seed)
    d = config.embed_dim
    centroids = np.array([_unit(rng.standard_normal(d)) for _ in range(config.num_identities)])
    pose_dir = _unit(rng.standard_normal(d))
    lo, hi = config.set_size_range
    s_lo, s_hi = config.quality_noise_range
    seg_lo, seg_hi = config.segment_length_range
    noise_scale = 1.0 / np.sqrt(d)

    rows = []
    set_id = 0
    segment_counter = 0
    plan = (
        [(0, config.sets_per_identity), (1, config.probe_sets_per_identity), (2, config.gallery_sets_per_identity)]
    )
    for ident in range(config.num_identities):
        c = centroids[ident]
        for split_code, count in plan:
            pose = config.probe_pose if split_code == 1 else "any"
            for _ in range(count):
                size = int(rng.integers(lo, hi + 1))
                n_video = int(rng.binomial(size, config.video_fraction)) if config.video_fraction > 0 else 0
                items = []  # (media, seg, frame, yaw, sigma, dup, clean, embedding)
                # still items, with near-duplicates of earlier non-duplicate stills
                for _ in range(size - n_video):
                    sources = [k for k, it in enumerate(items) if it[5] < 0]
                    if sources and config.redundancy_rate > 0 and rng.random() < config.redundancy_rate:
                        src = sources[int(rng.integers(len(sources)))]
                        yaw, sigma, base = items[src][3], 2.0 * items[src][4], items[src][6]
                        dup = src
                    else:
                        yaw = sample_yaw(rng, pose)
                        sigma = float(rng.uniform(s_lo, s_hi))
                        base = clean_vector(c, yaw, pose_dir, config.pose_offset_scale)
                        dup = -1
                    emb = base + sigma * noise_scale * rng.standard_normal(d)
                    items.append((0, 0, 0, yaw, sigma, dup, base, emb))
                # video segments: shared clean vector, random-walk drift, per-frame noise
                remaining = n_video
                while remaining > 0:
                    length = min(remaining, int(rng.integers(seg_lo, seg_hi + 1)))
                    remaining -= length
                    segment_counter += 1
                    yaw = sample_yaw(rng, pose)
                    base = clean_vector(c, yaw, pose_dir, config.pose_offset_scale)
                    seg_sigma = float(rng.uniform(s_lo, s_hi))
                    drift = np.zeros(d)
                    for frame in range(length):
                        if frame > 0:
                            drift = drift + (seg_sigma / 4.0) * noise_scale * rng.standard_normal(d)
                        sigma = float(rng.uniform(s_lo, s_hi))
                        emb = base + drift + sigma * noise_scale * rng.standard_normal(d)
                        items.append((1, segment_counter, frame, yaw, sigma, -1, base, emb))
                for it in items:
                    rows.append((set_id, ident, split_code, it[0], it[1], it[2], it[3], it[4], it[5], it[7]))
                set_id += 1

    arr = np.zeros(len(rows), dtype=_record_dtype(d))
    for i, r in enumerate(rows):
        arr[i] = r
    return FeatureSetCollection.from_structured(arr, d, pose_direction=pose_dir)


def record_size(embed_dim: int) -> int:
    return _record_dtype(embed_dim).itemsize


def write_features(collection: FeatureSetCollection, path) -> None:
    header = HEADER.pack(MAGIC, VERSION, collection.embed_dim, len(collection))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(collection.to_structured().tobytes())


def read_features(path) -> FeatureSetCollection:
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise FormatError("truncated header", len(data))
    magic, version, embed_dim, count = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if embed_dim < 1:
        raise FormatError("embed_dim must be positive", 6)
    rsize = record_size(embed_dim)
    body = len(data) - HEADER.size
    if body < count * rsize:
        full = body // rsize
        raise FormatError(f"truncated record {full} of {count}", HEADER.size + full * rsize)
    if body > count * rsize:
        raise FormatError("trailing bytes after last record", HEADER.size + count * rsize)
    arr = np.frombuffer(data, dtype=_record_dtype(embed_dim), count=count, offset=HEADER.size)
    if np.any(arr["split"] > 2) or np.any(arr["media"] > 1):
        bad = int(np.flatnonzero((arr["split"] > 2) | (arr["media"] > 1))[0])
        raise FormatError(f"record {bad}: invalid split/media code", HEADER.size + bad * rsize)
    return FeatureSetCollection.from_structured(arr, embed_dim)


def estimate_pose_direction(collection: FeatureSetCollection) -> np.ndarray:
    """Least-squares direction along which embeddings move with sin(yaw)."""
    if collection.pose_direction is not None:
        return collection.pose_direction
    s = np.sin(np.deg2rad(collection.yaw.astype(np.float64)))
    x = collection.embedding.astype(np.float64)
    # remove per-identity means so identity signal does not leak in
    ids = collection.identity
    means = np.zeros((collection.num_identities(), collection.embed_dim))
    np.add.at(means, ids, x)
    counts = np.bincount(ids, minlength=len(means))[:, None]
    x = x - means[ids] / np.maximum(counts[ids], 1)
    s = s - s.mean()
    v = s @ x
    n = np.linalg.norm(v)
    if n == 0:
        return np.zeros(collection.embed_dim)
    return v / n
