"""Corpus ingestion, windowing, and synthetic ground truth.

Utterances are [T, d] float feature matrices with optional per-frame gold
labels. Windows slide over each utterance with stride 1 and never cross
utterance boundaries. The synthetic generator draws (latent, x symbol,
y symbol) triples through a pair of row-stochastic channels and emits
one-hot frame blocks, together with the exact joint table over observed
symbol pairs so the true mutual information is known in closed form.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .numerics import stream_rng

__all__ = [
    "CorpusError",
    "Utterance",
    "WindowGeometry",
    "WindowPair",
    "SyntheticSpec",
    "read_features",
    "write_features",
    "load_corpus",
    "read_manifest_metadata",
    "write_corpus",
    "normalize_utterance",
    "windows_of",
    "synth_corpus",
    "true_mi_oracle",
    "latent_label",
]

FEATURE_MAGIC = b"ITCF"
FEATURE_VERSION = 1

# random-stream tag for synthesis (model/trainer use their own tags)
TAG_SYNTH = 404


class CorpusError(Exception):
    """Corpus file or invariant problem, carrying the utterance id when known."""

    def __init__(self, message: str, utterance_id: Optional[str] = None):
        if utterance_id is not None:
            message = f"utterance {utterance_id!r}: {message}"
        super().__init__(message)
        self.utterance_id = utterance_id


@dataclass
class Utterance:
    id: str
    frames: np.ndarray  # [T, d]
    gold_labels: Optional[list[str]] = None
    speaker: Optional[str] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise CorpusError(
                f"frames must be a [T, d] matrix with T >= 1, got shape {self.frames.shape}",
                self.id,
            )
        if self.gold_labels is not None and len(self.gold_labels) != self.frames.shape[0]:
            raise CorpusError(
                f"{len(self.gold_labels)} labels for {self.frames.shape[0]} frames",
                self.id,
            )


@dataclass(frozen=True)
class WindowGeometry:
    total: int = 35
    past: int = 15
    gap: int = 5
    future: int = 15

    def __post_init__(self):
        if self.past + self.gap + self.future != self.total:
            raise ValueError(
                f"past + gap + future must equal total "
                f"({self.past}+{self.gap}+{self.future} != {self.total})"
            )
        if self.past < 1 or self.future < 1 or self.gap < 0:
            raise ValueError("need past >= 1, future >= 1, gap >= 0")


@dataclass(frozen=True)
class WindowPair:
    x: np.ndarray  # [past, d], earlier frames
    y: np.ndarray  # [future, d], later frames
    utterance_id: str
    center_frame: int


@dataclass
class SyntheticSpec:
    """Ground-truth generator settings.

    Latent classes are drawn from ``latent_prior``; each class emits an
    observed x symbol and y symbol through its row of the respective
    channel matrix. ``gap`` zero frames separate the two one-hot blocks so
    one generated window spans exactly 2*frames_per_side + gap frames.
    """

    num_latent: int
    x_channel: np.ndarray  # [K, A], rows sum to 1
    y_channel: np.ndarray  # [K, A], rows sum to 1
    latent_prior: np.ndarray  # [K], sums to 1
    num_utterances: int
    windows_per_utterance: int
    seed: int
    frames_per_side: int = 15
    gap: int = 5
    jitter_sigma: float = 0.0

    def __post_init__(self):
        self.x_channel = np.asarray(self.x_channel, dtype=np.float64)
        self.y_channel = np.asarray(self.y_channel, dtype=np.float64)
        self.latent_prior = np.asarray(self.latent_prior, dtype=np.float64)
        k = self.num_latent
        if self.x_channel.shape[0] != k or self.y_channel.shape[0] != k:
            raise ValueError("channel matrices must have num_latent rows")
        if self.x_channel.shape != self.y_channel.shape:
            raise ValueError("x_channel and y_channel must share one alphabet size")
        if self.latent_prior.shape != (k,):
            raise ValueError("latent_prior must have num_latent entries")
        for name, mat in (("x_channel", self.x_channel), ("y_channel", self.y_channel)):
            if np.any(mat < 0) or np.max(np.abs(mat.sum(axis=1) - 1.0)) > 1e-12:
                raise ValueError(f"{name} rows must be probability vectors (1e-12)")
        if np.any(self.latent_prior < 0) or abs(self.latent_prior.sum() - 1.0) > 1e-12:
            raise ValueError("latent_prior must be a probability vector (1e-12)")
        if self.frames_per_side < 1 or self.gap < 0 or self.jitter_sigma < 0:
            raise ValueError("need frames_per_side >= 1, gap >= 0, jitter_sigma >= 0")

    @property
    def alphabet_size(self) -> int:
        return self.x_channel.shape[1]

    @property
    def window_total(self) -> int:
        return 2 * self.frames_per_side + self.gap

    def geometry(self) -> WindowGeometry:
        return WindowGeometry(
            total=self.window_total,
            past=self.frames_per_side,
            gap=self.gap,
            future=self.frames_per_side,
        )

    def to_json_dict(self) -> dict:
        return {
            "num_latent": self.num_latent,
            "x_channel": self.x_channel.tolist(),
            "y_channel": self.y_channel.tolist(),
            "latent_prior": self.latent_prior.tolist(),
            "num_utterances": self.num_utterances,
            "windows_per_utterance": self.windows_per_utterance,
            "seed": self.seed,
            "frames_per_side": self.frames_per_side,
            "gap": self.gap,
            "jitter_sigma": self.jitter_sigma,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SyntheticSpec":
        return cls(**doc)


def latent_label(s: int) -> str:
    return f"k{s}"


# ---------------------------------------------------------------------------
# feature file and manifest IO


def write_features(path: Path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    t, d = frames.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, t, d))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_features(path: Path, utterance_id: Optional[str] = None) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"feature file not found: {path}", utterance_id)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != FEATURE_MAGIC:
        raise CorpusError(f"not a feature file (bad magic): {path}", utterance_id)
    version, t, d = struct.unpack("<III", raw[4:16])
    if version != FEATURE_VERSION:
        raise CorpusError(f"unsupported feature file version {version}", utterance_id)
    payload = raw[16:]
    if len(payload) != t * d * 4:
        raise CorpusError(
            f"feature payload holds {len(payload)} bytes, header promises {t * d * 4}",
            utterance_id,
        )
    return np.frombuffer(payload, dtype="<f4").reshape(t, d).copy()


def write_corpus(
    corpus_dir: Path,
    utterances: list[Utterance],
    metadata: Optional[dict[str, str]] = None,
) -> Path:
    """Write features/labels plus a manifest.tsv; returns the manifest path.

    Metadata key=value pairs land as '#'-prefixed comment lines at the top
    of the manifest and round-trip through read_manifest_metadata.
    """
    corpus_dir = Path(corpus_dir)
    corpus_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in (metadata or {}).items():
        lines.append(f"# {key}={value}")
    for u in utterances:
        feat_rel = f"features/{u.id}.itcf"
        write_features(corpus_dir / feat_rel, u.frames)
        label_rel = ""
        if u.gold_labels is not None:
            label_rel = f"labels/{u.id}.txt"
            label_path = corpus_dir / label_rel
            label_path.parent.mkdir(parents=True, exist_ok=True)
            label_path.write_text("\n".join(u.gold_labels) + "\n", encoding="utf-8")
        lines.append("\t".join([u.id, feat_rel, label_rel, u.speaker or ""]))
    manifest = corpus_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest_metadata(manifest_path: Path) -> dict[str, str]:
    meta: dict[str, str] = {}
    for line in Path(manifest_path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                meta[key.strip()] = value.strip()
    return meta


def load_corpus(manifest_path: Path) -> list[Utterance]:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise CorpusError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    utterances = []
    for lineno, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise CorpusError(f"manifest line {lineno} needs at least id and feature path")
        uid = parts[0]
        frames = read_features(base / parts[1], uid)
        labels = None
        if len(parts) > 2 and parts[2]:
            label_path = base / parts[2]
            if not label_path.is_file():
                raise CorpusError(f"label file not found: {label_path}", uid)
            labels = label_path.read_text(encoding="utf-8").splitlines()
            if len(labels) != frames.shape[0]:
                raise CorpusError(
                    f"{len(labels)} labels for {frames.shape[0]} frames", uid
                )
        speaker = parts[3] if len(parts) > 3 and parts[3] else None
        utterances.append(Utterance(uid, frames, labels, speaker))
    return utterances


# ---------------------------------------------------------------------------
# normalization and windowing


def normalize_utterance(u: Utterance) -> Utterance:
    """Scale frames so the mean squared frame norm is 1.

    The divisor is sqrt(mean_t ||frame_t||^2), computed in float64. The
    output therefore satisfies mean_t ||frame_t||^2 = 1 within 1e-9, and
    renormalizing a normalized utterance is an identity up to rounding.
    """
    frames = np.asarray(u.frames, dtype=np.float64)
    mean_sq = float(np.mean(np.sum(frames * frames, axis=1)))
    if mean_sq == 0.0:
        raise CorpusError("all-zero utterance, normalization scale undefined", u.id)
    return replace(u, frames=frames / np.sqrt(mean_sq))


def windows_of(u: Utterance, g: WindowGeometry) -> list[WindowPair]:
    """All stride-1 window placements; empty when the utterance is too short.

    The window starting at frame t covers [t, t+total); x is its first
    `past` frames, y its last `future` frames, and center_frame is
    t + total//2.
    """
    frames = u.frames
    t_max = frames.shape[0] - g.total
    out = []
    for t in range(t_max + 1):
        out.append(
            WindowPair(
                x=frames[t : t + g.past],
                y=frames[t + g.past + g.gap : t + g.total],
                utterance_id=u.id,
                center_frame=t + g.total // 2,
            )
        )
    return out


def aligned_starts(num_frames: int, window_total: int) -> list[int]:
    """Start indices of back-to-back generated placements (0, total, 2*total...)."""
    return list(range(0, num_frames - window_total + 1, window_total))


# ---------------------------------------------------------------------------
# synthesis and the exact oracle


def synth_corpus(spec: SyntheticSpec) -> tuple[list[Utterance], np.ndarray]:
    """Generate utterances of back-to-back windows plus the exact joint table.

    Every window draws latent s ~ prior, x symbol ~ x_channel[s], y symbol
    ~ y_channel[s]; its frames are one-hot(x) repeated frames_per_side
    times, `gap` zero frames, then one-hot(y) repeated. Gaussian jitter of
    scale jitter_sigma lands on the one-hot frames only. Gold labels carry
    the latent class name on every frame of the window.

    joint_table[a, b] = sum_s prior[s] * x_channel[s, a] * y_channel[s, b].
    """
    rng = stream_rng(spec.seed, TAG_SYNTH)
    k = spec.num_latent
    a = spec.alphabet_size
    fps = spec.frames_per_side
    total = spec.window_total
    eye = np.eye(a, dtype=np.float64)

    utterances = []
    width = max(4, len(str(spec.num_utterances - 1)))
    for i in range(spec.num_utterances):
        frames = np.zeros((spec.windows_per_utterance * total, a), dtype=np.float64)
        labels: list[str] = []
        for w in range(spec.windows_per_utterance):
            s = int(rng.choice(k, p=spec.latent_prior))
            x_sym = int(rng.choice(a, p=spec.x_channel[s]))
            y_sym = int(rng.choice(a, p=spec.y_channel[s]))
            base = w * total
            frames[base : base + fps] = eye[x_sym]
            frames[base + fps + spec.gap : base + total] = eye[y_sym]
            if spec.jitter_sigma > 0:
                frames[base : base + fps] += rng.normal(0.0, spec.jitter_sigma, (fps, a))
                frames[base + fps + spec.gap : base + total] += rng.normal(
                    0.0, spec.jitter_sigma, (fps, a)
                )
            labels.extend([latent_label(s)] * total)
        utterances.append(Utterance(f"synth-{i:0{width}d}", frames, labels))

    joint_table = spec.x_channel.T @ (spec.latent_prior[:, None] * spec.y_channel)
    return utterances, joint_table


def true_mi_oracle(joint_table: np.ndarray) -> float:
    """Exact mutual information of a joint symbol table, in bits.

    I = sum_{a,b} p(a,b) * log2(p(a,b) / (p(a) p(b))), zero-probability
    cells contributing zero.
    """
    p = np.asarray(joint_table, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("joint table entries must be nonnegative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"joint table sums to {p.sum()!r}, not 1 (tolerance 1e-9)")
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    mask = p > 0
    ratio = np.ones_like(p)
    np.divide(p, px * py, out=ratio, where=mask)
    return float(np.sum(p[mask] * np.log2(ratio[mask])))
