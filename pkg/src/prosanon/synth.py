"""Synthetic corpora with planted structure.

Embeddings follow a linear-Gaussian model: a per-speaker centroid on the
speaker dims, a +/- shift on the attribute dims depending on the label, and
isotropic noise.  Prosody features are affine functions of designated dims,
so every downstream claim (MI ranking, classifier F1, disentanglement) has a
known answer.  Audio scripts build clips with known pitch, syllable count and
pauses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import PROSODY_FEATURES, EmbeddingTable, ProsodyTable, derive_rng
from .prosody import AudioClip

ATTRIBUTE_FEATURES = ("spr", "nsyll", "pnum", "plength")
SPEAKER_FEATURES = ("f0", "nrg")

# raw value = base + scale * (unit-norm projection + noise)
_PROSODY_AFFINE = {
    "spr": (3.0, 0.5),
    "nsyll": (30.0, 5.0),
    "pnum": (6.0, 1.5),
    "plength": (3.0, 0.8),
    "f0": (160.0, 30.0),
    "nrg": (-30.0, 5.0),
}


class SynthSpecError(ValueError):
    pass


@dataclass
class SynthSpec:
    n_speakers: int = 20
    rows_per_speaker: int = 20
    dim: int = 64
    speaker_dims: Optional[Sequence[int]] = None  # None: 8 dims drawn from the seed
    attribute_dims: Optional[Sequence[int]] = None  # None: 6 dims drawn from the seed
    n_speaker_dims: int = 8
    n_attribute_dims: int = 6
    speaker_scale: float = 1.0
    attribute_shift: float = 1.5
    noise: float = 0.5
    prosody_noise: float = 0.3
    attribute_per_speaker: bool = False
    split: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def resolved_dims(self) -> Tuple[List[int], List[int]]:
        rng = derive_rng(self.seed, 0)
        perm = rng.permutation(self.dim)
        spk = sorted(int(d) for d in self.speaker_dims) if self.speaker_dims is not None else None
        att = sorted(int(d) for d in self.attribute_dims) if self.attribute_dims is not None else None
        if spk is None:
            pool = [int(d) for d in perm if att is None or d not in att]
            spk = sorted(pool[: self.n_speaker_dims])
        if att is None:
            pool = [int(d) for d in perm if d not in spk]
            att = sorted(pool[: self.n_attribute_dims])
        return spk, att

    def validate(self) -> None:
        if self.n_speakers < 1 or self.rows_per_speaker < 1 or self.dim < 1:
            raise SynthSpecError("n_speakers, rows_per_speaker and dim must be positive")
        if self.noise <= 0:
            raise SynthSpecError("noise must be > 0")
        if self.speaker_scale < 0 or self.prosody_noise < 0:
            raise SynthSpecError("scales must be non-negative")
        spk, att = self.resolved_dims()
        wanted = (len(spk) if self.speaker_dims is not None else self.n_speaker_dims) + (
            len(att) if self.attribute_dims is not None else self.n_attribute_dims)
        if wanted > self.dim:
            raise SynthSpecError("speaker and attribute dims do not fit in dim")
        for d in spk + att:
            if not 0 <= d < self.dim:
                raise SynthSpecError(f"dim index {d} out of range")
        if set(spk) & set(att):
            raise SynthSpecError("speaker_dims and attribute_dims must be disjoint")
        if len(set(spk)) != len(spk) or len(set(att)) != len(att):
            raise SynthSpecError("duplicate dim index")
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise SynthSpecError("split must be three non-negative fractions summing to 1")


@dataclass
class SynthCorpus:
    table: EmbeddingTable
    prosody: ProsodyTable
    truth: dict
    splits: Dict[str, List[int]] = field(default_factory=dict)

    def split(self, name: str) -> Tuple[EmbeddingTable, ProsodyTable]:
        idx = self.splits[name]
        tab = self.table.take(idx)
        return tab, self.prosody.aligned_to(tab.sample_ids)


def gen_embeddings(spec: SynthSpec) -> SynthCorpus:
    spec.validate()
    spk_dims, att_dims = spec.resolved_dims()
    rng = derive_rng(spec.seed, 1)
    n_rows = spec.n_speakers * spec.rows_per_speaker

    centroids = np.zeros((spec.n_speakers, spec.dim))
    centroids[:, spk_dims] = rng.normal(0.0, spec.speaker_scale, size=(spec.n_speakers, len(spk_dims)))

    labels = np.empty(n_rows, dtype=np.int64)
    for s in range(spec.n_speakers):
        block = slice(s * spec.rows_per_speaker, (s + 1) * spec.rows_per_speaker)
        if spec.attribute_per_speaker:
            labels[block] = s % 2
        else:
            half = (np.arange(spec.rows_per_speaker) % 2)
            labels[block] = rng.permutation(half)
    speaker_of = np.repeat(np.arange(spec.n_speakers), spec.rows_per_speaker)

    vectors = centroids[speaker_of].copy()
    vectors[:, att_dims] += np.where(labels[:, None] == 1, 0.5, -0.5) * spec.attribute_shift
    vectors += rng.normal(0.0, spec.noise, size=vectors.shape)

    prosody_map = {}
    raw = np.zeros((n_rows, len(PROSODY_FEATURES)))
    for j, name in enumerate(PROSODY_FEATURES):
        dims = att_dims if name in ATTRIBUTE_FEATURES else spk_dims
        w = rng.normal(size=len(dims))
        w /= np.linalg.norm(w)
        base, scale = _PROSODY_AFFINE[name]
        # speaker prosody is a trait of the speaker: read it off the centroid
        source = centroids[speaker_of] if name in SPEAKER_FEATURES else vectors
        proj = source[:, dims] @ w + rng.normal(0.0, spec.prosody_noise, size=n_rows)
        raw[:, j] = base + scale * proj
        prosody_map[name] = {"dims": list(dims), "weights": [float(v) for v in w], "base": base, "scale": scale}
    for name in ("nsyll", "pnum"):
        j = PROSODY_FEATURES.index(name)
        raw[:, j] = np.round(raw[:, j])
    for name in ("spr", "nsyll", "pnum", "plength", "f0"):
        j = PROSODY_FEATURES.index(name)
        raw[:, j] = np.maximum(raw[:, j], 0.0)
    raw[raw[:, PROSODY_FEATURES.index("nsyll")] == 0, PROSODY_FEATURES.index("spr")] = 0.0

    sample_ids = [f"s{speaker_of[i]:03d}_r{i % spec.rows_per_speaker:03d}" for i in range(n_rows)]
    speaker_ids = [f"spk{s:03d}" for s in speaker_of]
    table = EmbeddingTable(sample_ids, speaker_ids, labels.tolist(), vectors)
    prosody = ProsodyTable(sample_ids, raw)

    splits = {"train": [], "val": [], "test": []}
    split_rng = derive_rng(spec.seed, 2)
    n_train = int(round(spec.split[0] * spec.rows_per_speaker))
    n_val = int(round(spec.split[1] * spec.rows_per_speaker))
    for s in range(spec.n_speakers):
        rows = s * spec.rows_per_speaker + split_rng.permutation(spec.rows_per_speaker)
        splits["train"].extend(int(i) for i in rows[:n_train])
        splits["val"].extend(int(i) for i in rows[n_train:n_train + n_val])
        splits["test"].extend(int(i) for i in rows[n_train + n_val:])
    for key in splits:
        splits[key].sort()

    truth = {
        "speaker_dims": spk_dims,
        "attribute_dims": att_dims,
        "centroids": [[float(v) for v in c[spk_dims]] for c in centroids],
        "prosody_map": prosody_map,
        "n_speakers": spec.n_speakers,
        "seed": spec.seed,
    }
    return SynthCorpus(table, prosody, truth, splits)


# --- audio -----------------------------------------------------------------


@dataclass(frozen=True)
class Tone:
    f0: float
    dur: float
    amp: float = 0.5


@dataclass(frozen=True)
class BurstTrain:
    """``k`` voiced syllables, each a sine under a raised-cosine envelope."""

    k: int
    dur: float
    f0: float = 150.0
    amp: float = 0.5


@dataclass(frozen=True)
class NoiseBursts:
    """``k`` unvoiced bursts: white noise under the same envelope as BurstTrain."""

    k: int
    dur: float
    amp: float = 0.3
    seed: int = 0


@dataclass(frozen=True)
class Silence:
    dur: float


def _segment(seg, sr: int, t0: float) -> np.ndarray:
    n = int(round(seg.dur * sr))
    t = t0 + np.arange(n) / sr
    if isinstance(seg, Silence):
        return np.zeros(n)
    if isinstance(seg, Tone):
        return seg.amp * np.sin(2 * np.pi * seg.f0 * t)
    if seg.k < 1:
        raise SynthSpecError("burst count must be >= 1")
    per = n / seg.k
    phase = (np.arange(n) % per) / per
    env = np.sin(np.pi * phase) ** 2
    if isinstance(seg, BurstTrain):
        return seg.amp * env * np.sin(2 * np.pi * seg.f0 * t)
    if isinstance(seg, NoiseBursts):
        noise = derive_rng(seg.seed, 0).uniform(-1.0, 1.0, size=n)
        return seg.amp * env * noise
    raise SynthSpecError(f"unknown segment {seg!r}")


def gen_audio(script: Sequence, sample_rate: int = 16000) -> Tuple[AudioClip, dict]:
    """Concatenate segments into a clip and describe what was built.

    The returned truth holds the expected syllable count (voiced bursts
    only), the silence spans and the f0 of every tonal segment.
    """
    if not script:
        raise SynthSpecError("empty audio script")
    total = sum(seg.dur for seg in script)
    if total > 30.0 + 1e-9:
        raise SynthSpecError(f"script lasts {total:.2f} s, limit is 30 s")
    parts, t = [], 0.0
    truth = {"nsyll": 0, "silences": [], "segments": []}
    for seg in script:
        parts.append(_segment(seg, sample_rate, t))
        if isinstance(seg, BurstTrain):
            truth["nsyll"] += seg.k
        if isinstance(seg, Silence):
            truth["silences"].append((t, t + seg.dur))
        truth["segments"].append({
            "kind": type(seg).__name__,
            "start": t,
            "end": t + seg.dur,
            "f0": getattr(seg, "f0", 0.0),
        })
        t += seg.dur
    return AudioClip(np.concatenate(parts), sample_rate), truth


SEGMENT_KINDS = {"tone": Tone, "burst_train": BurstTrain, "noise_bursts": NoiseBursts, "silence": Silence}


def script_from_dicts(items: Sequence[dict]) -> list:
    """Build segments from ``{"kind": "tone", "f0": 220, "dur": 2}`` style dicts."""
    out = []
    for item in items:
        item = dict(item)
        kind = item.pop("kind", None)
        if kind not in SEGMENT_KINDS:
            raise SynthSpecError(f"unknown segment kind {kind!r}")
        try:
            out.append(SEGMENT_KINDS[kind](**item))
        except TypeError as exc:
            raise SynthSpecError(f"bad {kind} segment: {exc}") from None
    return out
