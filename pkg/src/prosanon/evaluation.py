"""Privacy and utility metrics for (anonymized) embedding tables.

Utility is the macro F1 of a small attribute classifier; privacy is the
macro F1 of a speaker classifier (the adversary) and the cosine-scored
speaker-verification EER.  Both F1 scores come with percentile-bootstrap 95%
intervals.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .core import EmbeddingTable, derive_rng


class EvalError(ValueError):
    pass


# --- classifiers -----------------------------------------------------------


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: int
    epochs: int = 300
    lr: float = 0.01
    weight_decay: float = 0.1
    seed: int = 0


ATTRIBUTE_CLASSIFIER = ClassifierConfig(hidden=8)
SPEAKER_CLASSIFIER = ClassifierConfig(hidden=96)


class MLPClassifier:
    """Two-layer ReLU network trained full-batch with Adam.

    With two classes the output is a single sigmoid unit trained with binary
    cross-entropy; otherwise a softmax trained with cross-entropy.  Inputs are
    centred with training means and divided by one global training std.
    """

    def __init__(self, cfg: ClassifierConfig):
        self.cfg = cfg
        self.classes_: Optional[np.ndarray] = None
        self.params: Dict[str, np.ndarray] = {}

    @property
    def binary(self) -> bool:
        return self.classes_ is not None and len(self.classes_) == 2

    def _logits(self, x):
        p = self.params
        pre = x @ p["W1"] + p["b1"]
        act = np.maximum(pre, 0.0)
        return act @ p["W2"] + p["b2"], pre, act

    def fit(self, x: np.ndarray, y: Sequence) -> "MLPClassifier":
        x = np.asarray(x, dtype=np.float64)
        self.classes_, codes = np.unique(np.asarray(y), return_inverse=True)
        if len(self.classes_) < 2:
            raise EvalError("training labels contain a single class")
        self.mean_ = x.mean(axis=0)
        # one global scale: per-feature scaling would inflate pure-noise dims
        std = float(np.sqrt(np.mean((x - self.mean_) ** 2)))
        self.std_ = std if std > 0 else 1.0
        xs = (x - self.mean_) / self.std_
        n, d = xs.shape
        out = 1 if self.binary else len(self.classes_)
        rng = derive_rng(self.cfg.seed, 0xC1)
        h = self.cfg.hidden
        self.params = {
            "W1": rng.uniform(-1, 1, (d, h)) / math.sqrt(d),
            "b1": np.zeros(h),
            "W2": rng.uniform(-1, 1, (h, out)) / math.sqrt(h),
            "b2": np.zeros(out),
        }
        if self.binary:
            target = codes[:, None].astype(np.float64)
        else:
            target = np.eye(out)[codes]
        m = {k: np.zeros_like(v) for k, v in self.params.items()}
        v2 = {k: np.zeros_like(v) for k, v in self.params.items()}
        b1, b2, eps = 0.9, 0.999, 1e-8
        for t in range(1, self.cfg.epochs + 1):
            logits, pre, act = self._logits(xs)
            if self.binary:
                prob = 1.0 / (1.0 + np.exp(-logits))
            else:
                e = np.exp(logits - logits.max(axis=1, keepdims=True))
                prob = e / e.sum(axis=1, keepdims=True)
            dlog = (prob - target) / n
            g = {"W2": act.T @ dlog, "b2": dlog.sum(axis=0)}
            dpre = (dlog @ self.params["W2"].T) * (pre > 0)
            g["W1"] = xs.T @ dpre
            g["b1"] = dpre.sum(axis=0)
            for k in ("W1", "W2"):
                g[k] = g[k] + self.cfg.weight_decay * self.params[k]
            for k in self.params:
                m[k] = b1 * m[k] + (1 - b1) * g[k]
                v2[k] = b2 * v2[k] + (1 - b2) * g[k] ** 2
                mhat = m[k] / (1 - b1**t)
                vhat = v2[k] / (1 - b2**t)
                self.params[k] -= self.cfg.lr * mhat / (np.sqrt(vhat) + eps)
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        xs = (np.asarray(x, dtype=np.float64) - self.mean_) / self.std_
        logits, _, _ = self._logits(xs)
        if self.binary:
            return self.classes_[(logits[:, 0] >= 0).astype(int)]  # sigmoid >= 0.5
        return self.classes_[np.argmax(logits, axis=1)]


def train_attribute_classifier(table: EmbeddingTable, cfg: ClassifierConfig = ATTRIBUTE_CLASSIFIER) -> MLPClassifier:
    y = table.attribute_array()
    return MLPClassifier(cfg).fit(table.vectors, y)


def train_speaker_classifier(table: EmbeddingTable, cfg: ClassifierConfig = SPEAKER_CLASSIFIER) -> MLPClassifier:
    if len(set(table.speaker_ids)) < 2:
        raise EvalError("speaker classifier needs at least two speakers")
    return MLPClassifier(cfg).fit(table.vectors, np.asarray(table.speaker_ids))


# --- metrics ----------------------------------------------------------------


def macro_f1(predictions: Sequence, labels: Sequence) -> float:
    """Unweighted mean of per-class F1 over classes seen in labels or predictions."""
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    if len(pred) != len(true):
        raise EvalError("predictions and labels differ in length")
    if len(true) == 0:
        raise EvalError("empty input")
    scores = []
    for c in np.unique(np.concatenate([true, pred])):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def bootstrap_ci(score_fn: Callable[[np.ndarray], float], n: int, resamples: int = 1000,
                 seed: int = 0) -> Tuple[float, float, float]:
    """Percentile bootstrap over ``n`` test rows.

    ``score_fn`` takes an index array into the test set.  Resample ``i``
    draws from ``(seed, i)``.  The interval is widened to include the point
    estimate when the percentiles miss it.
    """
    if n < 1:
        raise EvalError("empty test set")
    point = float(score_fn(np.arange(n)))
    stats = np.empty(resamples)
    for i in range(resamples):
        idx = derive_rng(seed, 0xB0, i).integers(0, n, size=n)
        stats[i] = score_fn(idx)
    lo, hi = np.percentile(stats, [2.5, 97.5])
    return point, float(min(lo, point)), float(max(hi, point))


# --- verification -----------------------------------------------------------


@dataclass(frozen=True)
class TrialSet:
    pairs: Tuple[Tuple[int, int, bool], ...]
    rule: str

    @property
    def n_target(self) -> int:
        return sum(1 for p in self.pairs if p[2])

    @property
    def n_nontarget(self) -> int:
        return len(self.pairs) - self.n_target


def build_trials(table: EmbeddingTable, max_pairs: int = 5000, seed: int = 0) -> TrialSet:
    """All same-speaker pairs (capped) plus as many distinct different-speaker pairs."""
    speakers = np.asarray(table.speaker_ids)
    if len(set(table.speaker_ids)) < 2:
        raise EvalError("trials need at least two speakers")
    targets = []
    for spk in dict.fromkeys(table.speaker_ids):
        rows = np.flatnonzero(speakers == spk)
        targets.extend((int(a), int(b)) for i, a in enumerate(rows) for b in rows[i + 1:])
    if not targets:
        raise EvalError("no speaker has two rows: no target trials")
    rng = derive_rng(seed, 0x7A)
    if len(targets) > max_pairs:
        keep = np.sort(rng.choice(len(targets), size=max_pairs, replace=False))
        targets = [targets[i] for i in keep]

    n = table.n_rows
    available = (n * (n - 1) // 2) - sum(c * (c - 1) // 2 for c in np.unique(speakers, return_counts=True)[1])
    want = min(len(targets), available)
    chosen, seen = [], set()
    while len(chosen) < want:
        a, b = (int(v) for v in rng.integers(0, n, size=2))
        if a == b or speakers[a] == speakers[b]:
            continue
        key = (min(a, b), max(a, b))
        if key in seen:
            continue
        seen.add(key)
        chosen.append(key)
    pairs = tuple((a, b, True) for a, b in targets) + tuple((a, b, False) for a, b in chosen)
    rule = f"all target pairs (cap {max_pairs}), equal count of uniformly sampled nontarget pairs, seed {seed}"
    return TrialSet(pairs, rule)


def cosine_scores(trials: TrialSet, embeddings: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    emb = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1)
    norms = np.where(norms > 0, norms, 1.0)
    unit = emb / norms[:, None]
    a = np.array([p[0] for p in trials.pairs], dtype=np.int64)
    b = np.array([p[1] for p in trials.pairs], dtype=np.int64)
    lab = np.array([p[2] for p in trials.pairs], dtype=bool)
    s = np.einsum("ij,ij->i", unit[a], unit[b])
    return s[lab], s[~lab]


def eer_from_scores(target_scores, nontarget_scores) -> float:
    """Equal error rate in percent.

    Thresholds sweep the sorted unique scores plus +inf; a trial is accepted
    when its score is >= the threshold.  Where FRR - FAR changes sign the two
    neighbouring operating points are joined by a straight line and the EER
    is read off at FAR = FRR.
    """
    tar = np.asarray(target_scores, dtype=np.float64)
    non = np.asarray(nontarget_scores, dtype=np.float64)
    if tar.size == 0 or non.size == 0:
        raise EvalError("need at least one target and one nontarget score")
    thresholds = np.concatenate([np.unique(np.concatenate([tar, non])), [np.inf]])
    tar_sorted, non_sorted = np.sort(tar), np.sort(non)
    frr = np.searchsorted(tar_sorted, thresholds, side="left") / tar.size
    far = 1.0 - np.searchsorted(non_sorted, thresholds, side="left") / non.size
    diff = frr - far
    i = int(np.argmax(diff >= 0))  # diff[-1] = 1 so a crossing exists
    if diff[i] == 0 or i == 0:
        return 100.0 * float(far[i])
    d0, d1 = diff[i - 1], diff[i]
    alpha = -d0 / (d1 - d0)
    return 100.0 * float(far[i - 1] + alpha * (far[i] - far[i - 1]))


def eer(trials: TrialSet, embeddings: np.ndarray) -> float:
    tar, non = cosine_scores(trials, embeddings)
    return eer_from_scores(tar, non)


# --- reports ----------------------------------------------------------------


@dataclass
class EvalReport:
    system: str
    dataset: str
    ad_f1: float
    ad_ci: Tuple[float, float]
    spk_f1: float
    spk_ci: Tuple[float, float]
    eer_percent: float
    n_test: int = 0
    excluded_speakers: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["ad_ci"] = list(self.ad_ci)
        d["spk_ci"] = list(self.spk_ci)
        return d

    @classmethod
    def from_json(cls, data: dict) -> "EvalReport":
        data = dict(data)
        data["ad_ci"] = tuple(data["ad_ci"])
        data["spk_ci"] = tuple(data["spk_ci"])
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class EvalConfig:
    resamples: int = 1000
    max_pairs: int = 5000
    seed: int = 0
    attribute: ClassifierConfig = ATTRIBUTE_CLASSIFIER
    speaker: ClassifierConfig = SPEAKER_CLASSIFIER


def evaluate(train: EmbeddingTable, test: EmbeddingTable, system: str = "system", dataset: str = "dataset",
             cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Train both classifiers on ``train`` and score them, plus EER, on ``test``."""
    if train.dim != test.dim:
        raise EvalError(f"dimension mismatch: train has {train.dim}, test has {test.dim}")
    if test.n_rows == 0:
        raise EvalError("empty test table")

    att = train_attribute_classifier(train, _seeded(cfg.attribute, cfg.seed))
    y_att = test.attribute_array()
    p_att = att.predict(test.vectors)
    ad = bootstrap_ci(lambda idx: macro_f1(p_att[idx], y_att[idx]), test.n_rows, cfg.resamples, cfg.seed)

    spk = train_speaker_classifier(train, _seeded(cfg.speaker, cfg.seed))
    known = np.isin(np.asarray(test.speaker_ids), spk.classes_)
    excluded = len(set(np.asarray(test.speaker_ids)[~known]))
    y_spk = np.asarray(test.speaker_ids)[known]
    p_spk = spk.predict(test.vectors[known]) if known.any() else np.array([])
    if known.any():
        sp = bootstrap_ci(lambda idx: macro_f1(p_spk[idx], y_spk[idx]), int(known.sum()), cfg.resamples,
                          cfg.seed + 1)
    else:
        sp = (0.0, 0.0, 0.0)

    trials = build_trials(test, cfg.max_pairs, cfg.seed)
    return EvalReport(
        system=system,
        dataset=dataset,
        ad_f1=ad[0],
        ad_ci=(ad[1], ad[2]),
        spk_f1=sp[0],
        spk_ci=(sp[1], sp[2]),
        eer_percent=eer(trials, test.vectors),
        n_test=test.n_rows,
        excluded_speakers=excluded,
    )


def _seeded(cfg: ClassifierConfig, seed: int) -> ClassifierConfig:
    return ClassifierConfig(cfg.hidden, cfg.epochs, cfg.lr, cfg.weight_decay, seed)


def format_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text comparison table: one block per dataset, AD up, SPK down, EER up."""
    if not reports:
        raise EvalError("no reports to format")
    datasets = list(dict.fromkeys(r.dataset for r in reports))
    width = max(len("System"), *(len(r.system) for r in reports))
    lines = []
    for ds in datasets:
        lines.append(f"[{ds}]")
        lines.append(f"{'System':<{width}}  {'AD ↑':>13}  {'SPK ↓':>13}  {'EER (%) ↑':>9}")
        for r in reports:
            if r.dataset != ds:
                continue
            ad = f"{r.ad_f1:.2f} ± {(r.ad_ci[1] - r.ad_ci[0]) / 2:.2f}"
            sp = f"{r.spk_f1:.2f} ± {(r.spk_ci[1] - r.spk_ci[0]) / 2:.2f}"
            lines.append(f"{r.system:<{width}}  {ad:>13}  {sp:>13}  {r.eer_percent:>9.1f}")
        lines.append("")
    return "\n".join(lines)
