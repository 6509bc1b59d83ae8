"""Adversarial speaker/prosody disentanglement over embedding tables.

A residual MLP ("trunk") maps each embedding to ``x + trunk(x)``.  One small
regressor head per prosody feature reads the transformed embedding.  The
objective is

    total = sum_i mse(attribute feature i) - sum_j lambda_j * mse(speaker feature j)

Every head minimizes its own MSE.  The gradient that speaker heads send back
into the trunk is negated and scaled by lambda_j (gradient reversal), so the
trunk keeps attribute prosody predictable and makes speaker prosody
unpredictable.  Forward and backward passes are written out by hand in numpy.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import EmbeddingTable, ProsodyTable, derive_rng, format_float


class ModelError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


@dataclass(frozen=True)
class AdvConfig:
    ad_features: Tuple[str, ...] = ("spr", "pnum", "plength", "nsyll")
    spk_features: Tuple[str, ...] = ("nrg",)
    lambdas: Tuple[float, ...] = (1.0,)  # one per speaker feature, or a single shared value
    batch_size: int = 8
    max_epochs: int = 15
    patience: int = 3
    clr_base: float = 1e-7
    clr_max: float = 1e-5
    clr_step_size: Optional[int] = None  # None: 4 x steps per epoch
    momentum: float = 0.9
    trunk_lr_scale: float = 1.0  # trunk step = lr * trunk_lr_scale
    grad_clip: Optional[float] = None  # global L2 norm cap per step
    trunk_hidden: int = 192
    head_hidden: int = 126
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ad_features", tuple(self.ad_features))
        object.__setattr__(self, "spk_features", tuple(self.spk_features))
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        overlap = set(self.ad_features) & set(self.spk_features)
        if overlap:
            raise ModelError(f"features {sorted(overlap)} are both attribute and speaker features")
        if len(self.lambdas) not in (1, len(self.spk_features)):
            raise ModelError("give one lambda per speaker feature or a single shared lambda")
        if any(v < 0 for v in self.lambdas):
            raise ModelError("lambda must be non-negative")
        if self.trunk_lr_scale <= 0 or (self.grad_clip is not None and self.grad_clip <= 0):
            raise ModelError("trunk_lr_scale and grad_clip must be positive")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ModelError("batch_size and patience must be >= 1, max_epochs >= 0")

    @classmethod
    def desk(cls, **overrides) -> "AdvConfig":
        """Settings that make the game move on small synthetic tables.

        The published rates (1e-7..1e-5) leave a residual map over a few
        hundred rows at the identity.  A faster trunk lets the reversed
        gradient act before the heads memorize the speakers, and clipping
        stops the trunk from winning by blowing up the embeddings.
        """
        return cls(**{**DESK_SCALE, **overrides})

    @property
    def features(self) -> Tuple[str, ...]:
        return self.ad_features + self.spk_features

    def lambda_for(self, feature: str) -> float:
        j = self.spk_features.index(feature)
        return self.lambdas[0] if len(self.lambdas) == 1 else self.lambdas[j]


DESK_SCALE = {"clr_base": 1e-4, "clr_max": 1e-2, "trunk_lr_scale": 30.0, "grad_clip": 3.0}


@dataclass
class Model:
    """Parameter arrays keyed by name.

    Trunk: ``trunk.W1`` (D, H), ``trunk.b1``, ``trunk.W2`` (H, D), ``trunk.b2``.
    Head for feature f: ``f.W1`` (D, 126), ``f.b1``, ``f.W2`` (126, 1), ``f.b2``.
    """

    dim: int
    params: Dict[str, np.ndarray]
    features: Tuple[str, ...]
    init: str = "fan-in uniform; trunk output layer zero"

    def copy(self) -> "Model":
        return Model(self.dim, {k: v.copy() for k, v in self.params.items()}, self.features, self.init)


def init_model(dim: int, cfg: AdvConfig) -> Model:
    rng = derive_rng(cfg.seed, 0x1A)

    def uniform(fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    p = {
        "trunk.W1": uniform(dim, (dim, cfg.trunk_hidden)),
        "trunk.b1": uniform(dim, (cfg.trunk_hidden,)),
        "trunk.W2": np.zeros((cfg.trunk_hidden, dim)),
        "trunk.b2": np.zeros(dim),
    }
    for f in cfg.features:
        p[f"{f}.W1"] = uniform(dim, (dim, cfg.head_hidden))
        p[f"{f}.b1"] = uniform(dim, (cfg.head_hidden,))
        p[f"{f}.W2"] = uniform(cfg.head_hidden, (cfg.head_hidden, 1))
        p[f"{f}.b2"] = uniform(cfg.head_hidden, (1,))
    return Model(dim, p, cfg.features)


def _check(arr: np.ndarray, layer: int, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"non-finite activation in layer {layer} ({name})")
    return arr


def trunk_forward(model: Model, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    p = model.params
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ModelError(f"expected (*, {model.dim}) input, got {x.shape}")
    hidden = _check(np.tanh(x @ p["trunk.W1"] + p["trunk.b1"]), 1, "trunk hidden")
    z = _check(x + hidden @ p["trunk.W2"] + p["trunk.b2"], 2, "trunk output")
    return z, hidden


def forward(model: Model, x: np.ndarray):
    """Return (transformed, {feature: prediction}, cache)."""
    # overflow surfaces as ModelError from _check, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward(model, np.asarray(x, dtype=np.float64))


def _forward(model: Model, x: np.ndarray):
    z, hidden = trunk_forward(model, x)
    p = model.params
    preds, head_cache = {}, {}
    for i, f in enumerate(model.features):
        pre = z @ p[f"{f}.W1"] + p[f"{f}.b1"]
        act = _check(np.maximum(pre, 0.0), 3 + 2 * i, f"{f} hidden")
        out = _check(act @ p[f"{f}.W2"] + p[f"{f}.b2"], 4 + 2 * i, f"{f} output")
        preds[f] = out[:, 0]
        head_cache[f] = (pre, act)
    return z, preds, {"x": x, "hidden": hidden, "z": z, "heads": head_cache}


@dataclass
class LossBreakdown:
    ad_terms: Dict[str, float]
    spk_terms: Dict[str, float]
    lambdas: Dict[str, float]
    total: float = field(init=False)

    def __post_init__(self):
        self.total = sum(self.ad_terms.values()) - sum(self.lambdas[f] * v for f, v in self.spk_terms.items())

    def to_json(self) -> dict:
        return {"ad": dict(self.ad_terms), "spk": dict(self.spk_terms), "total": self.total}


def loss_breakdown(preds: Dict[str, np.ndarray], targets: Dict[str, np.ndarray], cfg: AdvConfig) -> LossBreakdown:
    def mse(f):
        if f not in targets:
            raise ModelError(f"missing target for feature {f!r}")
        return float(np.mean((preds[f] - targets[f]) ** 2))

    return LossBreakdown(
        {f: mse(f) for f in cfg.ad_features},
        {f: mse(f) for f in cfg.spk_features},
        {f: cfg.lambda_for(f) for f in cfg.spk_features},
    )


def backward(model: Model, cache: dict, preds: Dict[str, np.ndarray], targets: Dict[str, np.ndarray],
             cfg: AdvConfig) -> Dict[str, np.ndarray]:
    """Gradients for every parameter.

    Heads get the gradient of their own MSE.  The trunk gets
    sum_i dMSE_i/dtrunk - sum_j lambda_j dMSE_j/dtrunk, i.e. the gradient of
    the total loss.
    """
    p = model.params
    z = cache["z"]
    n = z.shape[0]
    grads: Dict[str, np.ndarray] = {}
    dz = np.zeros_like(z)
    for f in model.features:
        if f not in targets:
            raise ModelError(f"missing target for feature {f!r}")
        pre, act = cache["heads"][f]
        dout = (2.0 / n) * (preds[f] - targets[f])[:, None]
        grads[f"{f}.W2"] = act.T @ dout
        grads[f"{f}.b2"] = dout.sum(axis=0)
        dpre = (dout @ p[f"{f}.W2"].T) * (pre > 0)
        grads[f"{f}.W1"] = z.T @ dpre
        grads[f"{f}.b1"] = dpre.sum(axis=0)
        dz_f = dpre @ p[f"{f}.W1"].T
        if f in cfg.spk_features:
            dz -= cfg.lambda_for(f) * dz_f
        else:
            dz += dz_f
    hidden = cache["hidden"]
    grads["trunk.W2"] = hidden.T @ dz
    grads["trunk.b2"] = dz.sum(axis=0)
    dpre = (dz @ p["trunk.W2"].T) * (1.0 - hidden**2)
    grads["trunk.W1"] = cache["x"].T @ dpre
    grads["trunk.b1"] = dpre.sum(axis=0)
    return grads


def clr(step: int, base: float, peak: float, step_size: int) -> float:
    """Triangular cyclical learning rate."""
    cycle = math.floor(1 + step / (2 * step_size))
    x = abs(step / step_size - 2 * cycle + 1)
    return base + (peak - base) * max(0.0, 1.0 - x)


class EarlyStopping:
    """Track the best validation loss; ``step`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad = 0

    def step(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best, self.best_epoch, self.bad = loss, epoch, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


def prosody_targets(prosody: ProsodyTable, table: EmbeddingTable, features: Sequence[str]) -> Dict[str, np.ndarray]:
    if prosody.norm is None:
        raise ModelError("prosody table must be normalized before training")
    aligned = prosody.aligned_to(table.sample_ids)
    return {f: aligned.column(f, normalized=True) for f in features}


def validation_loss(model: Model, x: np.ndarray, targets: Dict[str, np.ndarray], cfg: AdvConfig) -> LossBreakdown:
    _, preds, _ = forward(model, x)
    return loss_breakdown(preds, targets, cfg)


def train(train_table: EmbeddingTable, train_prosody: ProsodyTable,
          val_table: EmbeddingTable, val_prosody: ProsodyTable,
          cfg: AdvConfig = AdvConfig(),
          on_epoch: Optional[Callable[[int, Model], None]] = None) -> Tuple[Model, List[dict]]:
    """Mini-batch SGD with momentum under a triangular CLR, early-stopped on validation total loss.

    The returned model holds the parameters of the best validation epoch.
    The log has one entry per epoch (epoch 0 is the untrained model).
    ``on_epoch(epoch, model)`` is called after every epoch, for monitoring.
    """
    if train_table.n_rows == 0 or val_table.n_rows == 0:
        raise ModelError("training and validation splits must be non-empty")
    if train_table.dim != val_table.dim:
        raise ModelError("train and validation tables differ in dimension")
    x_tr, x_va = train_table.vectors, val_table.vectors
    y_tr = prosody_targets(train_prosody, train_table, cfg.features)
    y_va = prosody_targets(val_prosody, val_table, cfg.features)

    model = init_model(train_table.dim, cfg)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    steps_per_epoch = math.ceil(train_table.n_rows / cfg.batch_size)
    step_size = cfg.clr_step_size or 4 * steps_per_epoch

    stopper = EarlyStopping(cfg.patience)
    val0 = validation_loss(model, x_va, y_va, cfg)
    log = [{"epoch": 0, "lr": clr(0, cfg.clr_base, cfg.clr_max, step_size),
            "train": validation_loss(model, x_tr, y_tr, cfg).to_json(), "val": val0.to_json()}]
    stopper.step(0, val0.total)
    best = model.copy()

    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = derive_rng(cfg.seed, 0x2B, epoch).permutation(train_table.n_rows)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            targets = {f: v[idx] for f, v in y_tr.items()}
            try:
                _, preds, cache = forward(model, x_tr[idx])
            except ModelError:
                raise TrainingDiverged(epoch, b, math.nan) from None
            loss = loss_breakdown(preds, targets, cfg).total
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, b, loss)
            grads = backward(model, cache, preds, targets, cfg)
            if cfg.grad_clip is not None:
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > cfg.grad_clip:
                    grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
            lr = clr(step, cfg.clr_base, cfg.clr_max, step_size)
            for k, g in grads.items():
                step_lr = lr * cfg.trunk_lr_scale if k.startswith("trunk.") else lr
                velocity[k] = cfg.momentum * velocity[k] - step_lr * g
                model.params[k] += velocity[k]
            step += 1
        val = validation_loss(model, x_va, y_va, cfg)
        log.append({"epoch": epoch, "lr": lr, "train": validation_loss(model, x_tr, y_tr, cfg).to_json(),
                    "val": val.to_json()})
        if not math.isfinite(val.total):
            raise TrainingDiverged(epoch, steps_per_epoch - 1, val.total)
        if on_epoch is not None:
            on_epoch(epoch, model)
        stop = stopper.step(epoch, val.total)
        if stopper.best_epoch == epoch:
            best = model.copy()
        if stop:
            break
    for entry in log:
        entry["best"] = entry["epoch"] == stopper.best_epoch
    return best, log


def transform(model: Model, table: EmbeddingTable) -> EmbeddingTable:
    if table.dim != model.dim:
        raise ModelError(f"model expects dimension {model.dim}, table has {table.dim}")
    if table.n_rows == 0:
        return table
    z, _ = trunk_forward(model, table.vectors)
    return table.with_vectors(z)


# --- checkpoints ----------------------------------------------------------


def save_checkpoint(model: Model, cfg: AdvConfig, log: List[dict], path, tail: int = 5) -> None:
    payload = {
        "format": "prosanon-adv-1",
        "dim": model.dim,
        "features": list(model.features),
        "init": model.init,
        "layers": {
            k: {"shape": list(v.shape), "values": [format_float(x) for x in v.ravel()]}
            for k, v in sorted(model.params.items())
        },
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
        "log_tail": log[-tail:],
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Tuple[Model, AdvConfig]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: not JSON ({exc.msg})") from None
    if not isinstance(data, dict) or data.get("format") != "prosanon-adv-1":
        raise ModelError(f"{path}: not a model checkpoint")
    try:
        params = {
            k: np.array([float(x) for x in v["values"]], dtype=np.float64).reshape(v["shape"])
            for k, v in data["layers"].items()
        }
        cfg = AdvConfig(**data["config"])
        model = Model(int(data["dim"]), params, tuple(data["features"]), data.get("init", ""))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"{path}: malformed checkpoint ({exc})") from None
    return model, cfg
