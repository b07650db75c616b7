"""P(IK) probe: an MLP binary classifier over hidden-state vectors.

The probe estimates the chance a model can answer a query correctly
("I know") from one designated transformer layer's hidden state. It is
a small numpy MLP trained with mini-batch Adam updates on binary
cross-entropy, checkpointing the epoch with the best validation F1 and
stopping early after a patience window without improvement. Training is
single-threaded and bitwise reproducible for a fixed seed.

PikClassifier follows the sklearn estimator conventions (get_params /
set_params / fit / predict / predict_proba, fitted attributes with a
trailing underscore) so it composes with sklearn tooling; the package
itself does not depend on sklearn.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .validation import check_array, check_vector, check_X_y

ACTIVATIONS = ("relu",)
OUTPUTS = ("sigmoid",)


# ---------------------------------------------------------------------------
# serialized probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PikModel:
    """Frozen probe weights plus provenance, safe for concurrent inference."""

    layer_sizes: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "relu"
    output: str = "sigmoid"
    trained_on: str = ""
    source_model_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "weights",
                           tuple(np.asarray(w, dtype=np.float64) for w in self.weights))
        object.__setattr__(self, "biases",
                           tuple(np.asarray(b, dtype=np.float64) for b in self.biases))
        self.validate()

    def validate(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.output not in OUTPUTS:
            raise ValueError(f"unsupported output {self.output!r}")
        sizes = self.layer_sizes
        if len(sizes) < 2 or sizes[-1] != 1 or any(s <= 0 for s in sizes):
            raise ValueError(f"bad layer_sizes {sizes}: need (input, ..., 1) with positive dims")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("weights/biases count must be len(layer_sizes) - 1")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]):
                raise ValueError(f"weight {i} has shape {w.shape}, expected {(sizes[i], sizes[i + 1])}")
            if b.shape != (sizes[i + 1],):
                raise ValueError(f"bias {i} has shape {b.shape}, expected {(sizes[i + 1],)}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} contains non-finite values")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PikModel):
            return NotImplemented
        return (self.layer_sizes == other.layer_sizes
                and self.activation == other.activation
                and self.output == other.output
                and self.trained_on == other.trained_on
                and self.source_model_id == other.source_model_id
                and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
                and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases)))

    def to_json(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "activation": self.activation,
            "output": self.output,
            "trained_on": self.trained_on,
            "source_model_id": self.source_model_id,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PikModel":
        try:
            return cls(
                layer_sizes=tuple(obj["layer_sizes"]),
                weights=tuple(np.asarray(w, dtype=np.float64) for w in obj["weights"]),
                biases=tuple(np.asarray(b, dtype=np.float64) for b in obj["biases"]),
                activation=obj.get("activation", "relu"),
                output=obj.get("output", "sigmoid"),
                trained_on=obj.get("trained_on", ""),
                source_model_id=obj.get("source_model_id", ""),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed probe document: {exc}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PikModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def pik_infer(model: PikModel, hidden_state) -> float:
    """Forward pass: affine -> relu per hidden layer, affine -> sigmoid."""
    x = check_vector(hidden_state, dim=model.input_dim, name="hidden_state")
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return float(_sigmoid(h)[0])


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------

class PikClassifier:
    """Sklearn-style MLP binary classifier over hidden states.

    Parameters mirror the trainer defaults: one hidden layer of width
    256, 50 epochs, batch 64, learning rate 1e-3, early-stop patience 5.
    ``fit(X, y)`` carves ``val_fraction`` off for validation unless an
    explicit validation split is passed.
    """

    _param_names = ("hidden_width", "epochs", "batch_size", "learning_rate",
                    "early_stop_patience", "val_fraction", "seed")

    def __init__(self, hidden_width: int = 256, epochs: int = 50, batch_size: int = 64,
                 learning_rate: float = 1e-3, early_stop_patience: int = 5,
                 val_fraction: float = 0.1, seed: int = 0):
        self.hidden_width = hidden_width
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.early_stop_patience = early_stop_patience
        self.val_fraction = val_fraction
        self.seed = seed

    # -- sklearn plumbing ---------------------------------------------------

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names}

    def set_params(self, **params) -> "PikClassifier":
        for key, value in params.items():
            if key not in self._param_names:
                raise ValueError(f"unknown parameter {key!r} for PikClassifier")
            setattr(self, key, value)
        return self

    # -- training -----------------------------------------------------------

    def fit(self, X, y, X_val=None, y_val=None) -> "PikClassifier":
        if self.hidden_width <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("hidden_width, epochs, and batch_size must be positive")
        if self.learning_rate <= 0 or self.early_stop_patience <= 0:
            raise ValueError("learning_rate and early_stop_patience must be positive")
        X, y = check_X_y(X, y)
        rng = np.random.default_rng(self.seed)
        if X_val is None:
            if not 0.0 < self.val_fraction < 1.0:
                raise ValueError("val_fraction must be in (0, 1) when no validation split is given")
            order = rng.permutation(len(X))
            n_val = max(1, int(self.val_fraction * len(X)))
            val_idx, train_idx = order[:n_val], order[n_val:]
            X_val, y_val = X[val_idx], y[val_idx]
            X, y = X[train_idx], y[train_idx]
        else:
            X_val, y_val = check_X_y(X_val, y_val)
            if X_val.shape[1] != X.shape[1]:
                raise ValueError("validation features have a different width")
        if len(X) == 0:
            raise ValueError("empty training split")
        classes = set(np.unique(y).tolist())
        if len(classes) < 2:
            raise ValueError("training split contains a single class; both labels are required")

        dim, width = X.shape[1], self.hidden_width
        params = [
            rng.standard_normal((dim, width)) * np.sqrt(2.0 / dim),
            np.zeros(width),
            rng.standard_normal((width, 1)) * np.sqrt(1.0 / width),
            np.zeros(1),
        ]
        moment1 = [np.zeros_like(p) for p in params]
        moment2 = [np.zeros_like(p) for p in params]
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        step = 0

        best_f1 = -1.0
        best_params = [p.copy() for p in params]
        best_epoch = 0
        stale = 0
        epochs_run = 0
        for epoch in range(self.epochs):
            epochs_run = epoch + 1
            order = rng.permutation(len(X))
            for start in range(0, len(X), self.batch_size):
                sel = order[start:start + self.batch_size]
                xb, yb = X[sel], y[sel]
                hidden = np.maximum(xb @ params[0] + params[1], 0.0)
                prob = _sigmoid(hidden @ params[2] + params[3])
                # dL/dz for mean binary cross-entropy collapses to (p - y)/n
                grad_z = (prob.ravel() - yb)[:, None] / len(sel)
                grad_hidden = grad_z @ params[2].T
                grad_hidden[hidden <= 0.0] = 0.0
                grads = [xb.T @ grad_hidden, grad_hidden.sum(axis=0),
                         hidden.T @ grad_z, grad_z.sum(axis=0)]
                step += 1
                for i, grad in enumerate(grads):
                    moment1[i] = beta1 * moment1[i] + (1.0 - beta1) * grad
                    moment2[i] = beta2 * moment2[i] + (1.0 - beta2) * grad * grad
                    m_hat = moment1[i] / (1.0 - beta1 ** step)
                    v_hat = moment2[i] / (1.0 - beta2 ** step)
                    params[i] = params[i] - self.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
            val_scores = _forward(X_val, params)
            val_f1 = _binary_f1(val_scores >= 0.5, y_val >= 0.5)
            if val_f1 > best_f1:
                best_f1 = val_f1
                best_epoch = epoch + 1
                best_params = [p.copy() for p in params]
                stale = 0
            else:
                stale += 1
                if stale >= self.early_stop_patience:
                    break

        self.n_features_in_ = dim
        self.layer_sizes_ = (dim, width, 1)
        self.weights_ = (best_params[0], best_params[2])
        self.biases_ = (best_params[1], best_params[3])
        self.best_epoch_ = best_epoch
        self.best_val_f1_ = best_f1
        self.n_epochs_run_ = epochs_run
        return self

    # -- inference ----------------------------------------------------------

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        pos = _forward(X, [self.weights_[0], self.biases_[0], self.weights_[1], self.biases_[1]])
        return np.column_stack([1.0 - pos, pos])

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X)[:, 1] >= 0.5

    def score(self, X, y) -> float:
        _, y = check_X_y(X, y)
        return float(np.mean(self.predict(X) == (y >= 0.5)))

    # -- conversion ---------------------------------------------------------

    def to_pik_model(self, trained_on: str = "", source_model_id: str = "") -> PikModel:
        self._check_fitted()
        return PikModel(layer_sizes=self.layer_sizes_, weights=self.weights_,
                        biases=self.biases_, trained_on=trained_on,
                        source_model_id=source_model_id)

    @classmethod
    def from_pik_model(cls, model: PikModel) -> "PikClassifier":
        clf = cls(hidden_width=model.layer_sizes[1] if len(model.layer_sizes) > 2 else 1)
        clf.n_features_in_ = model.input_dim
        clf.layer_sizes_ = model.layer_sizes
        clf.weights_ = model.weights
        clf.biases_ = model.biases
        clf.best_epoch_ = 0
        clf.best_val_f1_ = float("nan")
        clf.n_epochs_run_ = 0
        return clf

    def _check_fitted(self) -> None:
        if not hasattr(self, "weights_"):
            raise ValueError("PikClassifier is not fitted yet; call fit first")


# ---------------------------------------------------------------------------
# functional training surface
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PikTrainConfig:
    """Trainer knobs; defaults match the probe's standard recipe."""

    seed: int = 0
    hidden_width: int = 256
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    early_stop_patience: int = 5
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1

    def validate(self) -> None:
        if abs(self.train_frac + self.val_frac + self.test_frac - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1.0")
        if min(self.train_frac, self.val_frac, self.test_frac) < 0 or self.train_frac == 0:
            raise ValueError("split fractions must be non-negative with a non-empty train split")
        if min(self.hidden_width, self.epochs, self.batch_size, self.early_stop_patience) <= 0:
            raise ValueError("hidden_width, epochs, batch_size, patience must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class PikEvalReport:
    """Held-out metrics of a trained probe."""

    accuracy: float
    f1: float
    auroc: float

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "f1": self.f1, "auroc": self.auroc}


def split_indices(n: int, config: PikTrainConfig) -> tuple[slice, slice, slice]:
    """Deterministic split boundaries: floor(train), floor(val), remainder."""
    n_train = int(config.train_frac * n)
    n_val = int(config.val_frac * n)
    return slice(0, n_train), slice(n_train, n_train + n_val), slice(n_train + n_val, n)


def pik_train(samples: Sequence[tuple[Sequence[float], bool]],
              config: PikTrainConfig | None = None,
              *, trained_on: str = "", source_model_id: str = "") -> tuple[PikModel, PikEvalReport]:
    """Train a probe on (hidden_state, label) pairs and report test metrics.

    Shuffles once with the config seed, splits train/val/test by the
    config fractions, trains with checkpoint-on-best-validation-F1, and
    evaluates accuracy/F1/AUROC on the held-out test split. Deterministic
    given the seed.
    """
    config = config or PikTrainConfig()
    config.validate()
    if len(samples) < 10:
        raise ValueError(f"need at least 10 samples, got {len(samples)}")
    lengths = {len(vec) for vec, _ in samples}
    if len(lengths) != 1:
        raise ValueError(f"hidden states have mixed lengths {sorted(lengths)}")
    X = check_array([list(vec) for vec, _ in samples], name="hidden states")
    y = np.asarray([bool(label) for _, label in samples], dtype=np.float64)

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(X))
    X, y = X[order], y[order]
    tr, va, te = split_indices(len(X), config)
    if len(set(np.unique(y[tr]).tolist())) < 2:
        raise ValueError("training split contains a single class; both labels are required")

    clf = PikClassifier(hidden_width=config.hidden_width, epochs=config.epochs,
                        batch_size=config.batch_size, learning_rate=config.learning_rate,
                        early_stop_patience=config.early_stop_patience, seed=config.seed)
    clf.fit(X[tr], y[tr], X_val=X[va], y_val=y[va])
    scores = clf.predict_proba(X[te])[:, 1]
    report = pik_metrics(scores.tolist(), [bool(v) for v in y[te]], threshold=0.5)
    return clf.to_pik_model(trained_on=trained_on, source_model_id=source_model_id), report


def pik_metrics(scores: Sequence[float], labels: Sequence[bool], threshold: float = 0.5) -> PikEvalReport:
    """Accuracy and F1 at a threshold (positive = "model knows"), plus AUROC."""
    if len(scores) != len(labels):
        raise ValueError(f"{len(scores)} scores vs {len(labels)} labels")
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray([bool(v) for v in labels])
    pred = s >= threshold
    accuracy = float(np.mean(pred == y))
    f1 = _binary_f1(pred, y)
    return PikEvalReport(accuracy=accuracy, f1=f1, auroc=auroc(scores, labels))


def auroc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Rank-statistic AUROC; tied pairs contribute 0.5 each."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray([bool(v) for v in labels])
    if len(s) != len(y):
        raise ValueError(f"{len(s)} scores vs {len(y)} labels")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative label")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    starts = np.concatenate(([0], np.cumsum(counts)))[:-1]
    avg_rank = starts + (counts + 1) / 2.0
    ranks = avg_rank[inverse]
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# internals
# ---------------------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    expz = np.exp(z[~pos])
    out[~pos] = expz / (1.0 + expz)
    return out


def _forward(X: np.ndarray, params: list) -> np.ndarray:
    hidden = np.maximum(X @ params[0] + params[1], 0.0)
    return _sigmoid(hidden @ params[2] + params[3]).ravel()


def _binary_f1(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0
    return 2 * tp / denom
