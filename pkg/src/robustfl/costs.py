"""Cost functions for the supported model families.

Every family exposes the same three operations: ``local_cost`` (mean cost of
one user's data), ``gradient`` (or a subgradient for the hinge), and
``hessian_block`` (second derivative matrix, smooth families only).
``global_cost`` averages local costs over a list of user datasets.

All costs are averaged over samples, not summed, so regularization scales do
not depend on dataset size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LINEAR_REGRESSION = "linear-regression"
LOGISTIC_BINARY = "logistic-binary"
LOGISTIC_MULTICLASS = "logistic-multiclass"
HINGE_SVM = "hinge-svm"

FAMILIES = frozenset(
    {LINEAR_REGRESSION, LOGISTIC_BINARY, LOGISTIC_MULTICLASS, HINGE_SVM}
)
SMOOTH_FAMILIES = frozenset({LINEAR_REGRESSION, LOGISTIC_BINARY, LOGISTIC_MULTICLASS})


class ShapeError(ValueError):
    """Raised when weight/data dimensions are incompatible."""


class UnsupportedModelError(ValueError):
    """Raised when an operation is undefined for the model family."""


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix (samples x features) plus a label vector.

    Labels are real for regression, {-1, +1} for binary classification and
    integers in {0..C-1} for multiclass. Instances are treated as immutable
    after construction and are safe to share across workers.
    """

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels)
        if features.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {features.shape}")
        if labels.ndim != 1:
            raise ShapeError(f"labels must be 1-D, got shape {labels.shape}")
        if features.shape[0] != labels.shape[0]:
            raise ShapeError(
                f"{features.shape[0]} feature rows vs {labels.shape[0]} labels"
            )
        if features.shape[0] < 1 or features.shape[1] < 1:
            raise ShapeError("need at least one sample and one feature")
        if not np.all(np.isfinite(features)):
            raise ValueError("features contain non-finite entries")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]


def pool(datasets: list[LabeledDataset] | tuple[LabeledDataset, ...]) -> LabeledDataset:
    """Concatenate user datasets into one pooled dataset."""
    if not datasets:
        raise ValueError("cannot pool an empty list of datasets")
    dims = {d.num_features for d in datasets}
    if len(dims) != 1:
        raise ShapeError(f"datasets disagree on feature dimension: {sorted(dims)}")
    return LabeledDataset(
        features=np.concatenate([d.features for d in datasets], axis=0),
        labels=np.concatenate([d.labels for d in datasets], axis=0),
    )


@dataclass(frozen=True)
class CostModel:
    """A cost family plus its parameter dimensions.

    ``num_features`` is the feature dimension K. ``num_classes`` is only
    meaningful for the multiclass family, where the weight vector is a K x C
    matrix flattened row-major; all other families use ``num_classes = 1``.
    """

    family: str
    num_features: int
    num_classes: int = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise UnsupportedModelError(f"unknown cost family {self.family!r}")
        if self.num_features < 1:
            raise ValueError("num_features must be >= 1")
        if self.family == LOGISTIC_MULTICLASS:
            if self.num_classes < 2:
                raise ValueError("multiclass model needs num_classes >= 2")
        elif self.num_classes != 1:
            raise ValueError(f"{self.family} does not take num_classes")

    @property
    def param_dim(self) -> int:
        return self.num_features * self.num_classes

    @property
    def smooth(self) -> bool:
        return self.family in SMOOTH_FAMILIES


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Stable in both tails.
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_weights(model: CostModel, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (model.param_dim,):
        raise ShapeError(f"weights have shape {w.shape}, expected ({model.param_dim},)")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights contain non-finite entries")
    return w


def _check_data(model: CostModel, data: LabeledDataset) -> None:
    if data.num_features != model.num_features:
        raise ShapeError(
            f"data has {data.num_features} features, model expects {model.num_features}"
        )
    if model.family == LOGISTIC_MULTICLASS:
        labels = np.asarray(data.labels)
        if labels.min() < 0 or labels.max() >= model.num_classes:
            raise ValueError(
                f"multiclass labels must lie in [0, {model.num_classes}), "
                f"got range [{labels.min()}, {labels.max()}]"
            )


def _multiclass_scores(model: CostModel, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    W = w.reshape(model.num_features, model.num_classes)
    return X @ W


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def local_cost(model: CostModel, w: np.ndarray, data: LabeledDataset) -> float:
    """Mean cost of ``w`` over one user's samples."""
    w = _check_weights(model, w)
    _check_data(model, data)
    X, y = data.features, data.labels

    if model.family == LINEAR_REGRESSION:
        r = X @ w - y
        return float(0.5 * np.mean(r * r))
    if model.family == LOGISTIC_BINARY:
        z = y * (X @ w)
        return float(np.mean(np.logaddexp(0.0, -z)))
    if model.family == LOGISTIC_MULTICLASS:
        scores = _multiclass_scores(model, w, X)
        shifted = scores - scores.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1)) + scores.max(axis=1)
        picked = scores[np.arange(X.shape[0]), y.astype(int)]
        return float(np.mean(lse - picked))
    # hinge
    margins = y * (X @ w)
    return float(np.mean(np.maximum(0.0, 1.0 - margins)))


def global_cost(model: CostModel, w: np.ndarray, partition: list[LabeledDataset]) -> float:
    """Arithmetic mean of ``local_cost`` over users."""
    if not partition:
        raise ValueError("partition must contain at least one dataset")
    return float(np.mean([local_cost(model, w, d) for d in partition]))


def gradient(model: CostModel, w: np.ndarray, data: LabeledDataset) -> np.ndarray:
    """Gradient of ``local_cost`` at ``w`` (a subgradient for the hinge).

    The hinge subgradient selects 0 at the kink (margin exactly 1), the
    minimal-norm choice.
    """
    w = _check_weights(model, w)
    _check_data(model, data)
    X, y = data.features, data.labels
    m = X.shape[0]

    if model.family == LINEAR_REGRESSION:
        return X.T @ (X @ w - y) / m
    if model.family == LOGISTIC_BINARY:
        z = y * (X @ w)
        coeff = -y * _sigmoid(-z)
        return X.T @ coeff / m
    if model.family == LOGISTIC_MULTICLASS:
        probs = _softmax(_multiclass_scores(model, w, X))
        probs[np.arange(m), y.astype(int)] -= 1.0
        return (X.T @ probs / m).reshape(-1)
    # hinge: samples with margin < 1 contribute -y x, margin >= 1 contribute 0
    margins = y * (X @ w)
    active = margins < 1.0
    if not np.any(active):
        return np.zeros_like(w)
    return -(X[active].T @ y[active]) / m


def hessian_block(model: CostModel, w: np.ndarray, data: LabeledDataset) -> np.ndarray:
    """Hessian of ``local_cost`` at ``w`` (param_dim x param_dim, symmetric).

    For linear regression this is X'X/m independent of ``w``. The hinge is
    rejected as non-smooth.
    """
    w = _check_weights(model, w)
    _check_data(model, data)
    if model.family == HINGE_SVM:
        raise UnsupportedModelError("hinge-svm is not twice differentiable")
    X, y = data.features, data.labels
    m = X.shape[0]

    if model.family == LINEAR_REGRESSION:
        return X.T @ X / m
    if model.family == LOGISTIC_BINARY:
        s = _sigmoid(X @ w)
        weights = s * (1.0 - s)
        return (X * weights[:, None]).T @ X / m
    # multiclass: blocks H[(a,c),(b,d)] = mean_i X[i,a] X[i,b] (P_ic d_cd - P_ic P_id)
    probs = _softmax(_multiclass_scores(model, w, X))
    C = model.num_classes
    M = np.einsum("ic,cd->icd", probs, np.eye(C)) - np.einsum("ic,id->icd", probs, probs)
    H = np.einsum("ia,ib,icd->acbd", X, X, M) / m
    d = model.param_dim
    return H.reshape(d, d)
