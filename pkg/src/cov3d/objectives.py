"""Loss functions for the dual presence/severity task.

The presence head is a single logit trained with weighted binary cross
entropy; the severity head is a 5-way softmax (class 0 = negative, classes
1..4 = severity) trained with cross entropy when the class is known and with
a superset log-loss over classes 1..4 when a scan is only known to be
positive. Both heads support label smoothing, and the two losses combine as
(1-lambda) * covid + lambda * severity.

Everything here is plain float64 math with hand-derived gradients with
respect to the logits; the finite-difference oracles in the test suite check
every gradient path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigError

LOG_CLAMP = 1e-12
N_SEVERITY_OUTPUTS = 5

KIND_COVID = "covid_binary"
KIND_LABELED = "severity_labeled"
KIND_UNLABELED = "severity_unlabeled_positive"
TARGET_KINDS = (KIND_COVID, KIND_LABELED, KIND_UNLABELED)

UNLABELED_GROUP = "unlabeled"


def sigmoid(x):
    """Numerically stable logistic function; no overflow for |x| up to 1e3."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out) if out.ndim == 0 else out


def softmax(z: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(shifted)
    return ez / ez.sum(axis=-1, keepdims=True)


def smooth_binary_target(label: bool, eps_p: float) -> float:
    """Smoothed presence target: positive -> 1 - eps_p, negative -> eps_p."""
    _check_eps(eps_p, "eps_p")
    return 1.0 - eps_p if label else eps_p


def smooth_severity_target(c: int, eps_s: float) -> np.ndarray:
    """Smoothed 5-class target: eps_s split equally among chain neighbors.

    Classes form the ordered chain 0-1-2-3-4 (class 0 = negative neighbors
    only class 1), so interior classes give eps_s/2 to each side and boundary
    classes give all of eps_s to their single neighbor.
    """
    _check_eps(eps_s, "eps_s")
    if c not in range(N_SEVERITY_OUTPUTS):
        raise ConfigError(f"parameter error: severity class must be 0..4, got {c}")
    y = np.zeros(N_SEVERITY_OUTPUTS)
    y[c] = 1.0 - eps_s
    neighbors = [n for n in (c - 1, c + 1) if 0 <= n < N_SEVERITY_OUTPUTS]
    for n in neighbors:
        y[n] = eps_s / len(neighbors)
    return y


def _check_eps(eps: float, name: str) -> None:
    if not (0.0 <= eps < 0.5):
        raise ConfigError(f"{name}: must be in [0, 0.5), got {eps}")


def covid_loss(p: float, y: float, w: float) -> tuple[float, float]:
    """Weighted binary cross entropy and its gradient w.r.t. the logit.

    loss = -w (y log p + (1-y) log(1-p)); d loss / d logit = w (p - y).
    """
    p = float(p)
    y = float(y)
    w = float(w)
    loss = -w * (y * np.log(max(p, LOG_CLAMP)) + (1.0 - y) * np.log(max(1.0 - p, LOG_CLAMP)))
    grad = w * (p - y)
    return float(loss), grad


def severity_loss_labeled(s: np.ndarray, y: np.ndarray, w: float) -> tuple[float, np.ndarray]:
    """Weighted cross entropy over the five classes; gradient is w (s - y)."""
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = float(w)
    loss = -w * float(np.sum(y * np.log(np.maximum(s, LOG_CLAMP))))
    grad = w * (s - y)
    return loss, grad


def severity_loss_unlabeled(s: np.ndarray, w: float) -> tuple[float, np.ndarray]:
    """Superset loss for positives without a class: -w log(sum of s[1..4]).

    The gradient w.r.t. the logits is w * s_c * (q - [c >= 1]) / q with
    q = sum of s[1..4]; it depends only on how much mass sits on class 0.
    """
    s = np.asarray(s, dtype=np.float64)
    w = float(w)
    q = max(float(s[1:].sum()), LOG_CLAMP)
    loss = -w * np.log(q)
    indicator = np.array([0.0, 1.0, 1.0, 1.0, 1.0])
    grad = w * s * (q - indicator) / q
    return float(loss), grad


@dataclass(frozen=True)
class SmoothingParams:
    eps_p: float = 0.0
    eps_s: float = 0.0

    def __post_init__(self):
        _check_eps(self.eps_p, "eps_p")
        _check_eps(self.eps_s, "eps_s")


def class_weights(counts) -> dict:
    """Normalized inverse-frequency weights: w_g = N_total / (G * n_g).

    Weights are exact rationals (fractions.Fraction) so the defining balance
    property w_g * n_g = N/G holds exactly; callers convert to float at the
    point of use. Groups with zero count are excluded (they contribute no
    items); looking one up later is a configuration error.
    """
    nonzero = {g: int(n) for g, n in counts.items() if n != 0}
    if any(n < 0 for n in nonzero.values()):
        raise ConfigError("class weights: negative group count")
    if not nonzero:
        raise ConfigError("class weights: all group counts are zero")
    total = sum(nonzero.values())
    groups = len(nonzero)
    return {g: Fraction(total, groups * n) for g, n in nonzero.items()}


@dataclass
class ClassWeights:
    """Per-group weights for the two loss families."""

    covid: dict
    severity: dict

    @classmethod
    def unit(cls) -> "ClassWeights":
        return cls(covid={}, severity={})

    @classmethod
    def from_annotations(cls, annotations, partition: str = "train") -> "ClassWeights":
        tally = annotations.counts[partition]
        n_pos, n_neg = tally["positive"], tally["negative"]
        severity_counts = dict(tally["severity"])
        n_unlabeled = n_pos - sum(severity_counts.values())
        covid = class_weights({True: n_pos, False: n_neg})
        severity = class_weights(
            {0: n_neg, **severity_counts, UNLABELED_GROUP: n_unlabeled}
        )
        return cls(covid=covid, severity=severity)

    def covid_weight(self, label: bool) -> float:
        if not self.covid:
            return 1.0
        try:
            return float(self.covid[bool(label)])
        except KeyError:
            raise ConfigError(
                f"configuration error: covid group {label} has zero training count"
            ) from None

    def severity_weight(self, group) -> float:
        if not self.severity:
            return 1.0
        try:
            return float(self.severity[group])
        except KeyError:
            raise ConfigError(
                f"configuration error: severity group {group!r} has zero training count"
            ) from None


@dataclass
class LossConfig:
    lam: float = 0.5
    smoothing: SmoothingParams = field(default_factory=SmoothingParams)
    class_weights: ClassWeights | None = None

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ConfigError(f"lambda: must be in [0, 1], got {self.lam}")

    def weights(self) -> ClassWeights:
        return self.class_weights if self.class_weights is not None else ClassWeights.unit()


@dataclass(frozen=True)
class TargetSpec:
    """Per-item training target: which loss branch applies, and with what."""

    kind: str
    y: float | np.ndarray | None
    w: float = 1.0

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ConfigError(f"target kind: unknown {self.kind!r}")
        if self.w <= 0:
            raise ConfigError(f"target weight: must be > 0, got {self.w}")
        if self.kind == KIND_LABELED:
            y = np.asarray(self.y, dtype=np.float64)
            if y.shape != (N_SEVERITY_OUTPUTS,):
                raise ConfigError("target y: severity target must be a 5-vector")

    @property
    def severity_class(self) -> int:
        """Recover the hard class from a smoothed 5-vector (its argmax)."""
        if self.kind != KIND_LABELED:
            raise ConfigError(f"target kind {self.kind!r} carries no severity class")
        return int(np.argmax(np.asarray(self.y)))

    @property
    def covid_label(self) -> bool:
        if self.kind == KIND_COVID:
            return float(self.y) >= 0.5
        if self.kind == KIND_UNLABELED:
            return True
        return self.severity_class >= 1


def make_target(covid_label: bool, severity: int | None, cfg: LossConfig) -> TargetSpec:
    """Build the TargetSpec for one labeled scan under a loss configuration."""
    weights = cfg.weights()
    if cfg.lam == 0.0:
        return TargetSpec(
            kind=KIND_COVID,
            y=smooth_binary_target(covid_label, cfg.smoothing.eps_p),
            w=weights.covid_weight(covid_label),
        )
    if covid_label and severity is None:
        return TargetSpec(kind=KIND_UNLABELED, y=None,
                          w=weights.severity_weight(UNLABELED_GROUP))
    cls = severity if covid_label else 0
    return TargetSpec(
        kind=KIND_LABELED,
        y=smooth_severity_target(cls, cfg.smoothing.eps_s),
        w=weights.severity_weight(cls),
    )


@dataclass
class Prediction:
    """Per-item head outputs and derived probabilities."""

    x: float | None = None
    z: np.ndarray | None = None

    def __post_init__(self):
        if self.x is None and self.z is None:
            raise ConfigError("prediction: needs at least one head output")
        if self.x is not None:
            self.x = float(self.x)
            self.p = sigmoid(self.x)
        else:
            self.p = None
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=np.float64)
            if self.z.shape != (N_SEVERITY_OUTPUTS,):
                raise ConfigError("prediction: severity logits must be a 5-vector")
            self.s = softmax(self.z)
        else:
            self.s = None

    @property
    def p_covid_from_severity(self) -> float | None:
        return float(self.s[1:].sum()) if self.s is not None else None


@dataclass
class CombinedLoss:
    loss: float
    grad_x: float | None
    grad_z: np.ndarray | None
    covid_part: float | None
    severity_part: float | None


def combined_loss(cfg: LossConfig, prediction: Prediction, target: TargetSpec) -> CombinedLoss:
    """Linear combination (1-lambda) * covid + lambda * severity for one item.

    At the endpoints only the named branch is evaluated, so lambda=0 equals
    the covid loss exactly and lambda=1 the severity loss exactly.
    """
    lam = cfg.lam
    covid_part = grad_x = None
    severity_part = grad_z = None

    if lam < 1.0:
        if prediction.p is None:
            raise ConfigError("configuration error: lambda < 1 requires the covid head")
        if target.kind == KIND_COVID:
            y_cov, w_cov = float(target.y), target.w
        else:
            label = target.covid_label
            y_cov = smooth_binary_target(label, cfg.smoothing.eps_p)
            w_cov = cfg.weights().covid_weight(label)
        covid_part, grad_x = covid_loss(prediction.p, y_cov, w_cov)

    if lam > 0.0:
        if prediction.s is None:
            raise ConfigError("configuration error: lambda > 0 requires the severity head")
        if target.kind == KIND_LABELED:
            severity_part, grad_z = severity_loss_labeled(prediction.s, target.y, target.w)
        elif target.kind == KIND_UNLABELED:
            severity_part, grad_z = severity_loss_unlabeled(prediction.s, target.w)
        else:
            raise ConfigError(
                "configuration error: lambda > 0 needs a severity target, got a covid-only one"
            )

    if lam == 0.0:
        return CombinedLoss(covid_part, grad_x, None, covid_part, None)
    if lam == 1.0:
        return CombinedLoss(severity_part, None, grad_z, None, severity_part)
    return CombinedLoss(
        loss=(1.0 - lam) * covid_part + lam * severity_part,
        grad_x=(1.0 - lam) * grad_x,
        grad_z=lam * grad_z,
        covid_part=covid_part,
        severity_part=severity_part,
    )
