"""Inference: reflection test-time augmentation, model ensembling, decision
rules, and the prediction table format.

Probabilities are averaged (not logits), both across the TTA passes and
across ensemble members. The covid decision is strictly p > 0.5 and the
severity decision is the argmax over classes 1..4 only, with ties resolved
toward negative / the lowest class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .network import Cov3dNetwork, run_forward
from .objectives import Prediction
from .trainer import sagittal_reflect

PREDICTIONS_HEADER = "scan_id,p_covid,covid_label,s0,s1,s2,s3,s4,severity_label"


@dataclass
class ScanPrediction:
    scan_id: str
    p_covid: float
    severity_probs: np.ndarray | None
    covid_label: bool
    severity_label: int | None

    @classmethod
    def from_probs(cls, scan_id: str, p_covid: float,
                   severity_probs: np.ndarray | None) -> "ScanPrediction":
        severity_label = None
        if severity_probs is not None:
            severity_probs = np.asarray(severity_probs, dtype=np.float64)
            if severity_probs.shape != (5,):
                raise DataError("shape error: severity probabilities must be a 5-vector")
            severity_label = 1 + int(np.argmax(severity_probs[1:]))
        return cls(
            scan_id=scan_id,
            p_covid=float(p_covid),
            severity_probs=severity_probs,
            covid_label=float(p_covid) > 0.5,
            severity_label=severity_label,
        )


def _single_pass(network: Cov3dNetwork, voxels: np.ndarray) -> tuple[float | None, np.ndarray | None]:
    outputs = run_forward(network, voxels[None, ...], mode="eval")
    pred = Prediction(
        x=float(outputs.x[0, 0]) if outputs.x is not None else None,
        z=outputs.z[0].numpy() if outputs.z is not None else None,
    )
    p = pred.p if pred.p is not None else pred.p_covid_from_severity
    return p, pred.s


def predict_volume(network: Cov3dNetwork, volume, tta: bool = False) -> ScanPrediction:
    """Predict one scan; with ``tta`` the probabilities are the mean over the
    identity and sagittal-reflection passes."""
    voxels = volume.voxels if hasattr(volume, "voxels") else np.asarray(volume)
    scan_id = getattr(volume, "scan_id", "")
    p, s = _single_pass(network, voxels)
    if tta:
        p_r, s_r = _single_pass(network, sagittal_reflect(voxels))
        p = (p + p_r) / 2.0
        if s is not None:
            s = (s + s_r) / 2.0
    return ScanPrediction.from_probs(scan_id, p, s)


def severity_embedding(p_covid: float) -> np.ndarray:
    """Embed a presence-only probability into the 5-class simplex.

    Used when a covid-only head must fill the severity columns: class 0 takes
    1 - p and the positive mass splits evenly over classes 1..4.
    """
    return np.array([1.0 - p_covid] + [p_covid / 4.0] * 4)


def ensemble(predictions: list[ScanPrediction]) -> ScanPrediction:
    """Average the probability predictions of several models for one scan.

    Sums use math.fsum, so the result is exactly permutation-invariant and an
    ensemble of identical members reproduces the member exactly. Averaged
    severity vectors are renormalized if they drift from unit sum by more
    than 1e-6; labels are re-derived from the averaged probabilities.
    """
    if not predictions:
        raise DataError("input error: ensemble of zero predictions")
    scan_ids = {p.scan_id for p in predictions}
    if len(scan_ids) != 1:
        raise DataError(f"input error: mixed scan_ids in ensemble: {sorted(scan_ids)}")
    n = len(predictions)
    p_covid = math.fsum(p.p_covid for p in predictions) / n

    severity = None
    if any(p.severity_probs is not None for p in predictions):
        vectors = [
            p.severity_probs if p.severity_probs is not None else severity_embedding(p.p_covid)
            for p in predictions
        ]
        severity = np.array([math.fsum(v[c] for v in vectors) / n for c in range(5)])
        total = math.fsum(severity)
        if abs(total - 1.0) > 1e-6:
            severity = severity / total
    return ScanPrediction.from_probs(predictions[0].scan_id, p_covid, severity)


def write_predictions(predictions: list[ScanPrediction], path) -> None:
    """Write the prediction table: scan_id-sorted, probabilities at 6 decimals."""
    if not predictions:
        raise DataError("input error: no predictions to write")
    rows = [PREDICTIONS_HEADER]
    for pred in sorted(predictions, key=lambda p: p.scan_id):
        severity = pred.severity_probs
        if severity is None:
            severity = severity_embedding(pred.p_covid)
            severity_label = 1 + int(np.argmax(severity[1:]))
        else:
            severity_label = pred.severity_label
        cells = [pred.scan_id, f"{pred.p_covid:.6f}", str(int(pred.covid_label))]
        cells += [f"{severity[c]:.6f}" for c in range(5)]
        cells.append(str(severity_label))
        rows.append(",".join(cells))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text("\n".join(rows) + "\n")
        tmp.replace(path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise DataError(f"i/o error: cannot write predictions to {path}: {exc}") from exc


def read_predictions(path) -> list[ScanPrediction]:
    path = Path(path)
    try:
        lines = path.read_text().strip().splitlines()
    except OSError as exc:
        raise DataError(f"i/o error: cannot read predictions from {path}: {exc}") from exc
    if not lines or lines[0] != PREDICTIONS_HEADER:
        raise DataError(f"format error: {path} is not a prediction table")
    predictions = []
    for line in lines[1:]:
        cells = line.split(",")
        if len(cells) != 9:
            raise DataError(f"format error: bad prediction row {line!r}")
        scan_id, p_covid, covid_label = cells[0], float(cells[1]), bool(int(cells[2]))
        severity = np.array([float(c) for c in cells[3:8]])
        severity_label = int(cells[8])
        predictions.append(ScanPrediction(scan_id, p_covid, severity,
                                          covid_label, severity_label))
    return predictions
