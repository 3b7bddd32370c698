"""Pearson and Spearman correlation, MSE/PSNR, and the per-patient
triplet correlation report.

Correlations are computed in double precision over flattened pixel
vectors. Zero-variance input is an error, never a NaN: degenerate images
should fail loudly. Ranks use the average-rank convention for ties, which
matters for quantized pixel data.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, InfinitePsnrError, UndefinedCorrelationError

Array = np.ndarray

PAIR_LABELS = ("full_quarter", "full_enhanced", "quarter_enhanced")


def _as_vector(x, name: str) -> Array:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.size < 2:
        raise ContractViolation(f"{name} needs length >= 2, got {v.size}")
    if not np.isfinite(v).all():
        raise ContractViolation(f"{name} contains non-finite values")
    return v


def pearson(x, y) -> float:
    """r = sum((x-xbar)(y-ybar)) / sqrt(sum((x-xbar)^2) * sum((y-ybar)^2))."""
    xv = _as_vector(x, "x")
    yv = _as_vector(y, "y")
    if xv.size != yv.size:
        raise ContractViolation(f"length mismatch: {xv.size} vs {yv.size}")
    xd = xv - xv.mean()
    yd = yv - yv.mean()
    sx = float(np.sum(xd * xd))
    sy = float(np.sum(yd * yd))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError(
            "undefined correlation: " + ("x" if sx == 0.0 else "y") + " has zero variance")
    r = float(np.sum(xd * yd) / np.sqrt(sx * sy))
    return min(1.0, max(-1.0, r))


def rank(x) -> Array:
    """Ranks 1..n; tied values share the average of their positional ranks."""
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Pearson correlation of the rank-transformed samples."""
    xv = _as_vector(x, "x")
    yv = _as_vector(y, "y")
    if xv.size != yv.size:
        raise ContractViolation(f"length mismatch: {xv.size} vs {yv.size}")
    return pearson(rank(xv), rank(yv))


def mse_metric(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b, max_val: float = 1.0) -> float:
    """10*log10(max_val^2 / mse) in dB; identical images raise, they do not
    return a float."""
    err = mse_metric(a, b)
    if err == 0.0:
        raise InfinitePsnrError("identical images: PSNR is infinite")
    return float(10.0 * np.log10(max_val * max_val / err))


# ---------------------------------------------------------------------------
# triplet report


@dataclass
class TripletRecord:
    patient_id: str
    pearson: dict[str, float]   # keyed by PAIR_LABELS
    spearman: dict[str, float]

    def validate(self) -> None:
        for table in (self.pearson, self.spearman):
            for label, value in table.items():
                if not -1.0 <= value <= 1.0:
                    raise ContractViolation(f"{label} coefficient {value} outside [-1, 1]")


def triplet_report(full, quarter, enhanced, patient_id: str) -> TripletRecord:
    """All six coefficients over flattened pixels of one patient's triplet."""
    images = {"full": np.asarray(full), "quarter": np.asarray(quarter),
              "enhanced": np.asarray(enhanced)}
    shapes = {v.shape for v in images.values()}
    if len(shapes) != 1:
        raise ContractViolation(f"triplet shapes disagree: {shapes}")
    pearsons: dict[str, float] = {}
    spearmans: dict[str, float] = {}
    for label in PAIR_LABELS:
        a, b = label.split("_")
        try:
            pearsons[label] = pearson(images[a], images[b])
            spearmans[label] = spearman(images[a], images[b])
        except UndefinedCorrelationError as exc:
            raise UndefinedCorrelationError(f"{patient_id} {label}: {exc}") from exc
    record = TripletRecord(patient_id=patient_id, pearson=pearsons, spearman=spearmans)
    record.validate()
    return record


def report_csv(records: list[TripletRecord]) -> str:
    header = ["patient"]
    header += [f"pearson_{label}" for label in PAIR_LABELS]
    header += [f"spearman_{label}" for label in PAIR_LABELS]
    lines = [",".join(header)]
    for r in records:
        row = [r.patient_id]
        row += [f"{r.pearson[label]:.9f}" for label in PAIR_LABELS]
        row += [f"{r.spearman[label]:.9f}" for label in PAIR_LABELS]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def report_text(records: list[TripletRecord]) -> str:
    blocks = []
    for r in records:
        lines = [f"patient {r.patient_id}"]
        for label in PAIR_LABELS:
            pretty = label.replace("_", " vs ")
            lines.append(f"  {pretty}: pearson {r.pearson[label]:+.6f} "
                         f"spearman {r.spearman[label]:+.6f}")
        blocks.append("\n".join(lines))
    return "\n".join(blocks) + "\n"
