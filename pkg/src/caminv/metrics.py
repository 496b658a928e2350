"""Biometric error rates and score-file IO.

Decision rule everywhere: a sample is accepted as live iff score >= threshold.
FAR is the fraction of spoof samples accepted, FRR the fraction of live
samples rejected. EER picks its operating point on a development set; HTER,
APCER, BPCER and ACER are then evaluated on a disjoint test set at that
frozen threshold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class ScoreRecord:
    """Minimal scored sample: id, fused score (higher = more live), label."""

    sample_id: str
    score: float
    label: int  # 1 live, 0 spoof
    pai_type: str = "none"


def _split_scores(records: list[ScoreRecord]) -> tuple[np.ndarray, np.ndarray]:
    if not records:
        raise DataError("no score records given")
    scores = np.asarray([r.score for r in records], dtype=np.float64)
    labels = np.asarray([r.label for r in records], dtype=np.int64)
    if not np.isfinite(scores).all():
        raise DataError("scores contain non-finite values")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 (spoof) or 1 (live)")
    live = scores[labels == 1]
    spoof = scores[labels == 0]
    if live.size == 0 or spoof.size == 0:
        raise DataError("need at least one live and one spoof sample")
    return live, spoof


def roc_sweep(records: list[ScoreRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FAR and FRR over every distinct operating point.

    Returns (thresholds, far, frr) with thresholds ascending. The sweep
    covers each unique score plus one sentinel below the minimum (accept
    everything) and one above the maximum (reject everything), so FAR runs
    from 1 to 0 and FRR from 0 to 1, each monotone in the threshold.
    """
    live, spoof = _split_scores(records)
    live_sorted = np.sort(live)
    spoof_sorted = np.sort(spoof)
    uniq = np.unique(np.concatenate([live, spoof]))
    thresholds = np.concatenate([[uniq[0] - 1.0], uniq, [uniq[-1] + 1.0]])
    # score >= t accepted: spoofs at/above t are false accepts,
    # lives strictly below t are false rejects.
    far = (spoof_sorted.size - np.searchsorted(spoof_sorted, thresholds, side="left")) / spoof_sorted.size
    frr = np.searchsorted(live_sorted, thresholds, side="left") / live_sorted.size
    return thresholds, far, frr


def eer(records: list[ScoreRecord]) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Picks the sweep point minimizing |FAR - FRR| and reports the mean of the
    two rates there; ties resolve toward the smaller threshold. No
    interpolation between points.
    """
    thresholds, far, frr = roc_sweep(records)
    i = int(np.argmin(np.abs(far - frr)))
    return float((far[i] + frr[i]) / 2.0), float(thresholds[i])


def far_frr_at(records: list[ScoreRecord], threshold: float) -> tuple[float, float]:
    """Operating-point error rates at a frozen threshold."""
    live, spoof = _split_scores(records)
    far = float(np.mean(spoof >= threshold))
    frr = float(np.mean(live < threshold))
    return far, frr


def hter(far: float, frr: float) -> float:
    """Half total error rate, the mean of FAR and FRR."""
    for name, v in (("far", far), ("frr", frr)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    return (far + frr) / 2.0


def hter_at(records: list[ScoreRecord], threshold: float) -> float:
    far, frr = far_frr_at(records, threshold)
    return hter(far, frr)


def presentation_errors(
    records: list[ScoreRecord], threshold: float
) -> tuple[float, dict[str, float], float, float]:
    """APCER (max over PAI types), per-type APCER, BPCER, and ACER.

    Every spoof record must carry a concrete pai_type; APCER for a type is
    the fraction of its samples accepted as live, and the headline APCER is
    the worst type. BPCER is the fraction of live samples rejected.
    """
    live, _ = _split_scores(records)
    per_type: dict[str, list[float]] = {}
    for r in records:
        if r.label == 0:
            if r.pai_type in ("", "none"):
                raise DataError(f"spoof sample {r.sample_id!r} has no pai_type")
            per_type.setdefault(r.pai_type, []).append(r.score)
    per_type_apcer = {
        t: float(np.mean(np.asarray(s) >= threshold)) for t, s in sorted(per_type.items())
    }
    apcer = max(per_type_apcer.values())
    bpcer = float(np.mean(live < threshold))
    acer = (apcer + bpcer) / 2.0
    return apcer, per_type_apcer, bpcer, acer


@dataclass
class MetricsReport:
    """Dev-set operating point plus test-set error rates at that point."""

    eer: float
    threshold: float
    far: float
    frr: float
    hter: float
    apcer: float
    apcer_per_type: dict[str, float] = field(default_factory=dict)
    bpcer: float = 0.0
    acer: float = 0.0


def compute_report(
    dev_records: list[ScoreRecord], test_records: list[ScoreRecord]
) -> MetricsReport:
    """EER threshold from dev, every other rate from test at that threshold."""
    dev_eer, threshold = eer(dev_records)
    far, frr = far_frr_at(test_records, threshold)
    apcer, per_type, bpcer, acer = presentation_errors(test_records, threshold)
    return MetricsReport(
        eer=dev_eer,
        threshold=threshold,
        far=far,
        frr=frr,
        hter=hter(far, frr),
        apcer=apcer,
        apcer_per_type=per_type,
        bpcer=bpcer,
        acer=acer,
    )


def format_report(report: MetricsReport) -> str:
    lines = [
        f"eer(dev)    {report.eer:.4f}",
        f"threshold   {report.threshold:.6f}",
        f"far(test)   {report.far:.4f}",
        f"frr(test)   {report.frr:.4f}",
        f"hter(test)  {report.hter:.4f}",
        f"apcer       {report.apcer:.4f}",
    ]
    for t, v in report.apcer_per_type.items():
        lines.append(f"apcer[{t}]  {v:.4f}")
    lines.append(f"bpcer       {report.bpcer:.4f}")
    lines.append(f"acer        {report.acer:.4f}")
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, txt_path: str | Path, csv_path: str | Path) -> None:
    Path(txt_path).write_text(format_report(report))
    fields = ["eer", "threshold", "far", "frr", "hter", "apcer", "bpcer", "acer"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = fields + [f"apcer_{t}" for t in report.apcer_per_type]
        writer.writerow(header)
        row = [repr(getattr(report, f)) for f in fields]
        row += [repr(v) for v in report.apcer_per_type.values()]
        writer.writerow(row)


SCORE_FIELDS = (
    "sample_id",
    "p_spf",
    "p_aug",
    "p_fused",
    "label",
    "pai_type",
    "camera_pred",
    "p_unknown",
)


@dataclass(frozen=True)
class ScoreRow:
    """One scored sample as written to a score CSV.

    p_spf / p_aug are the branch probabilities (nan when the branch does not
    exist in the model), p_fused the combined score, camera_pred the 1-based
    predicted camera category (n_cameras + 1 meaning unknown, 0 when no
    camera path exists), p_unknown the normalized unknown-camera probability.
    """

    sample_id: str
    p_spf: float
    p_aug: float
    p_fused: float
    label: int
    pai_type: str
    camera_pred: int
    p_unknown: float

    def record(self, column: str = "p_fused") -> ScoreRecord:
        if column not in ("p_spf", "p_aug", "p_fused"):
            raise ValueError(f"not a score column: {column}")
        return ScoreRecord(
            sample_id=self.sample_id,
            score=float(getattr(self, column)),
            label=self.label,
            pai_type=self.pai_type,
        )


def write_score_csv(rows: list[ScoreRow], path: str | Path) -> None:
    """Write rows in the canonical column order; floats use repr so the file
    round-trips exactly and hashes deterministically."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_FIELDS)
        for r in rows:
            writer.writerow(
                [
                    r.sample_id,
                    repr(float(r.p_spf)),
                    repr(float(r.p_aug)),
                    repr(float(r.p_fused)),
                    r.label,
                    r.pai_type,
                    r.camera_pred,
                    repr(float(r.p_unknown)),
                ]
            )


def read_score_csv(path: str | Path) -> list[ScoreRow]:
    rows: list[ScoreRow] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != SCORE_FIELDS:
            raise DataError(f"unexpected score CSV header in {path}")
        for rec in reader:
            rows.append(
                ScoreRow(
                    sample_id=rec["sample_id"],
                    p_spf=float(rec["p_spf"]),
                    p_aug=float(rec["p_aug"]),
                    p_fused=float(rec["p_fused"]),
                    label=int(rec["label"]),
                    pai_type=rec["pai_type"],
                    camera_pred=int(rec["camera_pred"]),
                    p_unknown=float(rec["p_unknown"]),
                )
            )
    return rows


def records_from_rows(rows: list[ScoreRow], column: str = "p_fused") -> list[ScoreRecord]:
    return [r.record(column) for r in rows]
