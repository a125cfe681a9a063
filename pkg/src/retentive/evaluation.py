"""Detection metrics: class-wise AP, recall at K, and ROI feature norms.

AP is the exact area under the precision-recall curve (all score cutoffs)
with the precision envelope applied, computed per class and averaged
unweighted within class groups. Recall at K asks what fraction of instances
any of an image's top-K candidates covers, which makes it usable both for
proposal quality and for final detections, and for instances the training
labels never revealed.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import canonical_json
from .detector import Model, image_features, roi_features
from .errors import ParameterError
from .synthgen import ClassSplit, Dataset, SceneRecord
from .tensorops import iou_matrix

GROUP_SEEN = "seen"
GROUP_UNSEEN = "unseen"
GROUP_ALL = "all"


def _det_rows(dets_per_image, class_id: int):
    """Flatten one class's detections to (image, score, box) in stable order."""
    rows = []
    for img_idx, dets in enumerate(dets_per_image):
        for det in dets:
            if det.class_id == class_id:
                rows.append((img_idx, float(det.score), np.asarray(det.box, dtype=np.float64)))
    return rows


def average_precision(dets_per_image, records, class_id: int,
                      iou_thresh: float) -> float | None:
    """Exact PR-curve area for one class; None when the class has no truth.

    Detections are ranked by score with ties broken by arrival order. Each
    detection greedily claims the highest-overlap still-unclaimed instance in
    its image, counting as correct only at overlap >= iou_thresh.
    """
    if len(dets_per_image) != len(records):
        raise ParameterError(f"{len(dets_per_image)} detection lists vs {len(records)} records")
    gt_boxes = []
    for rec in records:
        mask = rec.gt.labels == class_id
        gt_boxes.append(rec.gt.boxes[mask])
    n_gt = int(sum(len(b) for b in gt_boxes))
    if n_gt == 0:
        return None

    rows = _det_rows(dets_per_image, class_id)
    if not rows:
        return 0.0
    scores = np.asarray([r[1] for r in rows])
    order = np.argsort(-scores, kind="stable")

    claimed = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    tp = np.zeros(len(rows))
    for rank, det_idx in enumerate(order):
        img, _, box = rows[det_idx]
        boxes = gt_boxes[img]
        if len(boxes) == 0:
            continue
        overlaps = iou_matrix(box[None, :], boxes)[0]
        overlaps = np.where(claimed[img], -1.0, overlaps)
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_thresh:
            claimed[img][best] = True
            tp[rank] = 1.0

    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def ap_table(dets_per_image, dataset: Dataset,
             iou_thresholds) -> dict[int, dict[float, float | None]]:
    """Per-class AP at every threshold, for every foreground class."""
    table: dict[int, dict[float, float | None]] = {}
    classes = dataset.split.base_ids + dataset.split.novel_ids
    for cid in classes:
        table[cid] = {
            float(t): average_precision(dets_per_image, dataset.records, cid, float(t))
            for t in iou_thresholds
        }
    return table


def _group_mean(table, class_ids, thresholds) -> float | None:
    per_threshold = []
    for t in thresholds:
        vals = [table[c][t] for c in class_ids if c in table and table[c][t] is not None]
        if vals:
            per_threshold.append(float(np.mean(vals)))
    if not per_threshold:
        return None
    return float(np.mean(per_threshold))


def ap_summary(table: dict[int, dict[float, float | None]], split: ClassSplit,
               iou_thresholds) -> dict[str, float]:
    """Group means over classes then thresholds; empty groups stay absent."""
    thresholds = [float(t) for t in iou_thresholds]
    out: dict[str, float] = {}
    groups = {
        "ap": split.base_ids + split.novel_ids,
        "bap": split.base_ids,
        "nap": split.novel_ids,
    }
    for name, ids in groups.items():
        full = _group_mean(table, ids, thresholds)
        if full is not None:
            out[name] = full
        if 0.5 in thresholds:
            at50 = _group_mean(table, ids, [0.5])
            if at50 is not None:
                out[name + "50"] = at50
    return out


def detections_to_candidates(dets_per_image) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-image (boxes, scores) pairs from detection lists."""
    out = []
    for dets in dets_per_image:
        boxes = np.asarray([d.box for d in dets], dtype=np.float64).reshape(-1, 4)
        scores = np.asarray([d.score for d in dets], dtype=np.float64)
        out.append((boxes, scores))
    return out


def proposals_to_candidates(props_per_image) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(p.boxes, p.scores) for p in props_per_image]


def _filter_mask(rec: SceneRecord, class_filter: str) -> np.ndarray:
    if class_filter == GROUP_ALL:
        return np.ones(len(rec.gt.labels), dtype=bool)
    if class_filter == GROUP_SEEN:
        return rec.gt.annotated.copy()
    if class_filter == GROUP_UNSEEN:
        return ~rec.gt.annotated
    raise ParameterError(f"unknown class filter {class_filter!r}")


def average_recall(candidates, records, k: int, iou_thresh: float,
                   class_filter: str = GROUP_ALL) -> float | None:
    """Fraction of filtered instances covered by any of the top-k candidates.

    Candidates are (boxes, scores) per image; only the k best-scoring boxes
    per image count, ties resolved by arrival order. The unseen filter
    selects instances whose labels were hidden at training time.
    """
    if len(candidates) != len(records):
        raise ParameterError(f"{len(candidates)} candidate lists vs {len(records)} records")
    if k < 0:
        raise ParameterError(f"k must be >= 0, got {k}")
    matched = 0
    total = 0
    for (boxes, scores), rec in zip(candidates, records):
        mask = _filter_mask(rec, class_filter)
        gts = rec.gt.boxes[mask]
        total += len(gts)
        if len(gts) == 0 or len(boxes) == 0 or k == 0:
            continue
        order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))[:k]
        overlaps = iou_matrix(gts, np.asarray(boxes, dtype=np.float64)[order])
        matched += int((overlaps.max(axis=1) >= iou_thresh).sum())
    if total == 0:
        return None
    return matched / total


def roi_feature_norms(model: Model, dataset: Dataset) -> dict:
    """Mean feature magnitude the box head sees per class, with group means.

    Every instance's own box is pooled and projected; classes the split
    marks scarce form the unseen group regardless of per-instance flags.
    """
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for img, rec in zip(dataset.images, dataset.records):
        if len(rec.gt.labels) == 0:
            continue
        feat = image_features(model, img)
        rows = roi_features(model, feat, rec.gt.boxes)
        norms = np.sqrt((rows * rows).sum(axis=1))
        for lbl, nrm in zip(rec.gt.labels, norms):
            cid = int(lbl)
            sums[cid] = sums.get(cid, 0.0) + float(nrm)
            counts[cid] = counts.get(cid, 0) + 1
    per_class = {cid: sums[cid] / counts[cid] for cid in sorted(sums)}
    groups = {}
    seen = [per_class[c] for c in dataset.split.base_ids if c in per_class]
    unseen = [per_class[c] for c in dataset.split.novel_ids if c in per_class]
    if seen:
        groups[GROUP_SEEN] = float(np.mean(seen))
    if unseen:
        groups[GROUP_UNSEEN] = float(np.mean(unseen))
    return {"per_class": per_class, "groups": groups}


# ---------------------------------------------------------------------------
# report assembly and serialization
# ---------------------------------------------------------------------------

REPORT_SCHEMA_VERSION = 1


@dataclass
class EvalReport:
    """Everything one evaluated model run produced, JSON-serializable."""

    split: ClassSplit
    iou_thresholds: tuple[float, ...]
    per_class_ap: dict[int, dict[float, float | None]]
    summary: dict[str, float]
    recall: dict[str, float | None]
    feature_norms: dict
    baseline_summary: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "split": self.split.to_dict(),
            "iou_thresholds": [float(t) for t in self.iou_thresholds],
            "per_class_ap": {
                str(cid): {f"{t:.2f}": v for t, v in row.items()}
                for cid, row in self.per_class_ap.items()
            },
            "summary": self.summary,
            "recall": self.recall,
            "feature_norms": {
                "per_class": {str(c): v for c, v in self.feature_norms["per_class"].items()},
                "groups": self.feature_norms["groups"],
            },
            "baseline_summary": self.baseline_summary,
            "metadata": self.metadata,
        }


def build_report(dets_per_image, dataset: Dataset, iou_thresholds, recall: dict,
                 feature_norms: dict, metadata: dict | None = None,
                 baseline_summary: dict | None = None) -> EvalReport:
    table = ap_table(dets_per_image, dataset, iou_thresholds)
    return EvalReport(
        split=dataset.split,
        iou_thresholds=tuple(float(t) for t in iou_thresholds),
        per_class_ap=table,
        summary=ap_summary(table, dataset.split, iou_thresholds),
        recall=recall,
        feature_norms=feature_norms,
        baseline_summary=baseline_summary or {},
        metadata=metadata or {},
    )


def _csv_text(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class_id", "group", "iou", "ap"])
    novel = set(report.split.novel_ids)
    for cid in sorted(report.per_class_ap):
        group = "novel" if cid in novel else "base"
        row = report.per_class_ap[cid]
        for t in sorted(row):
            v = row[t]
            writer.writerow([cid, group, f"{t:.2f}", "" if v is None else repr(float(v))])
    return buf.getvalue()


def _svg_text(report: EvalReport) -> str:
    """Bar chart of per-class feature norms, scarce classes color-coded."""
    per_class = report.feature_norms["per_class"]
    novel = set(report.split.novel_ids)
    classes = sorted(per_class)
    bar_w, gap, h, pad = 28, 10, 220, 30
    width = pad * 2 + max(len(classes), 1) * (bar_w + gap)
    height = h + 2 * pad + 20
    top = max([per_class[c] for c in classes], default=1.0) or 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{pad + h}" x2="{width - pad}" y2="{pad + h}" '
        f'stroke="black" stroke-width="1"/>',
    ]
    for i, cid in enumerate(classes):
        v = per_class[cid]
        bh = 0.0 if top == 0 else h * v / top
        x = pad + i * (bar_w + gap)
        y = pad + h - bh
        color = "#d95f02" if cid in novel else "#1b9e77"
        parts.append(f'<rect x="{x}" y="{y:.3f}" width="{bar_w}" height="{bh:.3f}" '
                     f'fill="{color}"/>')
        parts.append(f'<text x="{x + bar_w / 2}" y="{pad + h + 16}" font-size="11" '
                     f'text-anchor="middle">{cid}</text>')
    parts.append(f'<text x="{pad}" y="{pad - 10}" font-size="12">'
                 f'mean pooled-feature magnitude per class</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(report: EvalReport, out_dir) -> dict[str, Path]:
    """Write report.json, metrics.csv, and norms.svg; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out / "report.json",
        "csv": out / "metrics.csv",
        "svg": out / "norms.svg",
    }
    paths["json"].write_text(canonical_json(report.to_dict()) + "\n", encoding="utf-8")
    paths["csv"].write_text(_csv_text(report), encoding="utf-8")
    paths["svg"].write_text(_svg_text(report), encoding="utf-8")
    return paths
