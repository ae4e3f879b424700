"""Segment-based SED metrics and frame-based localization metrics.

Four numbers summarize a prediction/reference pair: segment error rate (ER)
and F1 for detection, frame recall (FR, percent of frames whose predicted
event count matches the reference) and DOA error (DE, mean angular distance
in degrees over optimally matched event pairs) for localization.

Frame annotations are lists with one dict per frame mapping class_id to a
unit DOA vector, or to None for events whose direction is unusable (these
still count toward frame cardinality but never enter angle matching).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .errors import DataError, FormatError, InputError

CSV_HEADER = ["frame_index", "class_id", "x", "y", "z"]


def binarize_sed(sed, threshold=0.5):
    """Activity mask from sigmoid outputs: active iff sed > threshold."""
    return np.asarray(sed) > threshold


# ---------------------------------------------------------------------------
# Segment ER / F1
# ---------------------------------------------------------------------------

@dataclass
class SedCounts:
    """Integer accumulators behind ER and F1; addable across evaluations."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    s: int = 0
    d: int = 0
    i: int = 0
    n_ref: int = 0

    def __add__(self, other: "SedCounts") -> "SedCounts":
        return SedCounts(*(a + b for a, b in zip(self._tuple(), other._tuple())))

    def _tuple(self):
        return (self.tp, self.fp, self.fn, self.s, self.d, self.i, self.n_ref)

    @property
    def er(self):
        """Substitutions + deletions + insertions over reference count; None if no references."""
        if self.n_ref == 0:
            return None
        return (self.s + self.d + self.i) / self.n_ref

    @property
    def f1(self):
        """2TP / (2TP + FP + FN); None when the denominator is zero."""
        denom = 2 * self.tp + self.fp + self.fn
        if denom == 0:
            return None
        return 2 * self.tp / denom


def segment_counts(pred_activity, ref_activity, frames_per_segment) -> SedCounts:
    """Accumulate segment-level TP/FP/FN and S/D/I counts.

    A class is active in a segment if it is active in any frame of it; the
    trailing partial segment is kept. Per segment, S = min(FN, FP),
    D = max(0, FN - FP), I = max(0, FP - FN).
    """
    pred = np.asarray(pred_activity, dtype=bool)
    ref = np.asarray(ref_activity, dtype=bool)
    if pred.shape != ref.shape:
        raise InputError(f"activity shapes differ: {pred.shape} vs {ref.shape}")
    if frames_per_segment < 1:
        raise InputError("frames_per_segment must be >= 1")

    counts = SedCounts()
    t_total = pred.shape[0]
    for start in range(0, t_total, frames_per_segment):
        p = pred[start:start + frames_per_segment].any(axis=0)
        r = ref[start:start + frames_per_segment].any(axis=0)
        tp = int(np.sum(p & r))
        fp = int(np.sum(p & ~r))
        fn = int(np.sum(~p & r))
        counts.tp += tp
        counts.fp += fp
        counts.fn += fn
        counts.s += min(fn, fp)
        counts.d += max(0, fn - fp)
        counts.i += max(0, fp - fn)
        counts.n_ref += int(np.sum(r))
    return counts


def segment_er_f1(pred_activity, ref_activity, frames_per_segment):
    """Segment error rate and F1 as a pair (either may be None, see SedCounts)."""
    counts = segment_counts(pred_activity, ref_activity, frames_per_segment)
    return counts.er, counts.f1


# ---------------------------------------------------------------------------
# Frame recall and DOA error
# ---------------------------------------------------------------------------

def frame_recall(pred_ann, ref_ann):
    """Percent of frames whose predicted event count equals the reference count."""
    if len(pred_ann) != len(ref_ann):
        raise InputError(f"frame counts differ: {len(pred_ann)} vs {len(ref_ann)}")
    if len(ref_ann) == 0:
        raise InputError("cannot compute frame recall over zero frames")
    hits = sum(1 for p, r in zip(pred_ann, ref_ann) if len(p) == len(r))
    return 100.0 * hits / len(ref_ann)


def angular_distance_deg(u, v):
    """Angle in degrees between two unit vectors.

    Computed as atan2(|u x v|, u . v): identical to arccos of the clamped
    dot product in exact arithmetic, but stable near 0 and 180 degrees and
    exactly 0 for identical vectors.
    """
    cross = np.cross(u, v)
    return float(np.degrees(np.arctan2(np.linalg.norm(cross), np.dot(u, v))))


def _match_frame(pred_vecs, ref_vecs):
    """Minimal total angle over all assignments of min(|P|, |R|) pairs.

    Exhaustive permutation search; overlap never exceeds a handful of
    sources so this beats pulling in an assignment solver.
    """
    if not pred_vecs or not ref_vecs:
        return 0.0, 0
    angles = np.array([[angular_distance_deg(p, r) for r in ref_vecs] for p in pred_vecs])
    n_p, n_r = angles.shape
    if n_p <= n_r:
        best = min(
            sum(angles[i, perm[i]] for i in range(n_p))
            for perm in permutations(range(n_r), n_p)
        )
        return best, n_p
    best = min(
        sum(angles[perm[j], j] for j in range(n_r))
        for perm in permutations(range(n_p), n_r)
    )
    return best, n_r


def doa_error_accumulate(pred_ann, ref_ann):
    """Total matched angle (degrees) and pair count, pooled over all frames."""
    if len(pred_ann) != len(ref_ann):
        raise InputError(f"frame counts differ: {len(pred_ann)} vs {len(ref_ann)}")
    total = 0.0
    pairs = 0
    for p, r in zip(pred_ann, ref_ann):
        pv = [v for v in p.values() if v is not None]
        rv = [v for v in r.values() if v is not None]
        angle, n = _match_frame(pv, rv)
        total += angle
        pairs += n
    return total, pairs


def doa_error(pred_ann, ref_ann):
    """Mean matched angular distance in degrees; None if no pairs matched."""
    total, pairs = doa_error_accumulate(pred_ann, ref_ann)
    if pairs == 0:
        return None
    return total / pairs


def doa_vectors_from_prediction(sed_activity, doa):
    """Frame annotations from an activity mask and raw (T, 3N) DOA output.

    Each active (frame, class) contributes its (x, y, z) triple normalized
    to unit length; zero-norm vectors are kept as None so they still count
    toward frame cardinality but are excluded from angle matching.
    """
    activity = np.asarray(sed_activity, dtype=bool)
    doa = np.asarray(doa, dtype=np.float64)
    t_len, n_classes = activity.shape
    if doa.shape != (t_len, 3 * n_classes):
        raise InputError(f"doa shape {doa.shape} does not match activity {activity.shape}")
    ann = []
    for t in range(t_len):
        frame = {}
        for c in np.nonzero(activity[t])[0]:
            v = doa[t, 3 * c:3 * c + 3]
            norm = np.linalg.norm(v)
            frame[int(c)] = v / norm if norm > 0.0 else None
        ann.append(frame)
    return ann


def annotation_activity(ann, n_classes):
    """Boolean (T, n_classes) activity implied by frame annotations."""
    act = np.zeros((len(ann), n_classes), dtype=bool)
    for t, frame in enumerate(ann):
        for c in frame:
            if c >= n_classes:
                raise DataError(f"class_id {c} out of range (n_classes={n_classes})")
            act[t, c] = True
    return act


# ---------------------------------------------------------------------------
# Full report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """ER/F1/FR/DE plus the raw accumulators they came from."""

    er: float | None
    f1: float | None
    fr: float
    de: float | None
    counts: SedCounts
    n_matched_pairs: int


def evaluate_annotations(pred_ann, ref_ann, n_classes, frames_per_segment) -> EvalReport:
    """Compute the full metric report from two frame annotation lists."""
    pred_act = annotation_activity(pred_ann, n_classes)
    ref_act = annotation_activity(ref_ann, n_classes)
    counts = segment_counts(pred_act, ref_act, frames_per_segment)
    total, pairs = doa_error_accumulate(pred_ann, ref_ann)
    return EvalReport(
        er=counts.er,
        f1=counts.f1,
        fr=frame_recall(pred_ann, ref_ann),
        de=total / pairs if pairs else None,
        counts=counts,
        n_matched_pairs=pairs,
    )


# ---------------------------------------------------------------------------
# Interchange CSV
# ---------------------------------------------------------------------------

def write_prediction_csv(path, ann):
    """One row per (frame, event): frame_index, class_id, x, y, z."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for t, frame in enumerate(ann):
            for c in sorted(frame):
                v = frame[c]
                x, y, z = (0.0, 0.0, 0.0) if v is None else (v[0], v[1], v[2])
                writer.writerow([t, c, f"{x:.10g}", f"{y:.10g}", f"{z:.10g}"])


def read_prediction_csv(path, n_frames=None):
    """Read interchange CSV into frame annotations.

    Returns (annotations, n_frames). Without an explicit n_frames the list
    spans up to the largest frame index present. Zero vectors become None
    entries (direction unusable); all other vectors are normalized.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise FormatError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for line in reader:
            if not line:
                continue
            try:
                rows.append((int(line[0]), int(line[1]),
                             float(line[2]), float(line[3]), float(line[4])))
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}: malformed row {line!r}") from exc

    max_frame = max((r[0] for r in rows), default=-1)
    if n_frames is None:
        n_frames = max_frame + 1
    elif max_frame >= n_frames:
        raise DataError(f"{path}: frame index {max_frame} >= n_frames {n_frames}")
    ann = [dict() for _ in range(n_frames)]
    for t, c, x, y, z in rows:
        if t < 0 or c < 0:
            raise DataError(f"{path}: negative frame or class index")
        v = np.array([x, y, z])
        norm = np.linalg.norm(v)
        ann[t][c] = v / norm if norm > 0.0 else None
    return ann, n_frames
