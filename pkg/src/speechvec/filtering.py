"""Corpus filtering: energy VAD segmentation, quality-score thresholding,
and the phoneme-duration IQR outlier filter, composed in that fixed order.

Source separation, diarization, and transcription are identity pass-throughs
here: the synthetic corpus is already single-speaker with known transcripts.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import SpeechUtterance
from .errors import InsufficientSampleError, ParameterError

REASON_LOW_QUALITY = "low_quality"
REASON_DURATION_OUTLIER = "duration_outlier"
REASON_EMPTY_AFTER_VAD = "empty_after_vad"


@dataclass
class StageReport:
    stage: str
    n_in: int
    n_out: int
    rejected: list = field(default_factory=list)  # [{"id":..., "reason":...}]
    segments_out: int | None = None  # VAD only: survivors after splitting

    def check_conservation(self):
        return self.n_in == self.n_out + len(self.rejected)

    def to_dict(self):
        d = {"stage": self.stage, "n_in": self.n_in, "n_out": self.n_out,
             "rejected": self.rejected}
        if self.segments_out is not None:
            d["segments_out"] = self.segments_out
        return d


@dataclass
class FilterReport:
    stages: list = field(default_factory=list)

    def to_dict(self):
        return {"stages": [s.to_dict() for s in self.stages]}


# ---------------------------------------------------------------------------
# VAD segmentation


def _segment_durations(utterance, start, stop):
    """Clip per-token frame spans to [start, stop); tokens with no overlap
    drop out so the segment invariant T == sum(durations) holds."""
    durations, tokens = [], []
    cursor = 0
    for tok, dur in zip(utterance.tokens, utterance.phoneme_durations):
        span_lo, span_hi = cursor, cursor + dur
        overlap = min(span_hi, stop) - max(span_lo, start)
        if overlap > 0:
            durations.append(int(overlap))
            tokens.append(tok)
        cursor = span_hi
    return durations, tokens


def vad_segment(utterance, energy_threshold, min_frames=5):
    """Split on maximal runs of frames whose L2 energy falls below the
    threshold; segments shorter than ``min_frames`` (the adapter kernel) are
    dropped. Returns (segments, n_dropped_short)."""
    if energy_threshold < 0:
        raise ParameterError(f"vad: threshold must be >= 0, got {energy_threshold}")
    energy = np.linalg.norm(utterance.frames, axis=1)
    voiced = energy >= energy_threshold
    segments = []
    dropped_short = 0
    start = None
    bounds = []
    for i, v in enumerate(voiced):
        if v and start is None:
            start = i
        elif not v and start is not None:
            bounds.append((start, i))
            start = None
    if start is not None:
        bounds.append((start, len(voiced)))
    if len(bounds) == 1 and bounds[0] == (0, len(voiced)):
        return [utterance], 0  # nothing below threshold: input passes whole
    for n, (lo, hi) in enumerate(bounds):
        if hi - lo < min_frames:
            dropped_short += 1
            continue
        durations, tokens = _segment_durations(utterance, lo, hi)
        segments.append(SpeechUtterance(
            utt_id=f"{utterance.utt_id}:{n}",
            frames=utterance.frames[lo:hi].copy(),
            voice_id=utterance.voice_id,
            quality_score=utterance.quality_score,
            phoneme_durations=durations,
            source_doc=utterance.source_doc,
            tokens=tokens,
        ))
    return segments, dropped_short


def vad_stage(utterances, energy_threshold, min_frames=5):
    """An utterance survives when at least one segment survives; otherwise it
    is rejected with reason ``empty_after_vad``."""
    survivors = []
    report = StageReport(stage="vad", n_in=len(utterances), n_out=0)
    segment_count = 0
    for utt in utterances:
        segments, _ = vad_segment(utt, energy_threshold, min_frames)
        if segments:
            report.n_out += 1
            segment_count += len(segments)
            survivors.extend(segments)
        else:
            report.rejected.append({"id": utt.utt_id, "reason": REASON_EMPTY_AFTER_VAD})
    report.segments_out = segment_count
    return survivors, report


# ---------------------------------------------------------------------------
# quality threshold


def quality_filter(utterances, threshold=3.0):
    """Keep strictly above the threshold: a score of exactly 3.0 is rejected."""
    if not (1.0 <= threshold <= 5.0):
        raise ParameterError(f"quality threshold must be in [1,5], got {threshold}")
    kept = []
    report = StageReport(stage="quality", n_in=len(utterances), n_out=0)
    for utt in utterances:
        if utt.quality_score > threshold:
            kept.append(utt)
            report.n_out += 1
        else:
            report.rejected.append({"id": utt.utt_id, "reason": REASON_LOW_QUALITY})
    return kept, report


# ---------------------------------------------------------------------------
# duration IQR filter


def tukey_upper_fence(values, multiplier=1.5):
    """Q3 + multiplier * IQR with linearly interpolated quartiles."""
    q1, q3 = np.percentile(np.asarray(values, dtype=np.float64), [25.0, 75.0],
                           method="linear")
    return float(q3 + multiplier * (q3 - q1))


def duration_iqr_filter(utterances, multiplier=1.5):
    """Reject utterances whose mean phoneme duration exceeds the Tukey upper
    fence of the batch distribution (strictly above; values at the fence stay)."""
    if len(utterances) < 4:
        raise InsufficientSampleError(
            f"IQR filter needs >= 4 utterances, got {len(utterances)}"
        )
    means = [float(np.mean(u.phoneme_durations)) for u in utterances]
    fence = tukey_upper_fence(means, multiplier)
    kept = []
    report = StageReport(stage="duration_iqr", n_in=len(utterances), n_out=0)
    for utt, mean in zip(utterances, means):
        if mean > fence:
            report.rejected.append({"id": utt.utt_id, "reason": REASON_DURATION_OUTLIER})
        else:
            kept.append(utt)
            report.n_out += 1
    return kept, report


# ---------------------------------------------------------------------------
# full pipeline: VAD -> quality -> IQR


def run_filter_pipeline(utterances, *, energy_threshold=0.25, quality_threshold=3.0,
                        iqr_multiplier=1.5, min_frames=5):
    report = FilterReport()
    after_vad, vad_rep = vad_stage(utterances, energy_threshold, min_frames)
    report.stages.append(vad_rep)
    after_quality, quality_rep = quality_filter(after_vad, quality_threshold)
    report.stages.append(quality_rep)
    kept, iqr_rep = duration_iqr_filter(after_quality, iqr_multiplier)
    report.stages.append(iqr_rep)
    return kept, report
