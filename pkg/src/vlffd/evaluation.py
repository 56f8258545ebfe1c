"""Video-level scoring and AUC."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, UndefinedMetricError


def frame_score_multiface(face_scores: Sequence[float]) -> float:
    """A frame with several faces takes its most suspicious face."""
    if len(face_scores) == 0:
        raise DataError("frame has no face scores")
    return float(max(face_scores))


def video_score(frame_scores: Sequence[float]) -> float:
    if len(frame_scores) == 0:
        raise DataError("video has no frame scores")
    return float(np.mean(np.asarray(frame_scores, dtype=np.float64)))


def auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Mann-Whitney AUC via mid-ranks; tied (positive, negative) pairs count 1/2."""
    y = np.asarray(labels).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise DataError(f"{y.size} labels for {s.size} scores")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative samples")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pairwise(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Brute-force reference over every (positive, negative) pair."""
    y = np.asarray(labels).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs both positive and negative samples")
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (pos.size * neg.size))


def video_scores(frame_scores: Mapping[str, Sequence[float]]) -> dict[str, float]:
    return {vid: video_score(s) for vid, s in frame_scores.items()}


def method_aucs(video_scores: Mapping[str, float], labels: Mapping[str, int],
                methods: Mapping[str, str]) -> dict[str, float]:
    """AUC of all real videos against each manipulation method, plus "all" and their average."""
    real = [v for v in video_scores if labels[v] == 0]
    out = {}
    for m in sorted({methods[v] for v in video_scores if labels[v] == 1}):
        fake = [v for v in video_scores if labels[v] == 1 and methods[v] == m]
        vids = real + fake
        out[m] = auc([labels[v] for v in vids], [video_scores[v] for v in vids])
    vids = list(video_scores)
    out["all"] = auc([labels[v] for v in vids], [video_scores[v] for v in vids])
    per = [out[m] for m in out if m != "all"]
    out["average"] = float(np.mean(per)) if per else out["all"]
    return out
