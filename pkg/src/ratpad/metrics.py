"""Error-rate metrics for attack detection scores.

Scores are attack-likeness: higher means more attack-like. At threshold
``t`` an attack is missed when its score is below ``t`` (APCER) and a bona
fide sample is rejected when its score is at or above ``t`` (BPCER).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _sides(bf_scores, attack_scores):
    bf = np.asarray(bf_scores, dtype=np.float64).ravel()
    att = np.asarray(attack_scores, dtype=np.float64).ravel()
    if bf.size == 0 or att.size == 0:
        raise ValueError("need non-empty bona fide and attack scores")
    return bf, att


def thresholds(bf, att):
    return np.concatenate([[-np.inf], np.unique(np.concatenate([bf, att])), [np.inf]])


def error_counts(bf, att, ts):
    """Integer counts ``(missed attacks, rejected bona fide)`` per threshold."""
    att_sorted = np.sort(att)
    bf_sorted = np.sort(bf)
    missed = np.searchsorted(att_sorted, ts, side="left")
    rejected = bf.size - np.searchsorted(bf_sorted, ts, side="left")
    return missed, rejected


@dataclass
class DETCurve:
    thresholds: np.ndarray
    apcer: np.ndarray
    bpcer: np.ndarray

    def rows(self):
        return list(zip(self.thresholds.tolist(), self.apcer.tolist(), self.bpcer.tolist()))


def det_curve(bf_scores, attack_scores):
    """One (APCER, BPCER) point per distinct threshold, ascending threshold."""
    bf, att = _sides(bf_scores, attack_scores)
    ts = thresholds(bf, att)
    missed, rejected = error_counts(bf, att, ts)
    return DETCurve(ts, missed / att.size, rejected / bf.size)


def eer(bf_scores, attack_scores):
    """Equal error rate by the midpoint rule at the closest crossing.

    The threshold minimising ``|APCER - BPCER|`` is chosen (lowest on
    ties) and ``(APCER + BPCER) / 2`` returned.
    """
    return eer_point(bf_scores, attack_scores)[0]


def eer_point(bf_scores, attack_scores):
    curve = det_curve(bf_scores, attack_scores)
    gap = np.abs(curve.apcer - curve.bpcer)
    k = int(np.argmin(gap))
    return (curve.apcer[k] + curve.bpcer[k]) / 2, curve.thresholds[k]


def acer_at_apcer(bf_scores, attack_scores, apcer_target=0.05):
    """``(ACER, BPCER)`` at the lowest-BPCER threshold with APCER <= target.

    ACER uses the target as its APCER term, so ``BPCER = 2 ACER - target``.
    """
    curve = det_curve(bf_scores, attack_scores)
    ok = np.flatnonzero(curve.apcer <= apcer_target)
    # APCER rises with the threshold; BPCER falls, so take the largest one
    bpcer = float(curve.bpcer[ok[-1]])
    return (apcer_target + bpcer) / 2, bpcer


def mpa_eer(species_eers):
    """EER of the most powerful attack: the maximum over species."""
    vals = list(species_eers.values()) if isinstance(species_eers, dict) else list(species_eers)
    if not vals:
        raise ValueError("no species EERs")
    return max(vals)
