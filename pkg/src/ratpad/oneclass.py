"""Attack-agnostic one-class detector.

Two anomaly measures, each scored against a Gaussian fitted on
development bona fide data: the aggregated video log-likelihood (low is
anomalous) and the anomaly energy over the tail of the standardised
feature vector (high is anomalous).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .features import STD_FLOOR, AnomalyFeature

LOW = "low"
HIGH = "high"


def tail_size(length, tail_fraction):
    # guard against ceil(0.1 * 30) == 4 style round-off
    return max(1, math.ceil(tail_fraction * length - 1e-9))


def anomaly_energy(feature, tail_fraction=0.10):
    """Euclidean norm over the last ``ceil(tail_fraction * (m + 1))`` dims."""
    if isinstance(feature, AnomalyFeature):
        if not feature.standardized:
            raise ValueError("anomaly energy requires a standardized feature")
        vec = feature.vector()
    else:
        vec = np.asarray(feature, dtype=np.float64)
    return float(np.linalg.norm(vec[-tail_size(len(vec), tail_fraction):]))


def anomaly_energies(rows, tail_fraction=0.10):
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    return np.linalg.norm(rows[:, -tail_size(rows.shape[1], tail_fraction):], axis=1)


@dataclass(frozen=True)
class GaussianScorer:
    mean: float
    std: float
    anomalous: str  # LOW or HIGH

    @classmethod
    def fit(cls, scores, anomalous):
        s = np.asarray(scores, dtype=np.float64)
        if s.size < 2:
            raise ValueError("need at least 2 validation scores")
        if anomalous not in (LOW, HIGH):
            raise ValueError(f"orientation must be {LOW!r} or {HIGH!r}")
        mean = float(s.mean())
        std = float(np.sqrt(((s - mean) ** 2).mean()))
        return cls(mean, max(std, STD_FLOOR), anomalous)

    def deviation(self, score):
        z = (np.asarray(score, dtype=np.float64) - self.mean) / self.std
        if self.anomalous == LOW:
            z = -z
        return np.maximum(z, 0.0)


def bf_likelihood(scorer, score):
    """One-sided, peak-normalised Gaussian likelihood of being bona fide."""
    p = np.exp(-0.5 * scorer.deviation(score) ** 2)
    return float(p) if np.ndim(p) == 0 else p


@dataclass(frozen=True)
class OneClassModel:
    loglik: GaussianScorer
    energy: GaussianScorer
    tail_fraction: float = 0.10

    def __post_init__(self):
        if not 0.0 < self.tail_fraction < 1.0:
            raise ValueError("tail_fraction must lie in (0, 1)")

    def as_dict(self):
        return {
            "tail_fraction": self.tail_fraction,
            "loglik": {"mean": self.loglik.mean, "std": self.loglik.std},
            "energy": {"mean": self.energy.mean, "std": self.energy.std},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(GaussianScorer(d["loglik"]["mean"], d["loglik"]["std"], LOW),
                   GaussianScorer(d["energy"]["mean"], d["energy"]["std"], HIGH),
                   d["tail_fraction"])


def fit_one_class(features, aggregated_ll, tail_fraction=0.10):
    """Fit both scorers on development bona fide statistics only."""
    energies = anomaly_energies(_rows(features), tail_fraction)
    ll = np.asarray(aggregated_ll, dtype=np.float64)
    if len(energies) != len(ll):
        raise ValueError("features and log-likelihoods differ in length")
    return OneClassModel(GaussianScorer.fit(ll, LOW), GaussianScorer.fit(energies, HIGH),
                         tail_fraction)


def _rows(features):
    if len(features) and isinstance(features[0], AnomalyFeature):
        if not all(f.standardized for f in features):
            raise ValueError("anomaly energy requires standardized features")
        return np.stack([f.vector() for f in features])
    return np.atleast_2d(np.asarray(features, dtype=np.float64))


@dataclass(frozen=True)
class OneClassScore:
    p_ll: float
    p_energy: float
    p_pa: float


def one_class_score(model, feature, aggregated_ll):
    """Attack probability ``1 - mean(p_BF)`` for a single probe."""
    p_ll = bf_likelihood(model.loglik, aggregated_ll)
    p_en = bf_likelihood(model.energy, anomaly_energy(feature, model.tail_fraction))
    return OneClassScore(p_ll, p_en, 1.0 - 0.5 * (p_ll + p_en))


def one_class_scores(model, rows, aggregated_ll):
    """Vectorised scores: arrays ``(p_ll, p_energy, p_pa)``."""
    p_ll = np.exp(-0.5 * model.loglik.deviation(aggregated_ll) ** 2)
    p_en = np.exp(-0.5 * model.energy.deviation(anomaly_energies(rows, model.tail_fraction)) ** 2)
    return p_ll, p_en, 1.0 - 0.5 * (p_ll + p_en)
