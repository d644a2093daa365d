"""Rational-attacker payoffs and most-powerful-attack selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PayoffParams:
    """Attacker/defender payoff constants and per-species statistics.

    ``detection`` holds each species' detection rate ``p_i``; ``costs`` the
    attack cost ``c_i`` (zero by default, the worst case).
    """

    detection: list
    r: float = 1.0
    c_f: float = 1.0
    c_d: float = 0.0
    c_m: float = 1.0
    costs: list = None
    names: list = None

    def __post_init__(self):
        self.detection = [float(p) for p in self.detection]
        if self.costs is None:
            self.costs = [0.0] * len(self.detection)
        self.costs = [float(c) for c in self.costs]
        if self.r <= 0:
            raise ValueError("reward r must be > 0")
        if self.c_f <= 0:
            raise ValueError("cost of failure c_f must be > 0")
        if len(self.costs) != len(self.detection):
            raise ValueError("costs and detection rates differ in length")
        if any(c < 0 for c in self.costs):
            raise ValueError("attack costs must be >= 0")
        if any(not 0.0 <= p <= 1.0 for p in self.detection):
            raise ValueError("detection rates must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d):
        keys = ("detection", "r", "c_f", "c_d", "c_m", "costs", "names")
        return cls(**{k: d[k] for k in keys if k in d})


def attacker_payoff(params, i):
    """u_i = r (1 - p_i) - c_f p_i - c_i."""
    p = params.detection[i]
    return params.r * (1.0 - p) - params.c_f * p - params.costs[i]


def approx_attacker_payoff(params, i):
    """Payoff with the constant reward dropped: -p_i (r + c_f) - c_i.

    With zero costs this ranks species exactly like ``-p_i``.
    """
    p = params.detection[i]
    return -p * (params.r + params.c_f) - params.costs[i]


def select_mpa(params):
    """Most powerful attack: ``(index, payoff)``; ties go to the lowest index."""
    if not params.detection:
        raise ValueError("empty attack menu")
    best, best_u = 0, attacker_payoff(params, 0)
    for i in range(1, len(params.detection)):
        u = attacker_payoff(params, i)
        if u > best_u:
            best, best_u = i, u
    return best, best_u


@dataclass(frozen=True)
class Decision:
    attack: bool
    species: int | None
    payoff: float


ABSTAIN_PAYOFF = 0.0


def attack_or_abstain(params):
    """Attack with the MPA only if its payoff strictly beats abstaining."""
    i, u = select_mpa(params)
    if u > ABSTAIN_PAYOFF:
        return Decision(True, i, u)
    return Decision(False, None, ABSTAIN_PAYOFF)


def defender_payoff(params, p_i):
    """v_i = -c_d - c_m (1 - p_i)."""
    return -params.c_d - params.c_m * (1.0 - p_i)


@dataclass
class AttackerCategory:
    probability: float
    menu: list
    performance: float | None = None


def expected_performance(categories, detection=None):
    """Probability-weighted worst-case detector performance over categories.

    A category's performance is its explicit ``performance`` or, given
    per-species ``detection`` rates, the minimum rate over its menu.
    """
    total = sum(c.probability for c in categories)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"category probabilities sum to {total}, not 1")
    acc = 0.0
    for cat in categories:
        perf = cat.performance
        if perf is None:
            if detection is None or not cat.menu:
                raise ValueError("category needs a performance or a menu with detection rates")
            perf = min(detection[i] for i in cat.menu)
        acc += cat.probability * perf
    return acc


def analyse(spec):
    """Evaluate a JSON-style game description (used by the CLI)."""
    params = PayoffParams.from_dict(spec)
    n = len(params.detection)
    names = params.names or [str(i) for i in range(n)]
    i, u = select_mpa(params) if n else (None, None)
    decision = attack_or_abstain(params) if n else None
    out = {
        "attacker_payoffs": {names[k]: attacker_payoff(params, k) for k in range(n)},
        "defender_payoffs": {names[k]: defender_payoff(params, params.detection[k])
                             for k in range(n)},
        "mpa": {"index": i, "name": names[i] if i is not None else None, "payoff": u},
        "decision": {"attack": decision.attack, "species": decision.species,
                     "payoff": decision.payoff} if decision else None,
    }
    if "categories" in spec:
        cats = [AttackerCategory(c["probability"], c.get("menu", []), c.get("performance"))
                for c in spec["categories"]]
        out["expected_performance"] = expected_performance(cats, params.detection)
    return out
