"""Metrics, protocol runners and fusion-weight grid search.

ACE follows the LivDet convention: the mean of the live error rate
(live scored above threshold) and the spoof error rate (spoof scored at
or below threshold), in percent. TDR@FDR caps the live false-detection
rate and reports the spoof detection rate at the smallest admissible
threshold; the sweep considers every observed score plus minus
infinity, with strict inequality for "exceeds".

Protocols pair train/test sensors into cells; each cell yields one
EvalReport and the summary row carries mean and sample standard
deviation across cells.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MetricError, ProtocolError

PROTOCOLS = ("cross-material", "cross-sensor")


@dataclass
class EvalReport:
    ace_percent: float
    tdr_at_fdr1_percent: float
    ferr_live_percent: float
    ferr_fake_percent: float
    roc: list = field(default_factory=list)  # (fdr %, tdr %) points
    protocol: str = ""
    train_sensor: str = ""
    test_sensor: str = ""
    n_live: int = 0
    n_spoof: int = 0

    def to_dict(self):
        return {
            "ace_percent": self.ace_percent,
            "tdr_at_fdr1_percent": self.tdr_at_fdr1_percent,
            "ferr_live_percent": self.ferr_live_percent,
            "ferr_fake_percent": self.ferr_fake_percent,
            "roc": [[float(a), float(b)] for a, b in self.roc],
            "protocol": self.protocol,
            "train_sensor": self.train_sensor,
            "test_sensor": self.test_sensor,
            "n_live": self.n_live,
            "n_spoof": self.n_spoof,
        }


def _split_classes(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape[0] != labels.shape[0]:
        raise MetricError(
            f"scores and labels differ in length: {scores.shape[0]} vs {labels.shape[0]}"
        )
    live = scores[labels == 0]
    spoof = scores[labels == 1]
    if live.size == 0 or spoof.size == 0:
        raise MetricError(
            f"both classes required, got {live.size} live and {spoof.size} spoof"
        )
    return live, spoof


def error_rates(scores, labels, threshold):
    """(live error fraction, spoof error fraction) at a fixed threshold."""
    live, spoof = _split_classes(scores, labels)
    ferr_live = float(np.mean(live > threshold))
    ferr_fake = float(np.mean(spoof <= threshold))
    return ferr_live, ferr_fake


def ace(scores, labels, threshold=0.5):
    """Average classification error in percent at the given threshold."""
    ferr_live, ferr_fake = error_rates(scores, labels, threshold)
    return 100.0 * (ferr_live + ferr_fake) / 2.0


def tdr_at_fdr(scores, labels, fdr_cap=0.01):
    """Spoof detection rate with the live false-detection rate capped.

    Returns (tdr percent, threshold). The threshold is the smallest
    candidate value (observed scores plus -inf) whose live exceed-rate
    stays within the cap; the exceed test is strict on both classes.
    """
    live, spoof = _split_classes(scores, labels)
    candidates = np.concatenate(([-np.inf], np.unique(np.concatenate((live, spoof)))))
    for tau in candidates:
        if np.mean(live > tau) <= fdr_cap:
            return 100.0 * float(np.mean(spoof > tau)), float(tau)
    raise MetricError("no admissible threshold found")  # unreachable: max score works


def roc(scores, labels):
    """Empirical ROC as (fdr %, tdr %) points ordered by increasing fdr."""
    live, spoof = _split_classes(scores, labels)
    candidates = np.concatenate(([-np.inf], np.unique(np.concatenate((live, spoof)))))
    points = [
        (100.0 * float(np.mean(live > tau)), 100.0 * float(np.mean(spoof > tau)))
        for tau in candidates
    ]
    points.sort(key=lambda p: (p[0], p[1]))
    return points


def evaluate_scores(
    scores, labels, threshold=0.5, protocol="", train_sensor="", test_sensor=""
):
    """Build a full EvalReport from one cell's scores and labels."""
    ferr_live, ferr_fake = error_rates(scores, labels, threshold)
    tdr, _ = tdr_at_fdr(scores, labels)
    labels_arr = np.asarray(labels)
    return EvalReport(
        ace_percent=100.0 * (ferr_live + ferr_fake) / 2.0,
        tdr_at_fdr1_percent=tdr,
        ferr_live_percent=100.0 * ferr_live,
        ferr_fake_percent=100.0 * ferr_fake,
        roc=roc(scores, labels),
        protocol=protocol,
        train_sensor=train_sensor,
        test_sensor=test_sensor,
        n_live=int(np.sum(labels_arr == 0)),
        n_spoof=int(np.sum(labels_arr == 1)),
    )


def check_protocol(split, protocol):
    """Validate a DatasetSplit against a protocol before any model runs."""
    if protocol not in PROTOCOLS:
        raise ProtocolError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    if protocol == "cross-material":
        train_mats = split.spoof_materials("train")
        test_mats = split.spoof_materials("test")
        shared = train_mats & test_mats
        if shared:
            raise ProtocolError(
                f"cross-material requires disjoint spoof materials; shared: {sorted(shared)}"
            )
        if not train_mats or not test_mats:
            raise ProtocolError("cross-material requires spoof materials declared on both splits")
    else:
        train_sensors = {s.sensor for s in split.train}
        test_sensors = {s.sensor for s in split.test}
        shared = train_sensors & test_sensors
        if shared:
            raise ProtocolError(
                f"cross-sensor requires disjoint sensors; shared: {sorted(shared)}"
            )


def cells_from_sensors(sensors):
    """All ordered train/test sensor pairs, e.g. 3 sensors -> 6 cells."""
    sensors = list(sensors)
    if len(sensors) < 2:
        raise ProtocolError(f"cross-sensor needs at least 2 sensors, got {len(sensors)}")
    if len(set(sensors)) != len(sensors):
        raise ProtocolError(f"duplicate sensor names: {sensors}")
    return [(a, b) for a, b in itertools.product(sensors, sensors) if a != b]


@dataclass
class ProtocolCell:
    """One train/test pairing with the test-set scores already computed."""

    train_sensor: str
    test_sensor: str
    scores: list
    labels: list


def summarize(reports):
    """Mean and sample standard deviation of ACE and TDR across cells."""
    aces = np.array([r.ace_percent for r in reports], dtype=np.float64)
    tdrs = np.array([r.tdr_at_fdr1_percent for r in reports], dtype=np.float64)

    def sd(a):
        return float(np.std(a, ddof=1)) if a.size > 1 else 0.0

    return {
        "ace_mean": float(aces.mean()),
        "ace_sd": sd(aces),
        "tdr_mean": float(tdrs.mean()),
        "tdr_sd": sd(tdrs),
        "n_cells": int(aces.size),
    }


def run_protocol(protocol, cells, threshold=0.5):
    """Evaluate every cell and assemble the report document.

    Cells must already respect the protocol: cross-sensor cells pair
    distinct sensors. Returns a dict ready for JSON serialization with
    "protocol", "cells" (EvalReport dicts) and "summary".
    """
    if protocol not in PROTOCOLS:
        raise ProtocolError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    cells = list(cells)
    if not cells:
        raise ProtocolError("protocol run needs at least one cell")
    if protocol == "cross-sensor":
        bad = [c for c in cells if c.train_sensor == c.test_sensor]
        if bad:
            raise ProtocolError(
                f"cross-sensor cells must pair distinct sensors, got "
                f"{[(c.train_sensor, c.test_sensor) for c in bad]}"
            )
    reports = [
        evaluate_scores(
            c.scores,
            c.labels,
            threshold=threshold,
            protocol=protocol,
            train_sensor=c.train_sensor,
            test_sensor=c.test_sensor,
        )
        for c in cells
    ]
    return {
        "protocol": protocol,
        "cells": [r.to_dict() for r in reports],
        "summary": summarize(reports),
    }


@dataclass
class GridSearchResult:
    weights: tuple
    best_ace: float
    n_evaluated: int


def grid_search_weights(score_triples, labels, step=0.1):
    """Exhaustive fusion-weight search over the cubic grid {0, step, .., 1}.

    Each triple is (global, spoof-map patch, live-map patch); the ACE of
    the weighted sum is taken at threshold 0.5 times the weight sum, so
    weights need not sum to one. Ties go to the lexicographically
    smallest triple (iteration order guarantees it).
    """
    if not 0.0 < step <= 1.0:
        raise ConfigError(f"step must lie in (0, 1], got {step}")
    triples = np.asarray(score_triples, dtype=np.float64)
    if triples.ndim != 2 or triples.shape[1] != 3:
        raise MetricError(f"expected (n, 3) score triples, got {triples.shape}")
    if triples.shape[0] == 0:
        raise MetricError("score triples are empty")
    labels_arr = np.asarray(labels)
    live_mask = labels_arr == 0
    spoof_mask = labels_arr == 1
    if not live_mask.any() or not spoof_mask.any():
        raise MetricError("both classes required for grid search")

    n_points = int(round(1.0 / step)) + 1
    values = [round(i * step, 10) for i in range(n_points)]
    best = None
    n_evaluated = 0
    for w_g in values:
        for w_sp in values:
            for w_lv in values:
                fused = w_g * triples[:, 0] + w_sp * triples[:, 1] + w_lv * triples[:, 2]
                thr = 0.5 * (w_g + w_sp + w_lv)
                a = 50.0 * (
                    float(np.mean(fused[live_mask] > thr))
                    + float(np.mean(fused[spoof_mask] <= thr))
                )
                n_evaluated += 1
                if best is None or a < best[1]:
                    best = ((w_g, w_sp, w_lv), a)
    return GridSearchResult(weights=best[0], best_ace=best[1], n_evaluated=n_evaluated)
