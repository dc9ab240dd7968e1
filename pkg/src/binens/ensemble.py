"""AdaBoost over arbitrary classifiers: sample-weight ledger, member weights, weighted vote.

For two classes the member weight is ``0.5 ln((1 - e) / e)``; for ``K > 2``
the SAMME form ``ln((1 - e) / e) + ln(K - 1)`` is used.  Members vote with
hard argmax indicators by default; ``vote="soft"`` sums alpha-weighted class
probabilities instead (members without logits contribute one-hot rows, so the
two rules coincide for them).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

log = logging.getLogger(__name__)

ERROR_EPS = 1e-10
VOTE_RULES = ("hard", "soft")


class DegenerateTrainingError(RuntimeError):
    """Every boosting round produced a learner no better than chance."""

    def __init__(self, message: str, rounds: list):
        super().__init__(message)
        self.rounds = rounds


@dataclass
class SampleWeights:
    weights: np.ndarray
    round: int = 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1 or (self.weights < 0).any():
            raise ValueError("sample weights must be a non-negative vector")

    def __len__(self) -> int:
        return len(self.weights)


def init_sample_weights(m: int) -> SampleWeights:
    if m < 1:
        raise ValueError("need at least one example")
    return SampleWeights(np.full(m, 1.0 / m), round=1)


def weighted_error(predictions, labels, D: SampleWeights) -> float:
    """``sum_j D_j [pred_j != label_j]``."""
    pred = np.asarray(predictions)
    y = np.asarray(labels)
    w = D.weights if isinstance(D, SampleWeights) else np.asarray(D, dtype=np.float64)
    if not (pred.shape == y.shape == w.shape):
        raise ValueError(f"length mismatch: predictions {pred.shape}, labels {y.shape}, weights {w.shape}")
    return float(np.dot(w, pred != y))


def clamp_error(e: float) -> float:
    return min(max(e, ERROR_EPS), 1.0 - ERROR_EPS)


def model_weight(e: float, K: int = 2) -> float:
    e = clamp_error(e)
    if K == 2:
        return 0.5 * math.log((1.0 - e) / e)
    return math.log((1.0 - e) / e) + math.log(K - 1)


def is_degenerate(e: float, K: int) -> bool:
    """True when the learner is no better than chance: ``e >= (K - 1) / K``."""
    return e >= (K - 1) / K


def update_sample_weights(D: SampleWeights, alpha: float, correct_mask) -> SampleWeights:
    """Multiply by ``exp(-alpha)`` where correct, ``exp(+alpha)`` where wrong, renormalize."""
    correct = np.asarray(correct_mask, dtype=bool)
    if correct.shape != D.weights.shape:
        raise ValueError(f"mask shape {correct.shape} does not match weights {D.weights.shape}")
    w = D.weights * np.where(correct, math.exp(-alpha), math.exp(alpha))
    return SampleWeights(w / w.sum(), round=D.round + 1)


# ---------------------------------------------------------------------------
# ensemble model and vote
# ---------------------------------------------------------------------------


@dataclass
class EnsembleModel:
    """Ordered (member, alpha) pairs; members expose ``predict(data) -> class ids``."""

    members: list
    num_classes: int
    diagnostics: list = field(default_factory=list)
    vote: str = "hard"

    @property
    def alphas(self) -> np.ndarray:
        return np.array([a for _, a in self.members], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.members)

    def predict(self, data, **kwargs) -> np.ndarray:
        return ensemble_predict(self, data, **kwargs)[0]


def vote(member_predictions, alphas, K: int) -> tuple[np.ndarray, np.ndarray]:
    """``score[x, k] = sum_i alpha_i [pred_i(x) == k]``; argmax with ties to the lowest class."""
    P = np.asarray(member_predictions)
    a = np.asarray(alphas, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != a.shape[0]:
        raise ValueError(f"expected [members, examples] predictions for {a.shape[0]} members, got {P.shape}")
    scores = np.zeros((P.shape[1], K), dtype=np.float64)
    for i in range(P.shape[0]):
        scores[np.arange(P.shape[1]), P[i]] += a[i]
    return scores.argmax(axis=1), scores


def soft_vote(member_probs, alphas) -> tuple[np.ndarray, np.ndarray]:
    """``score[x, k] = sum_i alpha_i p_i(k | x)``; argmax with ties to the lowest class."""
    Pr = np.asarray(member_probs, dtype=np.float64)
    a = np.asarray(alphas, dtype=np.float64)
    if Pr.ndim != 3 or Pr.shape[0] != a.shape[0]:
        raise ValueError(f"expected [members, examples, classes] probabilities for {a.shape[0]} members, "
                         f"got {Pr.shape}")
    scores = np.einsum("i,ixk->xk", a, Pr)
    return scores.argmax(axis=1), scores


def _member_probs(member, data, K: int, **kwargs) -> np.ndarray:
    if hasattr(member, "predict_logits"):
        z = np.asarray(member.predict_logits(data, **kwargs), dtype=np.float64)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    pred = np.asarray(member.predict(data, **kwargs))
    out = np.zeros((len(pred), K))
    out[np.arange(len(pred)), pred] = 1.0
    return out


def ensemble_predict(E: EnsembleModel, data, vote_rule: str | None = None, **kwargs) -> tuple[np.ndarray, np.ndarray]:
    """Weighted vote of all members on ``data``; returns (classes, scores).

    ``vote_rule`` overrides the ensemble's own ``vote`` setting.
    """
    if not E.members:
        raise ValueError("ensemble has no members")
    rule = vote_rule or E.vote
    if rule not in VOTE_RULES:
        raise ValueError(f"unknown vote rule {rule!r}; expected one of {VOTE_RULES}")
    if rule == "soft":
        probs = np.stack([_member_probs(m, data, E.num_classes, **kwargs) for m, _ in E.members])
        return soft_vote(probs, E.alphas)
    preds = np.stack([np.asarray(m.predict(data, **kwargs)) for m, _ in E.members])
    return vote(preds, E.alphas, E.num_classes)


# ---------------------------------------------------------------------------
# boosting loop
# ---------------------------------------------------------------------------


@dataclass
class RoundRecord:
    round: int
    attempt: int
    error: float
    alpha: float
    accepted: bool
    wall_clock: float
    note: str = ""


def adaboost_train(fit: Callable[[int, int, SampleWeights], Any], predict: Callable[[Any], np.ndarray],
                   labels, N: int, K: int, max_retries: int | None = None, vote: str = "hard") -> EnsembleModel:
    """Run N boosting rounds.

    ``fit(round, attempt, D)`` trains a fresh learner under sample weights
    ``D``; ``predict(learner)`` returns its class predictions on the full
    training set (aligned with ``labels`` / weight slots).

    A learner with ``e >= (K-1)/K`` is discarded, ``D`` is reset to uniform
    and the round is retried with the next attempt index (at most
    ``max_retries`` retries in total, default N).  A learner with
    ``e <= 1e-10`` gets the clamped maximum alpha and ends boosting early.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if vote not in VOTE_RULES:
        raise ValueError(f"unknown vote rule {vote!r}; expected one of {VOTE_RULES}")
    y = np.asarray(labels)
    m = len(y)
    retries_left = N if max_retries is None else max_retries
    D = init_sample_weights(m)
    members, records = [], []
    rnd, attempt = 1, 0
    while len(members) < N:
        t0 = time.perf_counter()
        learner = fit(rnd, attempt, D)
        pred = np.asarray(predict(learner))
        e = weighted_error(pred, y, D)
        elapsed = time.perf_counter() - t0
        if is_degenerate(e, K):
            records.append(RoundRecord(rnd, attempt, e, 0.0, False, elapsed, "degenerate: discarded, weights reset"))
            log.info("round %d attempt %d degenerate (e=%.4f)", rnd, attempt, e)
            D = SampleWeights(init_sample_weights(m).weights, round=D.round)
            attempt += 1
            if retries_left == 0:
                break
            retries_left -= 1
            continue
        alpha = model_weight(e, K)
        members.append((learner, alpha))
        stop = e <= ERROR_EPS
        records.append(RoundRecord(rnd, attempt, e, alpha, True, elapsed, "perfect learner: stop" if stop else ""))
        log.info("round %d: e=%.4f alpha=%.4f", rnd, e, alpha)
        if stop:
            break
        D = update_sample_weights(D, alpha, pred == y)
        rnd += 1
        attempt = 0
    if not members:
        raise DegenerateTrainingError(
            f"all {len(records)} boosting attempts were degenerate (errors {[round(r.error, 4) for r in records]})",
            records)
    return EnsembleModel(members, K, records, vote)


# ---------------------------------------------------------------------------
# decision stumps: a cheap weak learner for sanity checks
# ---------------------------------------------------------------------------


@dataclass
class DecisionStump:
    feature: int
    threshold: float
    left: int
    right: int

    def predict(self, X, **_) -> np.ndarray:
        X = np.asarray(X)
        return np.where(X[:, self.feature] <= self.threshold, self.left, self.right)


def fit_stump(X, y, w, K: int = 2) -> DecisionStump:
    """Exhaustive weighted-error-minimizing axis-aligned stump."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    w = np.asarray(w, dtype=np.float64)
    best, best_err = None, np.inf
    onehot = np.zeros((len(y), K))
    onehot[np.arange(len(y)), y] = w
    total = onehot.sum(axis=0)
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        cum = np.cumsum(onehot[order], axis=0)                 # class mass with x <= xs[i]
        cuts = np.nonzero(np.diff(xs) > 0)[0]
        cand = np.concatenate([cuts, [len(xs) - 1]])
        left_mass = cum[cand]
        right_mass = total - left_mass
        err = (left_mass.sum(1) - left_mass.max(1)) + (right_mass.sum(1) - right_mass.max(1))
        i = int(np.argmin(err))
        if err[i] < best_err - 1e-15:
            best_err = err[i]
            j = cand[i]
            thr = xs[j] if j == len(xs) - 1 else 0.5 * (xs[j] + xs[j + 1])
            best = DecisionStump(f, float(thr), int(left_mass[i].argmax()), int(right_mass[i].argmax()))
    return best
