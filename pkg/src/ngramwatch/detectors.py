"""Window aggregation and the distribution-based detectors (SB, EWMA, PEWMA).

The bit stream is cut into tumbling windows of W consecutive match tests;
X_t counts the matches (zeros) in window t.  Under trained-normal behavior
X_t ~ Binomial(W, p_hat) ~= N(W*p_hat, W*p_hat*(1-p_hat)), and all three
detectors flag a window as anomalous when X_t falls below a lower bound of
the form mean - m*sigma.  Matching in abundance is healthy, so the test is
one-sided: X_t above the mean never alerts.

SB uses the fixed training-time moments.  EWMA re-estimates the mean (and,
through a second recursion on X^2, the standard deviation) with
exponentially decaying history weight alpha.  PEWMA additionally damps each
update by the likelihood of the observation, so outliers perturb the
tracked mean less.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple

from .ngrams import MatchBitStream

log = logging.getLogger(__name__)

DETECTOR_KINDS = ("sb", "ewma", "pewma")

# Default history weights; PEWMA runs closer to 1 because likelihood
# damping already slows its updates.
DEFAULT_ALPHA = {"ewma": 0.97, "pewma": 0.99}
DEFAULT_M = 3.0
DEFAULT_BETA = 1.0

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class WindowSample(NamedTuple):
    """Aggregated outcome of W consecutive match tests."""

    t: int            # window index, 0-based
    x: int            # match count in the window, 0 <= x <= w
    w: int            # window size
    origin: int       # seq index of the window's last underlying event

    @property
    def mismatch_rate(self) -> float:
        return 1.0 - self.x / self.w


class Verdict(NamedTuple):
    """Detector output for one window.

    ``score`` is the threshold margin (threshold - X): positive when
    anomalous, so normal <=> score <= 0.
    """

    normal: bool
    score: float
    t: int
    origin: int


def windowed_counts(stream: MatchBitStream, w: int) -> list[WindowSample]:
    """Aggregate a bit stream into tumbling windows of w tests.

    Windows do not overlap; a trailing partial window is dropped.
    """
    if w < 1:
        raise ValueError(f"window size must be >= 1, got {w}")
    bits = stream.bits
    samples = []
    for t in range(len(bits) // w):
        chunk = bits[t * w : (t + 1) * w]
        samples.append(
            WindowSample(t=t, x=w - sum(chunk), w=w, origin=stream.origin[t * w + w - 1])
        )
    return samples


def sb_threshold(w: int, p_hat: float, m: float = DEFAULT_M) -> float:
    """Static lower bound on the match count: W*p_hat - m*sqrt(W*p_hat*(1-p_hat)).

    A window is normal iff X >= this threshold.
    """
    _check_params(w, p_hat, m)
    return w * p_hat - m * math.sqrt(w * p_hat * (1.0 - p_hat))


def min_window_size(n: int, p_hat: float, m: float = DEFAULT_M) -> int:
    """Smallest window size able to absorb the worst-case mismatch burst.

    A single never-seen n-gram of entirely novel syscalls can cause up to
    2n-1 consecutive mismatches, so a normal-state window must tolerate at
    least that many: the returned W is the smallest integer satisfying

        W - (W*p_hat - m*sqrt(W*p_hat*(1-p_hat))) >= 2n - 1.

    The left side grows monotonically in W, so the solution is found by
    bisection over an exponentially grown bracket.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    _check_params(1, p_hat, m)
    target = 2 * n - 1

    def slack(w: int) -> float:
        return w - (w * p_hat - m * math.sqrt(w * p_hat * (1.0 - p_hat)))

    lo, hi = 1, 1
    while slack(hi) < target:
        lo, hi = hi, hi * 2
    while lo < hi:
        mid = (lo + hi) // 2
        if slack(mid) >= target:
            hi = mid
        else:
            lo = mid + 1
    return lo


def _check_params(w: int, p_hat: float, m: float) -> None:
    if w < 1:
        raise ValueError(f"window size must be >= 1, got {w}")
    if not (0.0 < p_hat < 1.0):
        raise ValueError(f"p_hat must be in (0, 1), got {p_hat}")
    if m < 0:
        raise ValueError(f"m must be >= 0, got {m}")


def sb_step(sample: WindowSample, p_hat: float, m: float = DEFAULT_M) -> Verdict:
    score = sb_threshold(sample.w, p_hat, m) - sample.x
    return Verdict(normal=score <= 0.0, score=score, t=sample.t, origin=sample.origin)


@dataclass(frozen=True)
class EwmaState:
    """Running moment estimates for the EWMA detector.

    ``mean`` tracks E(X_t); ``mean_sq`` tracks E(X_t^2) through the same
    recursion, which yields the localized standard deviation estimate
    sigma = sqrt(E(X^2) - E(X)^2).  ``sigma`` stores the estimate used in
    the latest verdict, for inspection and plotting.
    """

    mean: float
    mean_sq: float
    sigma: float
    alpha: float
    m: float = DEFAULT_M

    @classmethod
    def initial(cls, w: int, p_hat: float, alpha: float | None = None,
                m: float = DEFAULT_M) -> "EwmaState":
        """Start from the training-implied binomial moments, so the first
        windows are judged against the trained normal."""
        if alpha is None:
            alpha = DEFAULT_ALPHA["ewma"]
        _check_params(w, p_hat, m)
        _check_alpha(alpha)
        mean = w * p_hat
        var = w * p_hat * (1.0 - p_hat)
        return cls(mean=mean, mean_sq=mean * mean + var, sigma=math.sqrt(var),
                   alpha=alpha, m=m)


@dataclass(frozen=True)
class PewmaState(EwmaState):
    """EWMA state plus likelihood damping parameters.

    ``beta`` weights the damping (0 disables it, recovering EWMA exactly);
    ``p_hat_cap`` caps the modeled observation probability at the recorded
    training match rate.
    """

    beta: float = DEFAULT_BETA
    p_hat_cap: float = 0.99

    @classmethod
    def initial(cls, w: int, p_hat: float, alpha: float | None = None,
                beta: float = DEFAULT_BETA, m: float = DEFAULT_M) -> "PewmaState":
        if alpha is None:
            alpha = DEFAULT_ALPHA["pewma"]
        _check_params(w, p_hat, m)
        _check_alpha(alpha)
        if not (0.0 <= beta <= 1.0):
            raise ValueError(f"beta must be in [0, 1], got {beta}")
        mean = w * p_hat
        var = w * p_hat * (1.0 - p_hat)
        return cls(mean=mean, mean_sq=mean * mean + var, sigma=math.sqrt(var),
                   alpha=alpha, m=m, beta=beta, p_hat_cap=p_hat)


def _check_alpha(alpha: float) -> None:
    if not (0.0 <= alpha < 1.0):
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")


def _prior_sigma(state: EwmaState) -> float:
    """Localized std-dev estimate from the state *before* the new sample."""
    var = state.mean_sq - state.mean * state.mean
    if var < 0.0:
        # Numerical drift only; the recursions keep E(X^2) >= E(X)^2 in
        # exact arithmetic.  Clamp rather than propagate a NaN.
        log.debug("clamping negative variance estimate %.3e to 0", var)
        var = 0.0
    return math.sqrt(var)


def _damped_step(state: EwmaState, sample: WindowSample, weight: float,
                 sigma: float) -> tuple[Verdict, float, float]:
    # Single shared update path: PEWMA with beta=0 must be bit-identical to
    # EWMA, which requires the exact same floating-point operation order.
    x = float(sample.x)
    mean = weight * state.mean + (1.0 - weight) * x
    score = (mean - state.m * sigma) - x
    mean_sq = weight * state.mean_sq + (1.0 - weight) * (x * x)
    verdict = Verdict(normal=score <= 0.0, score=score, t=sample.t,
                      origin=sample.origin)
    return verdict, mean, mean_sq


def ewma_step(state: EwmaState, sample: WindowSample) -> tuple[Verdict, EwmaState]:
    """One EWMA update: verdict against mean - m*sigma, then moment update.

    sigma comes from the state prior to this sample; the mean in the
    verdict is the freshly updated one.  One-sided: X above the mean is
    never anomalous.
    """
    sigma = _prior_sigma(state)
    verdict, mean, mean_sq = _damped_step(state, sample, state.alpha, sigma)
    return verdict, replace(state, mean=mean, mean_sq=mean_sq, sigma=sigma)


def pewma_step(state: PewmaState, sample: WindowSample) -> tuple[Verdict, PewmaState]:
    """One PEWMA update: like EWMA but the history weight becomes
    alpha*(1 - beta*P_t), where P_t is the standard-normal density of the
    sample's z-score capped at p_hat.

    Unlikely samples (P_t ~ 0) barely move the tracked moments; a zero
    sigma defines z = 0 so constant streams stay well-behaved.
    """
    sigma = _prior_sigma(state)
    z = 0.0 if sigma == 0.0 else (float(sample.x) - state.mean) / sigma
    p_t = min(INV_SQRT_2PI * math.exp(-0.5 * z * z), state.p_hat_cap)
    weight = state.alpha * (1.0 - state.beta * p_t)
    verdict, mean, mean_sq = _damped_step(state, sample, weight, sigma)
    return verdict, replace(state, mean=mean, mean_sq=mean_sq, sigma=sigma)


def run_detector(kind: str, samples: Iterable[WindowSample], *, w: int,
                 p_hat: float, alpha: float | None = None,
                 beta: float = DEFAULT_BETA, m: float = DEFAULT_M) -> list[Verdict]:
    """Fold one of the distribution-based detectors over a window stream.

    State threading is internal and deterministic; SB is stateless and
    simply compares each window against the fixed threshold.
    """
    kind = kind.lower()
    if kind == "sb":
        threshold = sb_threshold(w, p_hat, m)
        return [
            Verdict(normal=threshold - s.x <= 0.0, score=threshold - s.x,
                    t=s.t, origin=s.origin)
            for s in samples
        ]
    if kind == "ewma":
        state = EwmaState.initial(w, p_hat, alpha, m)
        step = ewma_step
    elif kind == "pewma":
        state = PewmaState.initial(w, p_hat, alpha, beta, m)
        step = pewma_step
    else:
        raise ValueError(f"unknown detector kind {kind!r}")
    verdicts = []
    for sample in samples:
        verdict, state = step(state, sample)
        verdicts.append(verdict)
    return verdicts
