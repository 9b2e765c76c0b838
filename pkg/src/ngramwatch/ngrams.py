"""N-gram behavior profiles and the match/mismatch bit stream.

Training walks a trace in global event order, slices each execution
context's syscall stream into overlapping n-grams, match-tests every new
gram against the profile built so far and then inserts it.  The stream of
test outcomes (0 = match, 1 = mismatch) drives a stopping rule; once the
rule fires the profile is frozen and records p_hat, the expected per-test
match rate at completion.

Detection replays the same slicing against the frozen profile and emits a
per-context bit stream for the downstream window detectors.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

from .trace import ContextKey, Trace

NGram = tuple[str, ...]


def extract_ngrams(names: Sequence[str], n: int) -> list[NGram]:
    """All overlapping n-grams of a name sequence, in order (stride 1).

    Returns max(0, len(names) - n + 1) grams; n must be >= 1.
    """
    if n < 1:
        raise ValueError(f"n-gram length must be >= 1, got {n}")
    if len(names) < n:
        return []
    return [tuple(names[i : i + n]) for i in range(len(names) - n + 1)]


@dataclass
class NGramProfile:
    """The set of unique n-grams observed in training.

    Frozen profiles are immutable: detection-phase match tests never mutate
    ``grams``.  ``p_hat`` is clamped into (0, 1) so the binomial moments
    W*p_hat and W*p_hat*(1-p_hat) stay non-degenerate.
    """

    n: int
    grams: set[NGram] = field(default_factory=set)
    p_hat: float = 0.5
    training_events: int = 0
    frozen: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not (0.0 < self.p_hat < 1.0):
            raise ValueError(f"p_hat must be in (0, 1), got {self.p_hat}")

    def freeze(self, p_hat: float | None = None) -> None:
        if p_hat is not None:
            self.p_hat = p_hat
        if not (0.0 < self.p_hat < 1.0):
            raise ValueError(f"p_hat must be in (0, 1), got {self.p_hat}")
        self.frozen = True

    def add(self, gram: NGram) -> None:
        if self.frozen:
            raise ValueError("profile is frozen; cannot add grams")
        if len(gram) != self.n:
            raise ValueError(f"gram length {len(gram)} != n={self.n}")
        self.grams.add(gram)


def match_test(profile: NGramProfile, gram: NGram) -> int:
    """0 if the gram is in the profile, 1 otherwise (the mismatch bit)."""
    if len(gram) != profile.n:
        raise ValueError(f"gram length {len(gram)} != profile n={profile.n}")
    return 0 if gram in profile.grams else 1


@dataclass
class MatchBitStream:
    """Per-context sequence of match-test outcomes.

    ``bits[i]`` is the test result for the i-th sliding n-gram of the
    context's event stream; ``origin[i]`` is the seq index of the event
    that completed that gram.  Both sequences have equal length and origin
    is strictly increasing.
    """

    context: ContextKey
    bits: list[int] = field(default_factory=list)
    origin: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.bits)

    def mismatches(self) -> int:
        return sum(self.bits)


def emit_bitstream(profile: NGramProfile, trace: Trace) -> dict[ContextKey, MatchBitStream]:
    """Match-test every sliding n-gram of every context against a frozen profile.

    Contexts shorter than n yield empty streams.  The profile is not
    modified.
    """
    if not profile.frozen:
        raise ValueError("profile must be frozen before detection")
    n = profile.n
    grams = profile.grams
    windows: dict[ContextKey, deque] = {}
    streams: dict[ContextKey, MatchBitStream] = {}
    for ev in trace.events:
        ctx = ev.context
        win = windows.get(ctx)
        if win is None:
            win = windows[ctx] = deque(maxlen=n)
            streams[ctx] = MatchBitStream(ctx)
        win.append(ev.name)
        if len(win) == n:
            stream = streams[ctx]
            stream.bits.append(0 if tuple(win) in grams else 1)
            stream.origin.append(ev.seq)
    return streams


# -- training stopping rules -------------------------------------------------

@dataclass(frozen=True)
class TrainingCriterion:
    """Windowed stopping rule: complete at the first match test where the
    number of mismatches over the last ``window`` tests is strictly below
    ``max_mismatches`` (and at least ``min_events`` tests have been seen).

    ``min_events`` defaults to ``window``: the rule is only meaningful once
    a full window of history exists, otherwise the very first tests (with
    nearly empty mismatch history) would satisfy it vacuously.
    """

    window: int = 10_000
    max_mismatches: int = 23
    min_events: int | None = None

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not (0 <= self.max_mismatches < self.window):
            raise ValueError("max_mismatches must be in [0, window)")

    @property
    def floor(self) -> int:
        return self.window if self.min_events is None else self.min_events


@dataclass(frozen=True)
class CumulativeCriterion:
    """Cumulative stopping rule: complete at the first match test (past the
    ``min_events`` floor) where the cumulative match rate over all tests so
    far reaches ``target_rate``."""

    target_rate: float
    min_events: int = 1000

    def __post_init__(self):
        if not (0.0 < self.target_rate < 1.0):
            raise ValueError("target_rate must be in (0, 1)")
        if self.min_events < 1:
            raise ValueError("min_events must be >= 1")

    @property
    def floor(self) -> int:
        return self.min_events


StoppingRule = TrainingCriterion | CumulativeCriterion


@dataclass
class TrainingResult:
    """Outcome of a training run.

    ``completed`` is False when the trace ran out before the stopping rule
    fired; the partial profile is still returned (frozen, with p_hat
    measured over the available history) so the caller can accept it or
    extend training with more data.
    """

    profile: NGramProfile
    completed: bool
    tests: int
    window_mismatches: int
    cumulative_matches: int
    stop_seq: int | None

    @property
    def cumulative_match_rate(self) -> float:
        return self.cumulative_matches / self.tests if self.tests else 0.0


def train_profile(
    trace: Trace,
    n: int,
    criterion: StoppingRule | None = None,
    p_hat_override: float | None = None,
) -> TrainingResult:
    """Build an n-gram profile from a trace until the stopping rule fires.

    Events are consumed in global order; each context contributes a gram
    once its stream has n events.  Every gram is tested before insertion,
    so the mismatch history reflects novelty during training.  On
    completion p_hat records the measured match rate over the final
    criterion window (or the cumulative rate, for the cumulative rule)
    unless ``p_hat_override`` pins it, and the profile is frozen.
    """
    if criterion is None:
        criterion = TrainingCriterion()
    profile = NGramProfile(n=n)
    ctx_windows: dict[ContextKey, deque] = {}
    recent: deque = deque()  # last criterion-window bits (windowed rule only)
    window = criterion.window if isinstance(criterion, TrainingCriterion) else 0
    window_mismatches = 0
    tests = 0
    cum_matches = 0
    completed = False
    stop_seq = None
    events_consumed = 0

    for ev in trace.events:
        events_consumed += 1
        win = ctx_windows.get(ev.context)
        if win is None:
            win = ctx_windows[ev.context] = deque(maxlen=n)
        win.append(ev.name)
        if len(win) < n:
            continue
        gram = tuple(win)
        bit = 0 if gram in profile.grams else 1
        profile.grams.add(gram)
        tests += 1
        cum_matches += 1 - bit
        if window:
            recent.append(bit)
            window_mismatches += bit
            if len(recent) > window:
                window_mismatches -= recent.popleft()
        if tests >= criterion.floor and _rule_met(
            criterion, window_mismatches, tests, cum_matches
        ):
            completed = True
            stop_seq = ev.seq
            break

    profile.training_events = events_consumed
    if p_hat_override is not None:
        p_hat = p_hat_override
    elif isinstance(criterion, TrainingCriterion):
        span = min(window, tests) if tests else 0
        measured = (span - window_mismatches) / span if span else 0.0
        p_hat = _clamp_rate(measured, window)
    else:
        measured = cum_matches / tests if tests else 0.0
        p_hat = _clamp_rate(measured, max(tests, 2))
    profile.freeze(p_hat)
    return TrainingResult(
        profile=profile,
        completed=completed,
        tests=tests,
        window_mismatches=window_mismatches,
        cumulative_matches=cum_matches,
        stop_seq=stop_seq,
    )


def _rule_met(criterion, window_mismatches, tests, cum_matches) -> bool:
    if isinstance(criterion, TrainingCriterion):
        # "fewer than max_mismatches" is strict.
        return window_mismatches < criterion.max_mismatches
    return cum_matches / tests >= criterion.target_rate


def _clamp_rate(rate: float, span: int) -> float:
    # Keep p_hat inside (0, 1): treat an all-match (or all-mismatch) span
    # as having half a counterexample.
    lo = 0.5 / span
    return min(max(rate, lo), 1.0 - lo)


# -- profile persistence -------------------------------------------------------

def save_profile(profile: NGramProfile, path) -> None:
    """Write a profile file: header lines then one sorted gram per line.

    Grams are '/'-joined syscall names; sorting makes files canonical and
    diffable.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#n={profile.n}\n")
        fh.write(f"#p_hat={profile.p_hat!r}\n")
        fh.write(f"#grams={len(profile.grams)}\n")
        fh.write(f"#training_events={profile.training_events}\n")
        for gram in sorted(profile.grams):
            fh.write("/".join(gram) + "\n")


def load_profile(path) -> NGramProfile:
    header: dict[str, str] = {}
    grams: set[NGram] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                header[key] = value
                continue
            grams.add(tuple(line.split("/")))
    try:
        n = int(header["n"])
        p_hat = float(header["p_hat"])
    except KeyError as exc:
        raise ValueError(f"profile file missing header field {exc}") from None
    for gram in grams:
        if len(gram) != n:
            raise ValueError(f"profile gram {gram} does not have n={n} elements")
    profile = NGramProfile(
        n=n,
        grams=grams,
        p_hat=p_hat,
        training_events=int(header.get("training_events", 0)),
    )
    profile.freeze()
    return profile
