"""Prepackaged end-to-end experiment scenarios.

The synthetic "server" workload models request handlers as long phrases
with a shared entry head and a phrase-specific tail whose novel names are
spaced more and more tightly.  When a phrase is absent from the trained
profile, its occurrences therefore show up in the bit stream as a mismatch
burst that ramps up over a couple of aggregation windows instead of
slamming from zero to saturation.  That shape matters: the rate-prediction
filter can learn the escalation from an attack-free burn-in segment, so
recurring benign bursts stop alerting, while an injected attack, which
starts abruptly, still does.

Scenario layout (all single-context, seeded):

  training trace   -> n-gram profile          (held-out phrases excluded)
  burn-in trace    -> window rates -> filter  (full behavior, attack-free)
  detection trace  -> verdicts -> metrics     (full behavior + injected attack)

The statistical detectors run on the detection windows alone, initialized
from the profile's recorded match rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

from .detectors import (DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_M, Verdict,
                        WindowSample, run_detector, windowed_counts)
from .evaluate import RunMetrics, SweepRow, score_run
from .laf import LafConfig, LafModel, run_laf, train_laf
from .ngrams import (CumulativeCriterion, NGramProfile, TrainingCriterion,
                     emit_bitstream, extract_ngrams, train_profile)
from .synth import AttackSpec, BehaviorSpec, generate_unseen_normal, generate_normal, inject_attack
from .trace import AttackTruth, Trace

FIGURE_LEVELS = {"figure2": 0.9973, "figure3": 0.9545, "figure4": 0.8}

# Phrase-tail novelty spacing: gaps between consecutive phrase-specific
# names.  Wide gaps first (sparse mismatches), then tightening to a dense
# finish; with n=6 grams and W=20 windows this yields per-window mismatch
# rates that escalate roughly 0.3 -> 0.6 -> 1.0 across a burst, so an
# untrained handler announces itself in the rate stream before saturating.
RAMP_GAPS = (20, 20, 12, 10, 8, 6, 4, 2, 1, 1, 1)
HEAD = tuple(f"srv_entry_{i}" for i in range(8))
FILLERS = ("srv_loop_a", "srv_loop_b")


def _filler_run(count: int) -> list[str]:
    # Always phase-aligned (a, b, a, b, ...) so filler-only grams are shared
    # across all phrases.
    return [FILLERS[i % 2] for i in range(count)]


def ramp_phrase(tag: str) -> tuple[str, ...]:
    """One handler phrase: shared head, then a novelty-ramped tail."""
    names = list(HEAD)
    for j, gap in enumerate(RAMP_GAPS):
        names.extend(_filler_run(gap - 1))
        names.append(f"{tag}_u{j}")
    return tuple(names)


def variant_phrase(tag: str) -> tuple[str, ...]:
    """A mild behavior variant: one phrase-specific syscall amid shared
    names, so each occurrence mismatches exactly n grams."""
    return tuple(HEAD) + tuple(_filler_run(12) + [f"{tag}_u0"] + _filler_run(12))


def idle_phrase() -> tuple[str, ...]:
    """The hot idle loop; dominates the event volume, trivially profiled."""
    return tuple(HEAD) + tuple(_filler_run(8))


def server_behavior(seed: int, rare_handlers: int = 24,
                    variant_weight: float = 0.0045) -> BehaviorSpec:
    """Workload mix: a dominant idle loop, three hot handlers, a long tail
    of rare handlers, a few ultra-rare ones, and two very rarely exercised
    variant motifs.

    The variants carry the lowest weights, so generate_unseen_normal holds
    exactly them out: at full training they are the only benign mismatch
    source (an occasional shallow dip).  A profile trained to a lower
    cumulative match rate additionally misses the ultra-rare handlers, and
    at a low rate much of the rare-handler tail, whose untrained ramps then
    hammer the window detectors throughout detection.
    """
    phrases = [idle_phrase()]
    weights = [1.0 - 3 * 0.09 - 0.30 - 6 * 0.003 - variant_weight]
    for i in range(3):
        phrases.append(ramp_phrase(f"hot{i}"))
        weights.append(0.09)
    for i in range(rare_handlers):
        phrases.append(ramp_phrase(f"rare{i}"))
        weights.append(0.30 / rare_handlers)
    for i in range(6):
        phrases.append(ramp_phrase(f"vrare{i}"))
        weights.append(0.003)
    for i in range(2):
        phrases.append(variant_phrase(f"extra{i}"))
        weights.append(variant_weight / 2)
    return BehaviorSpec.make(phrases, weights, contexts=1, seed=seed)


def distinct_gram_count(spec: BehaviorSpec, n: int) -> int:
    """Exact number of distinct n-grams the workload can ever produce.

    Every phrase starts with the shared head, so boundary grams depend only
    on the predecessor phrase: the union of sliding windows over each
    phrase extended by the head prefix covers the full inventory.
    """
    grams = set()
    prefix = HEAD[: n - 1]
    for phrase in spec.phrases:
        grams.update(extract_ngrams(tuple(phrase) + prefix, n))
    return len(grams)


@dataclass
class PreparedScenario:
    """A fully built scenario: profile, window streams, ground truth."""

    name: str
    seed: int
    w: int
    n: int
    training_level: float | None
    p_hat: float
    profile: NGramProfile
    burnin_samples: list[WindowSample]
    detect_samples: list[WindowSample]
    attacks: list[AttackTruth]
    laf_config: LafConfig
    _laf: LafModel | None = field(default=None, repr=False)

    def laf_model(self) -> LafModel:
        """Offline-train the filter on the burn-in windows (cached)."""
        if self._laf is None:
            self._laf = train_laf(self.burnin_samples, self.laf_config)
        return self._laf

    def run(self, kind: str, alpha: float | None = None,
            beta: float = DEFAULT_BETA, m: float = DEFAULT_M,
            ) -> tuple[list[Verdict], RunMetrics]:
        kind = kind.lower()
        if kind == "laf":
            verdicts, _ = run_laf(self.laf_model(), self.detect_samples)
        else:
            verdicts = run_detector(kind, self.detect_samples, w=self.w,
                                    p_hat=self.p_hat, alpha=alpha, beta=beta, m=m)
        metrics = score_run(verdicts, self.attacks, grace=self.w)
        return verdicts, metrics

    def run_cell(self, kind: str, **params) -> SweepRow:
        alpha = params.get("alpha")
        beta = params.get("beta", DEFAULT_BETA)
        m = params.get("m", DEFAULT_M)
        _, metrics = self.run(kind, alpha=alpha, beta=beta, m=m)
        if kind.lower() == "laf":
            alpha = beta = None
        elif alpha is None:
            alpha = DEFAULT_ALPHA[kind.lower()]
        return SweepRow(
            scenario=self.name, detector=kind.lower(), w=self.w, alpha=alpha,
            beta=beta if kind.lower() == "pewma" else None, m=m,
            training_level=self.training_level, seed=self.seed, metrics=metrics,
        )


def _single_context_samples(profile: NGramProfile, trace: Trace, w: int,
                            ) -> list[WindowSample]:
    streams = emit_bitstream(profile, trace)
    if len(streams) != 1:
        raise ValueError(f"expected a single-context trace, got {len(streams)}")
    (stream,) = streams.values()
    return windowed_counts(stream, w)


def build_figure_scenario(level: float, seed: int, w: int = 20, n: int = 6,
                          burnin_windows: int = 2400,
                          detect_windows: int = 1800,
                          onset_fraction: float = 0.6,
                          drip_intensity: float = 0.15,
                          laf_config: LafConfig | None = None,
                          name: str | None = None) -> PreparedScenario:
    """Slow-drip scenario at a given training completeness level.

    Trains the profile to the cumulative match-rate target, burn-in and
    detection traces use the full behavior (held-out motifs included), and
    a drip attack starts ``onset_fraction`` of the way into the detection
    trace, running to its end.
    """
    spec = server_behavior(seed)
    train_spec, detect_spec = generate_unseen_normal(spec, holdout=2 / len(spec.phrases))

    distinct = distinct_gram_count(spec, n)
    train_len = int(distinct / (1.0 - level) * 1.3) + 30_000
    train_trace = generate_normal(replace(train_spec, seed=seed * 1000 + 1), train_len)
    # The floor keeps a lucky idle-heavy opening from satisfying a low
    # target within the first few hundred tests.
    result = train_profile(train_trace, n,
                           CumulativeCriterion(target_rate=level, min_events=4000))
    if not result.completed:
        raise RuntimeError(
            f"training trace of {train_len} events did not reach level {level}")

    burnin_trace = generate_normal(
        replace(detect_spec, seed=seed * 1000 + 2), burnin_windows * w + n - 1)
    burnin = _single_context_samples(result.profile, burnin_trace, w)

    detect_len = detect_windows * w + n - 1
    onset = int(detect_len * onset_fraction)
    normal_detect = generate_normal(
        replace(detect_spec, seed=seed * 1000 + 3), detect_len)
    attacked = inject_attack(normal_detect, AttackSpec(
        kind="slow-drip", onset=onset, intensity=drip_intensity,
        seed=seed * 1000 + 4))
    detect = _single_context_samples(result.profile, attacked, w)

    if laf_config is None:
        laf_config = LafConfig(hidden_size=16, epochs=40, learning_rate=0.1,
                               bptt_len=16, seed=seed, online_rate=0.05,
                               tau_margin_stds=2.0)
    return PreparedScenario(
        name=name or f"drip-{level}", seed=seed, w=w, n=n, training_level=level,
        p_hat=result.profile.p_hat, profile=result.profile,
        burnin_samples=burnin, detect_samples=detect,
        attacks=attacked.metadata.attacks, laf_config=laf_config,
    )


def compact_behavior(seed: int) -> BehaviorSpec:
    """A small workload with no long tail: quickly profiled to completion."""
    phrases = [idle_phrase()]
    weights = [0.40]
    for i in range(3):
        phrases.append(ramp_phrase(f"hot{i}"))
        weights.append(0.12)
    for i in range(6):
        phrases.append(ramp_phrase(f"aux{i}"))
        weights.append(0.04)
    return BehaviorSpec.make(phrases, weights, contexts=1, seed=seed)


def build_burst_scenario(seed: int, w: int, n: int = 6,
                         burnin_windows: int = 500,
                         laf_config: LafConfig | None = None) -> PreparedScenario:
    """Two fork-bomb style bursts on a fully profiled workload.

    Training uses the windowed stopping rule and covers the whole behavior
    (no held-out motifs), so pre-onset detection windows are mismatch-free.
    Attack onsets are aligned to event positions o with (o - (n-1)) a
    multiple of 400, which is a common multiple of the window sizes swept
    in the aggregation study: every window size sees the attack start
    exactly at a window boundary and the measured delays are comparable.
    """
    spec = compact_behavior(seed)

    train_trace = generate_normal(replace(spec, seed=seed * 1000 + 11), 24_000)
    result = train_profile(
        train_trace, n, TrainingCriterion(window=3000, max_mismatches=7))
    if not result.completed:
        raise RuntimeError("burst-scenario training did not complete")

    burnin_trace = generate_normal(
        replace(spec, seed=seed * 1000 + 12), burnin_windows * w + n - 1)
    burnin = _single_context_samples(result.profile, burnin_trace, w)

    detect_len = 16_000
    normal_detect = generate_normal(
        replace(spec, seed=seed * 1000 + 13), detect_len)
    first = inject_attack(normal_detect, AttackSpec(
        kind="burst-novel", onset=4000 + n - 1, duration=600, intensity=1.0,
        seed=seed * 1000 + 14))
    attacked = inject_attack(first, AttackSpec(
        kind="burst-novel", onset=9600 + n - 1, duration=1200, intensity=0.5,
        seed=seed * 1000 + 15))
    detect = _single_context_samples(result.profile, attacked, w)

    if laf_config is None:
        laf_config = LafConfig(hidden_size=16, epochs=30, learning_rate=0.1,
                               bptt_len=16, seed=seed, online_rate=0.05)
    return PreparedScenario(
        name=f"burst-w{w}", seed=seed, w=w, n=n, training_level=None,
        p_hat=result.profile.p_hat, profile=result.profile,
        burnin_samples=burnin, detect_samples=detect,
        attacks=attacked.metadata.attacks, laf_config=laf_config,
    )


def build_named_scenario(name: str, seed: int, w: int = 20) -> PreparedScenario:
    """CLI entry point: figure2/figure3/figure4 drip scenarios by training
    level, or figure1 for the aggregation burst study at a given W."""
    if name in FIGURE_LEVELS:
        return build_figure_scenario(FIGURE_LEVELS[name], seed, w=w, name=name)
    if name == "figure1":
        return build_burst_scenario(seed, w=w)
    raise ValueError(f"unknown scenario {name!r} "
                     f"(expected figure1..figure4)")
