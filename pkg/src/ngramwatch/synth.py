"""Seeded synthetic workload generation and attack injection.

Normal behavior is modeled as weighted random selection of syscall
phrases (fixed motifs, like request-handler execution paths), optionally
interleaved across several execution contexts.  Attacks are injected with
exact ground truth: a burst replaces a span of events with never-seen
syscall names, a drip keeps inserting them sparsely until the end of the
trace.  Everything is deterministic given the seeds.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Sequence

from .trace import AttackTruth, ContextKey, SyscallEvent, Trace, TraceMetadata

ATTACK_NAME_PREFIX = "atk_"

BURST = "burst-novel"
DRIP = "slow-drip"
ATTACK_KINDS = (BURST, DRIP)


@dataclass(frozen=True)
class BehaviorSpec:
    """Normal-workload description: phrases, weights, contexts, seed."""

    phrases: tuple[tuple[str, ...], ...]
    weights: tuple[float, ...]
    contexts: int = 1
    interleave: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.phrases:
            raise ValueError("need at least one phrase")
        if len(self.weights) != len(self.phrases):
            raise ValueError("weights and phrases must have equal length")
        if any(len(p) < 1 for p in self.phrases):
            raise ValueError("phrases must be non-empty")
        if any(w <= 0 for w in self.weights):
            raise ValueError("weights must be positive")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {sum(self.weights)}")
        if self.contexts < 1:
            raise ValueError("contexts must be >= 1")
        if not (0.0 <= self.interleave <= 1.0):
            raise ValueError("interleave must be in [0, 1]")
        for p in self.phrases:
            for name in p:
                if name.startswith(ATTACK_NAME_PREFIX):
                    raise ValueError(
                        f"phrase name {name!r} collides with the reserved "
                        f"attack namespace {ATTACK_NAME_PREFIX!r}")

    @staticmethod
    def make(phrases: Sequence[Sequence[str]], weights: Sequence[float] | None = None,
             contexts: int = 1, interleave: float = 0.0, seed: int = 0) -> "BehaviorSpec":
        """Convenience constructor; uniform weights when none are given."""
        tup = tuple(tuple(p) for p in phrases)
        if weights is None:
            weights = [1.0 / len(tup)] * len(tup)
        total = sum(weights)
        norm = tuple(w / total for w in weights)
        return BehaviorSpec(tup, norm, contexts, interleave, seed)


@dataclass(frozen=True)
class AttackSpec:
    """Attack injection parameters.

    ``kind`` is "burst-novel" (replace events for ``duration`` after the
    onset) or "slow-drip" (insert novel events from the onset to the end of
    the trace).  ``intensity`` is the per-event replacement probability for
    a burst, or the expected insertions per original event for a drip.
    ``seed`` drives the injection RNG so attacked traces are reproducible.
    """

    kind: str
    onset: int
    duration: int = 0
    intensity: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.onset < 0:
            raise ValueError("onset must be >= 0")
        if self.duration < 0:
            raise ValueError("duration must be >= 0")
        if not (0.0 < self.intensity <= 1.0):
            raise ValueError("intensity must be in (0, 1]")


def _context_key(i: int) -> ContextKey:
    return ContextKey(pid=1000 + i, tid=1000 + i)


def generate_normal(spec: BehaviorSpec, length: int, source: str = "synthetic") -> Trace:
    """Generate a normal trace of exactly ``length`` events.

    Phrases are drawn by weight; between phrases the active context
    switches with probability ``interleave``.  All events are annotated
    "normal".  Deterministic for a given spec (including its seed).
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = random.Random(spec.seed)
    events: list[SyscallEvent] = []
    ctx_index = 0
    while len(events) < length:
        if spec.contexts > 1 and rng.random() < spec.interleave:
            others = [i for i in range(spec.contexts) if i != ctx_index]
            ctx_index = rng.choice(others)
        phrase = rng.choices(spec.phrases, weights=spec.weights, k=1)[0]
        key = _context_key(ctx_index)
        for name in phrase:
            if len(events) >= length:
                break
            events.append(SyscallEvent(len(events), key.pid, key.tid, name, "normal"))
    return Trace(events, TraceMetadata(source=source, seed=spec.seed))


def generate_unseen_normal(spec: BehaviorSpec,
                           holdout: float) -> tuple[BehaviorSpec, BehaviorSpec]:
    """Split a behavior into (training spec, detection spec).

    round(holdout * len(phrases)) phrases are excluded from the training
    spec; the detection spec keeps the full behavior, so those motifs
    appear at detection time as recurring benign mismatch sources.  The
    lowest-weight phrases are held out (training observes the frequent
    behavior; it is the rarely exercised motifs that a finite observation
    window misses), with weight ties broken by a seeded shuffle.  A
    holdout that rounds to zero phrases returns the spec unchanged on both
    sides; a holdout that would leave no training phrases is an error.
    """
    if not (0.0 <= holdout < 1.0):
        raise ValueError("holdout must be in [0, 1)")
    count = len(spec.phrases)
    k = round(holdout * count)
    if k == 0:
        return spec, spec
    if k >= count:
        raise ValueError(f"holdout {holdout} leaves no training phrases")
    order = list(range(count))
    random.Random(spec.seed).shuffle(order)
    order.sort(key=lambda i: spec.weights[i])
    held = set(order[:k])
    keep = [i for i in range(count) if i not in held]
    kept_weight = sum(spec.weights[i] for i in keep)
    train = replace(
        spec,
        phrases=tuple(spec.phrases[i] for i in keep),
        weights=tuple(spec.weights[i] / kept_weight for i in keep),
    )
    return train, spec


def held_out_phrases(train: BehaviorSpec, detect: BehaviorSpec) -> list[tuple[str, ...]]:
    trained = set(train.phrases)
    return [p for p in detect.phrases if p not in trained]


def inject_attack(trace: Trace, attack: AttackSpec) -> Trace:
    """Return a new trace with the attack applied and ground truth recorded.

    The pre-onset prefix is identical to the input.  The event at the onset
    index is annotated "onset"; modified or inserted events after it are
    annotated "attack".  Burst: each event in [onset, onset+duration) is
    replaced by a fresh never-seen name with probability ``intensity``.
    Drip: after each original event from the onset on, a fresh novel event
    is inserted with probability ``intensity``, through the end of the
    trace.  Novel names live in the reserved "atk_<k>" namespace.
    """
    n = len(trace.events)
    if attack.onset >= n:
        raise ValueError(f"onset {attack.onset} beyond trace of {n} events")
    rng = random.Random(attack.seed)
    counter = 0

    def fresh() -> str:
        nonlocal counter
        counter += 1
        return f"{ATTACK_NAME_PREFIX}{counter - 1}"

    events: list[SyscallEvent] = []
    if attack.kind == BURST:
        stop = min(n, attack.onset + attack.duration)
        for ev in trace.events:
            annotation = ev.annotation
            name = ev.name
            if attack.onset <= ev.seq < stop and rng.random() < attack.intensity:
                name = fresh()
                annotation = "attack"
            if ev.seq == attack.onset and attack.duration > 0:
                annotation = "onset"
            events.append(SyscallEvent(len(events), ev.pid, ev.tid, name, annotation))
        # duration == 0 leaves the events untouched; the zero-length span
        # still documents the injection in the metadata.
        truth_end: int | None = min(n, attack.onset + attack.duration)
    else:  # slow drip, runs to end of trace
        for ev in trace.events:
            annotation = "onset" if ev.seq == attack.onset else ev.annotation
            events.append(SyscallEvent(len(events), ev.pid, ev.tid, ev.name, annotation))
            if ev.seq >= attack.onset and rng.random() < attack.intensity:
                events.append(
                    SyscallEvent(len(events), ev.pid, ev.tid, fresh(), "attack"))
        truth_end = None

    metadata = TraceMetadata(
        source=trace.metadata.source,
        seed=trace.metadata.seed,
        attacks=trace.metadata.attacks + [AttackTruth(attack.onset, truth_end)],
    )
    out = Trace(events, metadata)
    out.validate()
    return out


# -- spec config files -----------------------------------------------------------
#
# Line-oriented key = value format:
#
#     seed = 42
#     contexts = 2
#     interleave = 0.25
#     phrase = 0.3 : open read close
#     phrase = 0.7 : stat mmap write
#     attack = slow-drip onset=5000 intensity=0.05 seed=7
#
# Weights are normalized; '#' starts a comment.  The optional attack line
# uses kind plus key=value pairs (duration defaults to 0).

def parse_behavior_spec(stream: IO[str] | Iterable[str]) -> tuple[BehaviorSpec, AttackSpec | None]:
    seed = 0
    contexts = 1
    interleave = 0.0
    phrases: list[tuple[str, ...]] = []
    weights: list[float] = []
    attack: AttackSpec | None = None
    for lineno, raw in enumerate(stream, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        value = value.strip()
        if key == "seed":
            seed = int(value)
        elif key == "contexts":
            contexts = int(value)
        elif key == "interleave":
            interleave = float(value)
        elif key == "phrase":
            weight_part, sep2, names_part = value.partition(":")
            if not sep2:
                raise ValueError(f"line {lineno}: phrase needs 'weight : names'")
            names = tuple(names_part.split())
            if not names:
                raise ValueError(f"line {lineno}: phrase has no names")
            phrases.append(names)
            weights.append(float(weight_part))
        elif key == "attack":
            attack = _parse_attack_value(value, lineno)
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    if not phrases:
        raise ValueError("spec has no phrases")
    spec = BehaviorSpec.make(phrases, weights, contexts, interleave, seed)
    return spec, attack


def _parse_attack_value(value: str, lineno: int) -> AttackSpec:
    parts = value.split()
    if not parts:
        raise ValueError(f"line {lineno}: attack needs a kind")
    kwargs = {"kind": parts[0]}
    for item in parts[1:]:
        k, sep, v = item.partition("=")
        if not sep or k not in ("onset", "duration", "intensity", "seed"):
            raise ValueError(f"line {lineno}: bad attack field {item!r}")
        kwargs[k] = float(v) if k == "intensity" else int(v)
    if "onset" not in kwargs:
        raise ValueError(f"line {lineno}: attack needs onset=<index>")
    return AttackSpec(**kwargs)


def parse_behavior_spec_file(path) -> tuple[BehaviorSpec, AttackSpec | None]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_behavior_spec(fh)


def format_behavior_spec(spec: BehaviorSpec, attack: AttackSpec | None = None) -> str:
    lines = [
        f"seed = {spec.seed}",
        f"contexts = {spec.contexts}",
        f"interleave = {spec.interleave!r}",
    ]
    for phrase, weight in zip(spec.phrases, spec.weights):
        lines.append(f"phrase = {weight!r} : " + " ".join(phrase))
    if attack is not None:
        lines.append(
            f"attack = {attack.kind} onset={attack.onset} duration={attack.duration} "
            f"intensity={attack.intensity!r} seed={attack.seed}")
    return "\n".join(lines) + "\n"


def write_behavior_spec_file(spec: BehaviorSpec, path,
                             attack: AttackSpec | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_behavior_spec(spec, attack))
