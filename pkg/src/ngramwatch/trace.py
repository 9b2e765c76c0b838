"""Canonical syscall trace representation and file I/O.

A trace is an ordered list of syscall events, each tagged with the process
and thread that issued it.  Events from different execution contexts may
interleave arbitrarily; ordering is by a global sequence index, no
timestamps.  The on-disk format is line-oriented CSV:

    seq,pid,tid,name[,annotation]

with ``#`` comment lines.  Lines starting with ``#!`` carry machine-readable
trace metadata (source label, generator seed, attack ground truth) and are
re-emitted verbatim by the serializer, so serialize(parse(x)) round-trips
canonical files byte-exactly (modulo a trailing newline).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, NamedTuple

ANNOTATIONS = {"normal", "onset", "attack-onset", "attack"}
ONSET_TAGS = {"onset", "attack-onset"}
ATTACK_TAGS = {"onset", "attack-onset", "attack"}


class TraceParseError(ValueError):
    """Raised for malformed trace input; message names the offending line."""


class ContextKey(NamedTuple):
    """Execution context a syscall belongs to: (process id, thread id)."""

    pid: int
    tid: int


class SyscallEvent(NamedTuple):
    """One observed system call.

    ``seq`` is the global position in the trace (0-based, strictly
    increasing).  ``annotation`` is an optional ground-truth tag, one of
    ``normal``/``onset``/``attack`` (``attack-onset`` is accepted as a
    synonym for ``onset``); None when the input line had no tag.
    """

    seq: int
    pid: int
    tid: int
    name: str
    annotation: str | None = None

    @property
    def context(self) -> ContextKey:
        return ContextKey(self.pid, self.tid)

    @property
    def is_onset(self) -> bool:
        return self.annotation in ONSET_TAGS

    @property
    def is_attack(self) -> bool:
        return self.annotation in ATTACK_TAGS


class AttackTruth(NamedTuple):
    """Ground-truth attack span: [onset, end) in seq indices.

    ``end`` is None for attacks that run to the end of the trace.
    """

    onset: int
    end: int | None


@dataclass
class TraceMetadata:
    source: str | None = None
    seed: int | None = None
    attacks: list[AttackTruth] = field(default_factory=list)

    @property
    def onsets(self) -> list[int]:
        return [a.onset for a in self.attacks]


@dataclass
class Trace:
    """An immutable-by-convention ordered sequence of syscall events."""

    events: list[SyscallEvent]
    metadata: TraceMetadata = field(default_factory=TraceMetadata)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[SyscallEvent]:
        return iter(self.events)

    def names(self) -> list[str]:
        return [e.name for e in self.events]

    def validate(self) -> None:
        """Check structural invariants; raises ValueError on violation."""
        for i, ev in enumerate(self.events):
            if ev.seq != i:
                raise ValueError(f"event {i} has seq {ev.seq}, expected {i}")
            if not ev.name:
                raise ValueError(f"event {i} has empty syscall name")
        n = len(self.events)
        annotated = [e.seq for e in self.events if e.is_onset]
        # Zero-length spans document a no-op injection and have no
        # corresponding annotation.
        recorded = sorted(
            a.onset for a in self.metadata.attacks if a.end is None or a.end > a.onset
        )
        if annotated != recorded:
            raise ValueError(
                f"onset annotations {annotated} do not match metadata onsets {recorded}"
            )
        for a in self.metadata.attacks:
            if not (0 <= a.onset < n):
                raise ValueError(f"attack onset {a.onset} outside trace of {n} events")
            if a.end is not None and not (a.onset <= a.end <= n):
                raise ValueError(f"attack end {a.end} invalid for onset {a.onset}")


_NAME_RE = re.compile(r"^\S+$")


def parse_trace(stream: IO[str] | Iterable[str]) -> Trace:
    """Parse canonical trace lines into a Trace.

    Events must carry seq == 0..N-1 in file order.  ``#!`` lines populate
    metadata; other ``#`` lines and blank lines are ignored.  Raises
    TraceParseError naming the first malformed line.  Empty input yields an
    empty trace.
    """
    events: list[SyscallEvent] = []
    meta = TraceMetadata()
    meta_lines_seen = False
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        if line.startswith("#!"):
            _parse_meta_line(line, lineno, meta)
            meta_lines_seen = True
            continue
        if line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) not in (4, 5):
            raise TraceParseError(
                f"line {lineno}: expected 4 or 5 comma-separated fields, got {len(fields)}"
            )
        seq = _parse_int(fields[0], lineno, "seq")
        pid = _parse_int(fields[1], lineno, "pid")
        tid = _parse_int(fields[2], lineno, "tid")
        name = fields[3]
        if not _NAME_RE.match(name):
            raise TraceParseError(f"line {lineno}: bad syscall name {name!r}")
        annotation = None
        if len(fields) == 5:
            annotation = fields[4]
            if annotation not in ANNOTATIONS:
                raise TraceParseError(
                    f"line {lineno}: unknown annotation {annotation!r}"
                )
        if seq != len(events):
            raise TraceParseError(
                f"line {lineno}: seq {seq} out of order (expected {len(events)})"
            )
        events.append(SyscallEvent(seq, pid, tid, name, annotation))

    if not meta_lines_seen:
        # Fall back to annotation-derived ground truth for hand-made files.
        meta.attacks = _attacks_from_annotations(events)
    trace = Trace(events, meta)
    trace.validate()
    return trace


def parse_trace_file(path) -> Trace:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_trace(fh)


def _parse_int(text: str, lineno: int, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise TraceParseError(f"line {lineno}: {what} not an integer: {text!r}") from None


def _parse_meta_line(line: str, lineno: int, meta: TraceMetadata) -> None:
    parts = line[2:].split()
    if not parts:
        raise TraceParseError(f"line {lineno}: empty metadata directive")
    key, args = parts[0], parts[1:]
    if key == "source":
        meta.source = " ".join(args)
    elif key == "seed":
        if len(args) != 1:
            raise TraceParseError(f"line {lineno}: seed takes one value")
        meta.seed = _parse_int(args[0], lineno, "seed")
    elif key == "attack":
        if len(args) != 2:
            raise TraceParseError(f"line {lineno}: attack takes onset and end")
        onset = _parse_int(args[0], lineno, "attack onset")
        end = None if args[1] == "-" else _parse_int(args[1], lineno, "attack end")
        meta.attacks.append(AttackTruth(onset, end))
    else:
        raise TraceParseError(f"line {lineno}: unknown metadata key {key!r}")


def _attacks_from_annotations(events: list[SyscallEvent]) -> list[AttackTruth]:
    onsets = [e.seq for e in events if e.is_onset]
    attacks = []
    for i, onset in enumerate(onsets):
        bound = onsets[i + 1] if i + 1 < len(onsets) else len(events)
        tagged = [e.seq for e in events[onset:bound] if e.is_attack]
        end = (tagged[-1] + 1) if tagged else onset + 1
        attacks.append(AttackTruth(onset, end))
    return attacks


def serialize_trace(trace: Trace) -> str:
    """Render a trace in canonical form (metadata first, then event lines)."""
    out: list[str] = []
    meta = trace.metadata
    if meta.source is not None:
        out.append(f"#! source {meta.source}")
    if meta.seed is not None:
        out.append(f"#! seed {meta.seed}")
    for a in sorted(meta.attacks):
        end = "-" if a.end is None else str(a.end)
        out.append(f"#! attack {a.onset} {end}")
    for ev in trace.events:
        base = f"{ev.seq},{ev.pid},{ev.tid},{ev.name}"
        out.append(base if ev.annotation is None else base + "," + ev.annotation)
    return "\n".join(out) + ("\n" if out else "")


def write_trace_file(trace: Trace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_trace(trace))


def partition_by_context(trace: Trace) -> dict[ContextKey, list[SyscallEvent]]:
    """Split events into per-(pid, tid) streams, preserving trace order.

    Every event lands in exactly one partition; keys appear in order of
    first occurrence.
    """
    parts: dict[ContextKey, list[SyscallEvent]] = {}
    for ev in trace.events:
        parts.setdefault(ev.context, []).append(ev)
    return parts


# Best-effort strace import.  Lossy: argument text, timestamps, return
# values and signal/exit lines are dropped; when the trace was captured
# without -f there is no pid column and pid=tid=0 is used.
_STRACE_RE = re.compile(
    r"^(?:(?P<pid>\d+)\s+)?"            # optional pid column (strace -f)
    r"(?:\d+[:.]\d+[:.0-9]*\s+)?"       # optional timestamp
    r"(?:<\.\.\.\s+(?P<resumed>\w+)\s+resumed>|(?P<name>\w+)\()"
)


def import_strace(stream: IO[str] | Iterable[str], source: str = "strace") -> Trace:
    """Convert strace-like text output into a canonical Trace (best effort)."""
    events: list[SyscallEvent] = []
    for raw in stream:
        m = _STRACE_RE.match(raw.strip())
        if not m:
            continue
        name = m.group("name") or m.group("resumed")
        if not name:
            continue
        pid = int(m.group("pid")) if m.group("pid") else 0
        events.append(SyscallEvent(len(events), pid, pid, name))
    return Trace(events, TraceMetadata(source=source))
