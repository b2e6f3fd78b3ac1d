"""Stage-scoped command memory.

Each exploit/exfiltration iteration is remembered as exactly three fields:
the stage-local iteration index, the command issued, and whether it worked.
Raw tool output never enters the log; the point is a compact, high-signal
history that can be injected verbatim into generation prompts so failed
commands are not repeated.

A verbatim conversation buffer is included as the comparison baseline.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

from .stage import MEMORY_STAGES, Stage

CMD_LENGTH_CAP = 512


class MemoryLogError(Exception):
    """Invalid entry or malformed serialized log."""


class OrderingError(MemoryLogError):
    """Iteration indices must be strictly increasing within a stage."""


class UnsupportedStageError(MemoryLogError):
    """Only EXPLOIT and EXFILTRATE keep logs."""


class EntryResult(enum.Enum):
    SUCCESS = "success"
    FAIL = "fail"


@dataclass(frozen=True)
class MemoryEntry:
    iter: int
    cmd: str
    result: EntryResult

    def __post_init__(self) -> None:
        if self.iter < 1:
            raise MemoryLogError(f"iteration index must be >= 1, got {self.iter}")
        if not self.cmd:
            raise MemoryLogError("cmd must be non-empty")
        if len(self.cmd) > CMD_LENGTH_CAP:
            raise MemoryLogError(
                f"cmd exceeds the {CMD_LENGTH_CAP}-character cap ({len(self.cmd)})"
            )


@dataclass
class StageLog:
    stage: Stage
    entries: list[MemoryEntry] = field(default_factory=list)

    def last_iter(self) -> int:
        return self.entries[-1].iter if self.entries else 0


@dataclass
class GlobalMemory:
    exploit_log: StageLog = field(default_factory=lambda: StageLog(Stage.EXPLOIT))
    exfiltrate_log: StageLog = field(default_factory=lambda: StageLog(Stage.EXFILTRATE))

    def log_for(self, stage: Stage) -> StageLog:
        if stage is Stage.EXPLOIT:
            return self.exploit_log
        if stage is Stage.EXFILTRATE:
            return self.exfiltrate_log
        raise UnsupportedStageError(f"no log is kept for stage {stage.value}")


def append_entry(mem: GlobalMemory, stage: Stage, entry: MemoryEntry) -> GlobalMemory:
    """Append to the given stage's log; iteration indices must advance."""
    log = mem.log_for(stage)
    if entry.iter <= log.last_iter():
        raise OrderingError(
            f"iteration {entry.iter} does not advance past {log.last_iter()} "
            f"in the {stage.value} log"
        )
    log.entries.append(entry)
    return mem


def render_stage_log(mem: GlobalMemory, stage: Stage) -> str:
    """Canonical JSON for one stage: fixed key order, no extra whitespace.

    Byte-deterministic for a given log, so rendered output can be compared
    exactly against recorded traces.
    """
    return render_entries(mem.log_for(stage).entries)


def render_entries(entries: list[MemoryEntry]) -> str:
    parts = []
    for e in entries:
        cmd = json.dumps(e.cmd, ensure_ascii=False)
        parts.append(f'{{"iter":{e.iter},"cmd":{cmd},"result":"{e.result.value}"}}')
    return "[" + ",".join(parts) + "]"


def parse_stage_log(text: str) -> list[MemoryEntry]:
    """Inverse of :func:`render_stage_log`; parse errors name the entry index."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MemoryLogError(f"malformed log JSON: {exc}") from None
    if not isinstance(data, list):
        raise MemoryLogError("log JSON must be an array")
    entries: list[MemoryEntry] = []
    last = 0
    for i, obj in enumerate(data):
        if not isinstance(obj, dict) or set(obj) != {"iter", "cmd", "result"}:
            raise MemoryLogError(f"entry {i}: keys must be exactly iter, cmd, result")
        if not isinstance(obj["iter"], int) or isinstance(obj["iter"], bool) or obj["iter"] < 1:
            raise MemoryLogError(f"entry {i}: iter must be a positive integer")
        if not isinstance(obj["cmd"], str):
            raise MemoryLogError(f"entry {i}: cmd must be a string")
        try:
            result = EntryResult(obj["result"])
        except ValueError:
            raise MemoryLogError(f"entry {i}: result must be 'success' or 'fail'") from None
        if obj["iter"] <= last:
            raise OrderingError(f"entry {i}: iteration indices must strictly increase")
        last = obj["iter"]
        try:
            entries.append(MemoryEntry(obj["iter"], obj["cmd"], result))
        except MemoryLogError as exc:
            raise MemoryLogError(f"entry {i}: {exc}") from None
    return entries


def contains_failed(mem: GlobalMemory, stage: Stage, cmd: str) -> bool:
    """Whether ``cmd`` currently counts as failed in this stage.

    Latest outcome wins: a later success clears an earlier failure, so a
    command that eventually worked may be issued again.  Comparison is
    byte-exact; canonical formatting is the engine's job.
    """
    latest: EntryResult | None = None
    for entry in mem.log_for(stage).entries:
        if entry.cmd == cmd:
            latest = entry.result
    return latest is EntryResult.FAIL


def route_context(stage: Stage, mem: GlobalMemory) -> str | None:
    """The JSON to inject for a stage: only the active stage's own log.

    RECON gets nothing, ever, regardless of what memory holds.
    """
    if stage in MEMORY_STAGES:
        return render_stage_log(mem, stage)
    return None


def duplication_rate(commands: list[str]) -> float:
    """Fraction of commands identical to any earlier command in the list."""
    if not commands:
        return 0.0
    seen: set[str] = set()
    dupes = 0
    for cmd in commands:
        if cmd in seen:
            dupes += 1
        seen.add(cmd)
    return dupes / len(commands)


# --- persistence -----------------------------------------------------------


def persist_memory(mem: GlobalMemory) -> str:
    """One JSON object holding both stage logs, written after each iteration."""
    return (
        '{"EXPLOIT":'
        + render_stage_log(mem, Stage.EXPLOIT)
        + ',"EXFILTRATE":'
        + render_stage_log(mem, Stage.EXFILTRATE)
        + "}"
    )


def load_memory(text: str) -> GlobalMemory:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MemoryLogError(f"malformed memory file: {exc}") from None
    if not isinstance(data, dict) or set(data) != {"EXPLOIT", "EXFILTRATE"}:
        raise MemoryLogError("memory file must hold exactly EXPLOIT and EXFILTRATE logs")
    mem = GlobalMemory()
    mem.exploit_log.entries.extend(parse_stage_log(json.dumps(data["EXPLOIT"])))
    mem.exfiltrate_log.entries.extend(parse_stage_log(json.dumps(data["EXFILTRATE"])))
    return mem


# --- conversation-buffer baseline -------------------------------------------


class Speaker(enum.Enum):
    AGENT = "agent"
    TOOL = "tool"


@dataclass
class TranscriptBuffer:
    """Verbatim conversational history, uncapped.

    Exists only to demonstrate the cost/duplication contrast against the
    structured stage logs; it offers no result tracking and therefore no
    duplicate suppression.
    """

    turns: list[tuple[Speaker, str]] = field(default_factory=list)

    def append(self, speaker: Speaker, text: str) -> None:
        self.turns.append((speaker, text))

    def render(self) -> str:
        return "\n".join(f"{speaker.value}: {text}" for speaker, text in self.turns)
