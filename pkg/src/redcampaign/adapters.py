"""Tool-boundary contracts: scan execution and the RPC console.

The console contract is deliberately small (create/write/read/destroy)
so the built-in target simulator and a live RPC client are drop-in
substitutes; the engine cannot tell which one it is talking to.

Scan lines coming out of a model are untrusted text.  They are extracted,
tokenized with POSIX word-splitting, and rejected outright if they carry
shell metacharacters - nothing un-tokenized ever reaches a process
boundary.
"""

from __future__ import annotations

import enum
import shlex
import subprocess
import time
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Mapping, Protocol

TIMEOUT_MARKER = "[!] scan timed out"
WINDOW_MARKER = "[!] execution window elapsed"
ELISION_MARKER = "[...trimmed...]"

DEFAULT_POLL_INTERVAL = 0.5
DEFAULT_GRACE = 2.0
DEFAULT_TAIL_CAP = 50

_SCAN_COMMANDS = ("nmap", "ping")
_METACHARACTERS = set(";|&$`<>")


class AdapterError(Exception):
    pass


class TokenizeError(AdapterError):
    """Unbalanced quoting or otherwise untokenizable input."""


class InjectionError(AdapterError):
    """Shell metacharacters in a scan line; refused before execution."""


class TransportError(AdapterError):
    """The executor or console is unreachable."""


class SessionNotFoundError(AdapterError):
    pass


@dataclass(frozen=True)
class ScanInvocation:
    """A tokenized scan command plus its timeout."""

    argv: tuple[str, ...]
    timeout: float = 30.0

    def __post_init__(self) -> None:
        if not self.argv:
            raise AdapterError("empty scan argv")
        head = self.argv[0]
        if head == "sudo":
            if len(self.argv) < 2 or self.argv[1] != "nmap":
                raise AdapterError("sudo is only allowed in front of nmap")
        elif head not in _SCAN_COMMANDS:
            raise AdapterError(f"not a recognized scan command: {head!r}")

    @property
    def target(self) -> str:
        return self.argv[-1]


def extract_tool_line(text: str) -> str | None:
    """First line of a completion that is a plain nmap/sudo nmap/ping command.

    Prose, code fences, and shell-prompt echoes are skipped; anything else
    means there is no usable line.
    """
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("```"):
            continue
        if line.startswith("$ ") or line.startswith("# "):
            line = line[2:].strip()
        first = line.split(None, 1)[0] if line else ""
        if first == "sudo":
            rest = line.split(None, 2)
            if len(rest) >= 2 and rest[1] == "nmap":
                return line
            continue
        if first in _SCAN_COMMANDS:
            return line
    return None


def tokenize_shell(line: str) -> list[str]:
    """POSIX word splitting: quotes and backslashes, no expansion of any kind."""
    if not line:
        raise TokenizeError("cannot tokenize an empty line")
    try:
        return shlex.split(line, posix=True)
    except ValueError as exc:
        raise TokenizeError(f"cannot tokenize {line!r}: {exc}") from None


@dataclass(frozen=True)
class ScanOutput:
    text: str
    timed_out: bool = False


class ScanRunner(Protocol):
    def run(self, inv: ScanInvocation) -> ScanOutput: ...


class SubprocessScanRunner:
    """Runs the scan as a real subprocess. No shell is ever involved."""

    def run(self, inv: ScanInvocation) -> ScanOutput:
        try:
            proc = subprocess.run(
                list(inv.argv),
                capture_output=True,
                text=True,
                timeout=inv.timeout,
            )
            return ScanOutput(proc.stdout + proc.stderr)
        except subprocess.TimeoutExpired as exc:
            partial = (exc.stdout or b"") if isinstance(exc.stdout, bytes) else (exc.stdout or "")
            if isinstance(partial, bytes):
                partial = partial.decode("utf-8", "replace")
            return ScanOutput(partial, timed_out=True)
        except FileNotFoundError as exc:
            raise TransportError(f"scan executor unavailable: {exc}") from None


def run_scan(inv: ScanInvocation, runner: ScanRunner) -> str:
    """Execute a validated scan and return its transcript.

    Timeouts yield whatever partial output exists plus a marker; shell
    metacharacters anywhere in the argv abort before anything runs.
    """
    for token in inv.argv:
        if _METACHARACTERS & set(token):
            raise InjectionError(f"shell metacharacter in scan argument {token!r}")
    output = runner.run(inv)
    if output.timed_out:
        return output.text + ("\n" if output.text and not output.text.endswith("\n") else "") + TIMEOUT_MARKER
    return output.text


# --- RPC console ------------------------------------------------------------


class RpcConsole(Protocol):
    """Console contract shared by the simulator and any live client."""

    def create(self) -> str: ...

    def write(self, console_id: str, text: str) -> None: ...

    def read(self, console_id: str) -> tuple[str, bool]:
        """Returns (accumulated output since last read, busy flag)."""
        ...

    def destroy(self, console_id: str) -> None: ...


class SessionSource(Protocol):
    def sessions_list(self) -> Mapping[int, "SessionDesc"]: ...


@dataclass(frozen=True)
class SessionDesc:
    kind: str  # "shell" | "meterpreter"
    info: str = ""


@dataclass(frozen=True)
class SessionInventory:
    sessions: Mapping[int, SessionDesc]

    def ids(self) -> frozenset[int]:
        return frozenset(self.sessions)


def poll_sessions(source: SessionSource) -> SessionInventory:
    """Snapshot of the current session inventory."""
    try:
        return SessionInventory(dict(source.sessions_list()))
    except AdapterError:
        raise
    except Exception as exc:  # transport wrapper for live clients
        raise TransportError(f"session poll failed: {exc}") from exc


def tail_trim(raw: str, cap: int) -> str:
    """Keep only the last ``cap`` lines, marking the elision when trimming."""
    if cap < 1:
        raise AdapterError("tail cap must be >= 1")
    lines = raw.splitlines()
    if len(lines) <= cap:
        return raw
    return "\n".join([ELISION_MARKER] + lines[-cap:])


_NOISE_PREFIXES: tuple[str, ...] | None = None


def default_noise_prefixes() -> tuple[str, ...]:
    global _NOISE_PREFIXES
    if _NOISE_PREFIXES is None:
        text = (
            resources.files("redcampaign.data")
            .joinpath("noise_prefixes.cfg")
            .read_text("utf-8")
        )
        _NOISE_PREFIXES = tuple(
            line.strip()
            for line in text.splitlines()
            if line.strip() and not line.startswith("#")
        )
    return _NOISE_PREFIXES


def filter_noise(transcript: str, prefixes: tuple[str, ...] | None = None) -> str:
    """Drop known banner/noise lines so prompts stay on signal."""
    if prefixes is None:
        prefixes = default_noise_prefixes()
    kept = [
        line
        for line in transcript.splitlines()
        if not any(line.startswith(p) for p in prefixes)
    ]
    return "\n".join(kept)


def _module_command_lines(inv) -> list[str]:
    lines = [f"use {inv.module_path}"]
    lines += [f"set {name} {value}" for name, value in inv.option_assignments]
    if inv.payload:
        lines.append(f"set PAYLOAD {inv.payload}")
    lines.append("run" if inv.module_path.startswith("auxiliary/") else "exploit")
    return lines


def execute_module(
    console: RpcConsole,
    inv,
    window: float,
    *,
    poll_interval: float = DEFAULT_POLL_INTERVAL,
    grace: float = DEFAULT_GRACE,
    tail_cap: int = DEFAULT_TAIL_CAP,
    noise_prefixes: tuple[str, ...] | None = None,
    sleep: Callable[[float], None] = time.sleep,
    monotonic: Callable[[], float] = time.monotonic,
) -> str:
    """Drive one normalized invocation through a console.

    Writes the use/set lines, then polls until the console goes idle or
    the execution window (plus a fixed grace period) runs out.  The
    returned transcript is noise-filtered and tail-trimmed.
    """
    try:
        console_id = console.create()
    except Exception as exc:
        raise TransportError(f"console unavailable: {exc}") from exc
    try:
        for line in _module_command_lines(inv):
            console.write(console_id, line)
        start = monotonic()
        chunks: list[str] = []
        while True:
            output, busy = console.read(console_id)
            if output:
                chunks.append(output)
            if not busy:
                break
            if monotonic() - start >= window + grace:
                chunks.append(WINDOW_MARKER)
                break
            sleep(poll_interval)
    finally:
        try:
            console.destroy(console_id)
        except Exception:
            pass
    transcript = filter_noise("".join(chunks), noise_prefixes)
    return tail_trim(transcript, tail_cap)


def run_session_command(
    console: RpcConsole,
    session_id: int,
    command: str,
    *,
    window: float = 30.0,
    poll_interval: float = DEFAULT_POLL_INTERVAL,
    grace: float = DEFAULT_GRACE,
    tail_cap: int = DEFAULT_TAIL_CAP,
    noise_prefixes: tuple[str, ...] | None = None,
    sleep: Callable[[float], None] = time.sleep,
    monotonic: Callable[[], float] = time.monotonic,
) -> str:
    """Run one command inside an established session via the console."""
    try:
        console_id = console.create()
    except Exception as exc:
        raise TransportError(f"console unavailable: {exc}") from exc
    try:
        console.write(console_id, f"sessions -i {session_id} -c {command}")
        start = monotonic()
        chunks: list[str] = []
        while True:
            output, busy = console.read(console_id)
            if output:
                chunks.append(output)
            if not busy:
                break
            if monotonic() - start >= window + grace:
                chunks.append(WINDOW_MARKER)
                break
            sleep(poll_interval)
    finally:
        try:
            console.destroy(console_id)
        except Exception:
            pass
    transcript = filter_noise("".join(chunks), noise_prefixes)
    return tail_trim(transcript, tail_cap)


class UpgradeResult(enum.Enum):
    UPGRADED = "upgraded"
    FAILED = "failed"


def upgrade_session(
    client,
    session_id: int,
    *,
    window: float = 30.0,
    poll_interval: float = DEFAULT_POLL_INTERVAL,
    sleep: Callable[[float], None] = time.sleep,
    monotonic: Callable[[], float] = time.monotonic,
) -> UpgradeResult:
    """Try to upgrade a raw shell session into a meterpreter session.

    ``client`` must speak both the console and session-inventory
    contracts.  Succeeds iff a new meterpreter session referencing the
    shell appears within the window; failure leaves the shell usable.
    """
    inventory = poll_sessions(client)
    desc = inventory.sessions.get(session_id)
    if desc is None:
        raise SessionNotFoundError(f"no session with id {session_id}")
    if desc.kind != "shell":
        raise AdapterError(f"session {session_id} is {desc.kind}, not a raw shell")

    before = inventory.ids()
    console_id = client.create()
    try:
        client.write(console_id, f"sessions -u {session_id}")
        client.read(console_id)
    finally:
        client.destroy(console_id)

    start = monotonic()
    while True:
        current = poll_sessions(client)
        for sid in sorted(current.ids() - before):
            candidate = current.sessions[sid]
            if candidate.kind == "meterpreter" and f"session {session_id}" in candidate.info:
                return UpgradeResult.UPGRADED
        if monotonic() - start >= window:
            return UpgradeResult.FAILED
        sleep(poll_interval)
