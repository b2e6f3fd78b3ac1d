"""The campaign loop: tactic selection, budgets, guarding, and reporting.

One iteration is a full select-tactic, generate-command, execute,
translate-output cycle.  Stage budgets bound every campaign; the
duplicate guard keeps commands the memory says have failed away from the
executor; session handling upgrades raw shells when it can.  Reports are
canonical JSON so identical configurations produce identical bytes.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import adapters, pipeline
from .adapters import (
    ScanInvocation,
    SessionInventory,
    TransportError,
    UpgradeResult,
    poll_sessions,
    run_scan,
    run_session_command,
    tokenize_shell,
    upgrade_session,
)
from .kb import ModuleDatabase, SchemaNotFoundError, SchemaProvider, canonicalize_service
from .memory import (
    EntryResult,
    GlobalMemory,
    MemoryEntry,
    Speaker,
    TranscriptBuffer,
    append_entry,
    contains_failed,
    duplication_rate,
    persist_memory,
)
from .pipeline import GenerationError, Label, ModelBackend, PromptLibrary
from .rectify import (
    NetworkContext,
    Rectification,
    RectifyError,
    RectifyMethod,
    RectifyOutcome,
    NormalizationError,
    rectify,
)
from .stage import Stage

logger = logging.getLogger(__name__)

MEMORY_STRATEGIES = ("cmm", "cbm", "none")


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ReconFinding:
    ip: str
    port: int
    service: str
    version: str = ""

    def __post_init__(self) -> None:
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port}")
        if self.service != self.service.strip().lower():
            raise ValueError(f"service must be canonical: {self.service!r}")


@dataclass
class SessionInfo:
    id: int
    kind: str
    alive: bool = True


@dataclass
class CampaignConfig:
    target: str
    max_iters_per_stage: int = 30
    exec_window_default: float = 30.0
    exec_window_bruteforce: float = 180.0
    duplicate_retry_limit: int = 3
    listener_host: str = "10.0.2.15"
    listener_port: int = 4444
    wordlist: str | None = None
    flag_name: str = "flag.txt"
    use_rectifier: bool = True
    rectify_method: RectifyMethod = RectifyMethod.HYBRID
    rectify_threshold: float = 0.5
    memory_strategy: str = "cmm"
    tail_cap: int = 50

    def __post_init__(self) -> None:
        if self.max_iters_per_stage < 1:
            raise ConfigError("max_iters_per_stage must be >= 1")
        if self.exec_window_default <= 0 or self.exec_window_bruteforce <= 0:
            raise ConfigError("execution windows must be positive")
        if self.memory_strategy not in MEMORY_STRATEGIES:
            raise ConfigError(f"unknown memory strategy {self.memory_strategy!r}")
        if not self.target:
            raise ConfigError("target must be set")


@dataclass
class CampaignState:
    target: str
    memory: GlobalMemory = field(default_factory=GlobalMemory)
    current_stage: Stage = Stage.RECON
    global_iter: int = 0
    stage_iters: dict[Stage, int] = field(
        default_factory=lambda: {Stage.RECON: 0, Stage.EXPLOIT: 0, Stage.EXFILTRATE: 0}
    )
    recon_findings: list[ReconFinding] = field(default_factory=list)
    sessions: list[SessionInfo] = field(default_factory=list)
    objective_met: bool = False
    flag_data: str | None = None
    last_summary: str = ""
    transcript_buffer: TranscriptBuffer = field(default_factory=TranscriptBuffer)

    def active_session(self) -> SessionInfo | None:
        alive = [s for s in self.sessions if s.alive]
        for session in alive:
            if session.kind == "meterpreter":
                return session
        return alive[0] if alive else None


class Clock:
    """Injectable time source so simulated campaigns never really wait."""

    def monotonic(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class SimClock(Clock):
    def __init__(self) -> None:
        self.now = 0.0

    def monotonic(self) -> float:
        return self.now

    def sleep(self, seconds: float) -> None:
        self.now += seconds


@dataclass
class CampaignDeps:
    """Everything a campaign talks to; the simulator provides all of it."""

    backend: ModelBackend
    db: ModuleDatabase
    schema_provider: SchemaProvider
    host: object  # RpcConsole + SessionSource + ScanRunner
    prompts: PromptLibrary | None = None
    clock: Clock = field(default_factory=SimClock)
    out_dir: Path | None = None


@dataclass
class IterationRecord:
    global_iter: int
    stage: Stage
    command: str | None = None
    dispatched: bool = False
    label: str | None = None
    summary: str = ""
    window_seconds: float | None = None
    bruteforce: bool | None = None
    forced_fail: bool = False
    rectification: Rectification | None = None
    new_session_ids: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "iter": self.global_iter,
            "stage": self.stage.value,
            "command": self.command,
            "dispatched": self.dispatched,
            "label": self.label,
            "summary": self.summary,
            "window_seconds": self.window_seconds,
            "bruteforce": self.bruteforce,
            "forced_fail": self.forced_fail,
            "new_session_ids": list(self.new_session_ids),
        }


@dataclass
class CampaignReport:
    success: bool
    stages: dict[str, int]
    rectifications: list[dict]
    duplication_rate: float
    wall_seconds: float
    flag_sha256: str | None
    iterations: list[dict]
    target: str
    backend: str

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "stages": self.stages,
            "rectifications": self.rectifications,
            "duplication_rate": self.duplication_rate,
            "wall_seconds": self.wall_seconds,
            "flag_sha256": self.flag_sha256,
            "iterations": self.iterations,
            "target": self.target,
            "backend": self.backend,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# --- tactic selection ---------------------------------------------------------


def select_tactic(state: CampaignState) -> Stage:
    """Next stage from observable progress.

    Objective met ends the campaign; nothing known means scan; known
    services without a foothold mean exploit; a live session means
    exfiltrate.
    """
    if state.objective_met:
        return Stage.END_OF_CAMPAIGN
    if not state.recon_findings:
        return Stage.RECON
    if state.active_session() is not None:
        return Stage.EXFILTRATE
    return Stage.EXPLOIT


def execution_window(inv, cfg: CampaignConfig) -> float:
    """Brute-force modules get the long window, everything else the short one."""
    return cfg.exec_window_bruteforce if inv.bruteforce else cfg.exec_window_default


class GuardDecision(enum.Enum):
    ALLOW = "allow"
    REJECT = "reject"


def guard_duplicate(state: CampaignState, stage: Stage, cmd: str) -> GuardDecision:
    """Reject anything the stage memory currently records as failed."""
    if contains_failed(state.memory, stage, cmd):
        return GuardDecision.REJECT
    return GuardDecision.ALLOW


# --- findings ------------------------------------------------------------------

_PORT_LINE = re.compile(r"^(\d+)/(?:tcp|udp)\s+open\s+(\S+)\s*(.*)$")


def parse_scan_findings(transcript: str, target: str) -> list[ReconFinding]:
    findings = []
    for line in transcript.splitlines():
        m = _PORT_LINE.match(line.strip())
        if m:
            findings.append(
                ReconFinding(
                    ip=target,
                    port=int(m.group(1)),
                    service=canonicalize_service(m.group(2)),
                    version=m.group(3).strip(),
                )
            )
    return findings


# --- session handling -----------------------------------------------------------


def handle_sessions(
    state: CampaignState,
    inventory: SessionInventory,
    executor,
    *,
    clock: Clock | None = None,
    upgrade_window: float = 30.0,
) -> CampaignState:
    """Merge a session inventory snapshot and upgrade new raw shells.

    Upgrade failure is never fatal: the shell stays usable and later
    exfiltration simply speaks POSIX instead of native commands.
    """
    clock = clock or SimClock()
    known = {s.id for s in state.sessions}
    for session in state.sessions:
        if session.alive and session.id not in inventory.sessions:
            session.alive = False
    new_ids = sorted(set(inventory.sessions) - known)
    for sid in new_ids:
        desc = inventory.sessions[sid]
        state.sessions.append(SessionInfo(id=sid, kind=desc.kind))
        if desc.kind != "shell":
            continue
        result = upgrade_session(
            executor, sid, window=upgrade_window,
            sleep=clock.sleep, monotonic=clock.monotonic,
        )
        if result is UpgradeResult.UPGRADED:
            fresh = poll_sessions(executor)
            for new_sid in sorted(set(fresh.sessions) - {s.id for s in state.sessions}):
                state.sessions.append(
                    SessionInfo(id=new_sid, kind=fresh.sessions[new_sid].kind)
                )
        else:
            logger.info("session %d upgrade failed; keeping raw shell", sid)
    return state


# --- iteration helpers ----------------------------------------------------------


def _context_override(state: CampaignState, cfg: CampaignConfig) -> str | None:
    if cfg.memory_strategy == "cmm":
        return None  # pipeline routes the stage log itself
    if cfg.memory_strategy == "cbm":
        return state.transcript_buffer.render() or "(empty)"
    return "[]"


def _record_memory(
    state: CampaignState, stage: Stage, cmd: str, success: bool
) -> None:
    entry = MemoryEntry(
        iter=state.stage_iters[stage],
        cmd=cmd,
        result=EntryResult.SUCCESS if success else EntryResult.FAIL,
    )
    append_entry(state.memory, stage, entry)


def _note_turns(state: CampaignState, cfg: CampaignConfig, agent_text: str, tool_text: str) -> None:
    if cfg.memory_strategy == "cbm":
        state.transcript_buffer.append(Speaker.AGENT, agent_text)
        state.transcript_buffer.append(Speaker.TOOL, tool_text)


def _iterate_recon(
    state: CampaignState, cfg: CampaignConfig, deps: CampaignDeps, record: IterationRecord
) -> None:
    plan = pipeline.generate_recon_command(state, deps.backend, deps.prompts)
    line = plan.lines[0]
    record.command = line
    inv = ScanInvocation(tuple(tokenize_shell(line)), timeout=cfg.exec_window_default)
    transcript = run_scan(inv, deps.host)
    record.dispatched = True
    result = pipeline.translate_output(transcript, Stage.RECON, deps.backend, deps.prompts)
    record.label = result.label.value
    record.summary = result.summary
    state.last_summary = result.summary
    _note_turns(state, cfg, line, result.summary)
    if result.label is Label.SUCCESS:
        known = {(f.ip, f.port) for f in state.recon_findings}
        for finding in parse_scan_findings(transcript, state.target):
            if (finding.ip, finding.port) not in known:
                state.recon_findings.append(finding)
    _write_transcript(deps, record, transcript)


def _iterate_exploit(
    state: CampaignState, cfg: CampaignConfig, deps: CampaignDeps, record: IterationRecord
) -> None:
    override = _context_override(state, cfg)
    memory = state.memory if cfg.memory_strategy == "cmm" else None
    guard_on = cfg.memory_strategy == "cmm"

    plan = None
    module = None
    for attempt in range(cfg.duplicate_retry_limit + 1):
        plan = pipeline.select_exploit(
            state, memory, deps.db, deps.backend, deps.prompts,
            context_override=override, last_summary=state.last_summary,
        )
        module = plan.candidate_module
        record.rectification = None
        if cfg.use_rectifier:
            rect = rectify(module, deps.db, cfg.rectify_method, cfg.rectify_threshold)
            record.rectification = rect
            if rect.outcome is RectifyOutcome.NO_MATCH:
                record.command = module
                record.summary = f"no knowledge-base match for {module}"
                record.label = Label.FAIL.value
                _record_memory(state, Stage.EXPLOIT, module, success=False)
                return
            module = rect.matched_path
            plan = plan.with_module(module)
        if not guard_on or guard_duplicate(state, Stage.EXPLOIT, module) is GuardDecision.ALLOW:
            break
        plan = None
    if plan is None:
        # generator kept proposing a known-failed module; give up this cycle
        record.command = module
        record.forced_fail = True
        record.label = Label.FAIL.value
        record.summary = f"duplicate of failed module {module}; not re-issued"
        _record_memory(state, Stage.EXPLOIT, module, success=False)
        return

    record.command = module
    try:
        schema = deps.schema_provider.get_schema(module)
    except SchemaNotFoundError as exc:
        record.label = Label.FAIL.value
        record.summary = str(exc)
        _record_memory(state, Stage.EXPLOIT, module, success=False)
        return

    ctx = NetworkContext(
        rhost=plan.header.ip if plan.header else state.target,
        rport=plan.header.port if plan.header else None,
        lhost=cfg.listener_host,
        lport=cfg.listener_port,
        wordlist=cfg.wordlist,
    )
    try:
        inv = pipeline.setup_module(plan, schema, ctx, deps.backend, deps.prompts)
    except NormalizationError as exc:
        record.label = Label.FAIL.value
        record.summary = str(exc)
        _record_memory(state, Stage.EXPLOIT, module, success=False)
        return

    window = execution_window(inv, cfg)
    record.window_seconds = window
    record.bruteforce = inv.bruteforce
    try:
        transcript = adapters.execute_module(
            deps.host, inv, window,
            tail_cap=cfg.tail_cap,
            sleep=deps.clock.sleep, monotonic=deps.clock.monotonic,
        )
        record.dispatched = True
    except TransportError as exc:
        record.label = Label.FAIL.value
        record.summary = f"transport failure: {exc}"
        _record_memory(state, Stage.EXPLOIT, module, success=False)
        return

    result = pipeline.translate_output(transcript, Stage.EXPLOIT, deps.backend, deps.prompts)
    record.label = result.label.value
    record.summary = result.summary
    state.last_summary = result.summary
    _note_turns(state, cfg, "\n".join(plan.lines), result.summary)

    before = {s.id for s in state.sessions}
    inventory = poll_sessions(deps.host)
    handle_sessions(state, inventory, deps.host, clock=deps.clock)
    record.new_session_ids = tuple(
        s.id for s in state.sessions if s.id not in before
    )
    _record_memory(state, Stage.EXPLOIT, module, success=result.label is Label.SUCCESS)
    _write_transcript(deps, record, transcript)


def _payload_lines(transcript: str) -> list[str]:
    skip_prefixes = ("[-]", "[+]", "[*]", "[!]", adapters.ELISION_MARKER)
    return [
        line
        for line in transcript.splitlines()
        if line.strip() and not line.startswith(skip_prefixes)
    ]


def _iterate_exfil(
    state: CampaignState, cfg: CampaignConfig, deps: CampaignDeps, record: IterationRecord
) -> None:
    override = _context_override(state, cfg)
    memory = state.memory if cfg.memory_strategy == "cmm" else None
    guard_on = cfg.memory_strategy == "cmm"
    session = state.active_session()

    plan = None
    cmd = None
    for attempt in range(cfg.duplicate_retry_limit + 1):
        plan = pipeline.generate_exfil_command(
            state, memory, deps.backend, deps.prompts,
            context_override=override, last_summary=state.last_summary,
            flag_name=cfg.flag_name,
        )
        cmd = plan.lines[0]
        if not guard_on or guard_duplicate(state, Stage.EXFILTRATE, cmd) is GuardDecision.ALLOW:
            break
        plan = None
    if plan is None:
        record.command = cmd
        record.forced_fail = True
        record.label = Label.FAIL.value
        record.summary = f"duplicate of failed command {cmd!r}; not re-issued"
        _record_memory(state, Stage.EXFILTRATE, cmd, success=False)
        return

    record.command = cmd
    try:
        transcript = run_session_command(
            deps.host, session.id, cmd,
            window=cfg.exec_window_default, tail_cap=cfg.tail_cap,
            sleep=deps.clock.sleep, monotonic=deps.clock.monotonic,
        )
        record.dispatched = True
    except TransportError as exc:
        record.label = Label.FAIL.value
        record.summary = f"transport failure: {exc}"
        _record_memory(state, Stage.EXFILTRATE, cmd, success=False)
        return

    result = pipeline.translate_output(transcript, Stage.EXFILTRATE, deps.backend, deps.prompts)
    record.label = result.label.value
    record.summary = result.summary
    state.last_summary = result.summary
    _note_turns(state, cfg, cmd, result.summary)
    _record_memory(state, Stage.EXFILTRATE, cmd, success=result.label is Label.SUCCESS)

    if result.label is Label.SUCCESS and _reads_flag(cmd, cfg.flag_name):
        payload = "\n".join(_payload_lines(transcript))
        if payload:
            state.flag_data = payload
            state.objective_met = True
            state.current_stage = Stage.END_OF_CAMPAIGN
    _write_transcript(deps, record, transcript)


def _reads_flag(cmd: str, flag_name: str) -> bool:
    fields = cmd.split()
    if not fields or fields[0] not in ("cat", "download"):
        return False
    return any(arg.endswith("/" + flag_name) or arg == flag_name for arg in fields[1:])


def _write_transcript(deps: CampaignDeps, record: IterationRecord, transcript: str) -> None:
    if deps.out_dir is None:
        return
    deps.out_dir.mkdir(parents=True, exist_ok=True)
    path = deps.out_dir / f"{record.global_iter:03d}_{record.stage.value.lower()}.txt"
    path.write_text(transcript + "\n", encoding="utf-8")


# --- the loop --------------------------------------------------------------------


def run_iteration(
    state: CampaignState, cfg: CampaignConfig, deps: CampaignDeps
) -> IterationRecord:
    """One full tactic-select / generate / execute / translate cycle."""
    stage = select_tactic(state)
    if stage is Stage.END_OF_CAMPAIGN:
        raise ConfigError("run_iteration called on a finished campaign")
    state.current_stage = stage
    state.global_iter += 1
    state.stage_iters[stage] += 1
    record = IterationRecord(global_iter=state.global_iter, stage=stage)
    try:
        if stage is Stage.RECON:
            _iterate_recon(state, cfg, deps, record)
        elif stage is Stage.EXPLOIT:
            _iterate_exploit(state, cfg, deps, record)
        else:
            _iterate_exfil(state, cfg, deps, record)
    except GenerationError as exc:
        record.label = Label.FAIL.value
        record.summary = str(exc)
    if deps.out_dir is not None:
        (deps.out_dir / "memory.json").write_text(
            persist_memory(state.memory) + "\n", encoding="utf-8"
        )
    return record


def run_campaign(cfg: CampaignConfig, deps: CampaignDeps) -> CampaignReport:
    """Loop until the objective is met or a stage budget runs out."""
    state = CampaignState(target=cfg.target)
    start = deps.clock.monotonic()
    records: list[IterationRecord] = []
    success = False
    while True:
        stage = select_tactic(state)
        if stage is Stage.END_OF_CAMPAIGN:
            state.current_stage = Stage.END_OF_CAMPAIGN
            success = state.objective_met
            break
        if state.stage_iters[stage] >= cfg.max_iters_per_stage:
            logger.info("stage %s exhausted its %d-iteration budget", stage.value, cfg.max_iters_per_stage)
            break
        records.append(run_iteration(state, cfg, deps))

    dispatched = [r.command for r in records if r.dispatched and r.command]
    rectifications = [
        {
            "input": r.rectification.input_path,
            "matched": r.rectification.matched_path,
            "similarity": round(r.rectification.similarity, 4),
            "method": r.rectification.method.value,
            "outcome": r.rectification.outcome.value,
        }
        for r in records
        if r.rectification is not None
    ]
    flag_sha = (
        hashlib.sha256(state.flag_data.encode("utf-8")).hexdigest()
        if state.flag_data
        else None
    )
    report = CampaignReport(
        success=success,
        stages={s.value: state.stage_iters[s] for s in (Stage.RECON, Stage.EXPLOIT, Stage.EXFILTRATE)},
        rectifications=rectifications,
        duplication_rate=duplication_rate(dispatched),
        wall_seconds=round(deps.clock.monotonic() - start, 6),
        flag_sha256=flag_sha,
        iterations=[r.to_dict() for r in records],
        target=cfg.target,
        backend=getattr(deps.backend, "identity", "unknown"),
    )
    if deps.out_dir is not None:
        deps.out_dir.mkdir(parents=True, exist_ok=True)
        (deps.out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    return report
