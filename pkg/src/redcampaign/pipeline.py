"""Stage-conditioned command generation and output translation.

Three model-facing roles sit here: turning a recon stage into a scan
command, turning findings plus memory into an exploit block, and turning
raw transcripts into labeled, summarized results.  All prompts are built
from data-file templates; the model backend behind them is pluggable and,
for the scripted and rules backends, fully deterministic.

Outcome labels are computed from a structural marker table rather than
asked of the model: acceptance of a campaign must not hinge on how a
backend phrases "it worked".  The backend contributes the free-text
summary only.
"""

from __future__ import annotations

import enum
import json
import re
import urllib.request
from dataclasses import dataclass
from importlib import resources
from string import Template
from typing import Protocol

from . import adapters
from .adapters import extract_tool_line, tail_trim  # re-exported surface
from .kb import ModuleDatabase, OptionSchema, Rank, query_modules
from .memory import GlobalMemory, route_context
from .stage import Stage

RETRY_LIMIT = 3
SUMMARY_CAP = 240

__all__ = [
    "ModelBackend",
    "CommandPlan",
    "PlanHeader",
    "ExecResult",
    "Label",
    "PromptLibrary",
    "generate_recon_command",
    "select_exploit",
    "setup_module",
    "generate_exfil_command",
    "translate_output",
    "tail_trim",
    "extract_tool_line",
    "RulesBackend",
    "HttpBackend",
    "GenerationError",
]


class GenerationError(Exception):
    """The backend failed to produce a usable plan within the retry limit."""


class ModelBackend(Protocol):
    identity: str

    def complete(self, prompt: str) -> str: ...


class PromptLibrary:
    """Named prompt templates with ``$slot`` substitution.

    Templates live in data files so prompt experiments never require a
    code change.
    """

    def __init__(self, templates: dict[str, str] | None = None):
        if templates is None:
            templates = {}
            base = resources.files("redcampaign.data").joinpath("prompts")
            for name in ("recon", "exploit", "setup", "exfil", "translate"):
                templates[name] = base.joinpath(f"{name}.txt").read_text("utf-8")
        self._templates = templates

    def render(self, name: str, **slots: str) -> str:
        return Template(self._templates[name]).safe_substitute(**slots)


_DEFAULT_PROMPTS: PromptLibrary | None = None


def default_prompts() -> PromptLibrary:
    global _DEFAULT_PROMPTS
    if _DEFAULT_PROMPTS is None:
        _DEFAULT_PROMPTS = PromptLibrary()
    return _DEFAULT_PROMPTS


@dataclass(frozen=True)
class PlanHeader:
    ip: str
    port: int
    service: str
    version: str


@dataclass(frozen=True)
class CommandPlan:
    stage: Stage
    lines: tuple[str, ...]
    header: PlanHeader | None = None
    candidate_module: str | None = None

    def with_module(self, module_path: str) -> "CommandPlan":
        """Rewrite the use-line after rectification picked the real path."""
        lines = tuple(
            f"use {module_path}" if line.strip().startswith("use ") else line
            for line in self.lines
        )
        return CommandPlan(self.stage, lines, self.header, module_path)


class Label(enum.Enum):
    SUCCESS = "SUCCESS"
    FAIL = "FAIL"


@dataclass(frozen=True)
class ExecResult:
    raw_tail: str
    label: Label
    summary: str
    next_hint: str


# --- marker table -----------------------------------------------------------


@dataclass(frozen=True)
class MarkerTable:
    success: tuple[str, ...]
    failure: tuple[str, ...]


_DEFAULT_MARKERS: MarkerTable | None = None


def load_marker_table(text: str) -> MarkerTable:
    success: list[str] = []
    failure: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        kind, _, marker = line.partition(" ")
        if kind == "success" and marker:
            success.append(marker)
        elif kind == "fail" and marker:
            failure.append(marker)
        else:
            raise ValueError(f"marker table line {lineno}: {raw!r}")
    return MarkerTable(tuple(success), tuple(failure))


def default_markers() -> MarkerTable:
    global _DEFAULT_MARKERS
    if _DEFAULT_MARKERS is None:
        text = resources.files("redcampaign.data").joinpath("markers.cfg").read_text("utf-8")
        _DEFAULT_MARKERS = load_marker_table(text)
    return _DEFAULT_MARKERS


# --- exfil verb tables -------------------------------------------------------

_VERB_TABLES: dict[str, frozenset[str]] | None = None


def exfil_verbs() -> dict[str, frozenset[str]]:
    global _VERB_TABLES
    if _VERB_TABLES is None:
        text = resources.files("redcampaign.data").joinpath("exfil_verbs.cfg").read_text("utf-8")
        tables: dict[str, frozenset[str]] = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            name, *verbs = line.split()
            tables[name] = frozenset(verbs)
        _VERB_TABLES = tables
    return _VERB_TABLES


# --- generation --------------------------------------------------------------


def _format_findings(findings) -> str:
    return "\n".join(
        f"{f.ip} {f.port} {f.service} {f.version}".rstrip() for f in findings
    )


def _memory_slot(
    stage: Stage, memory: GlobalMemory | None, context_override: str | None
) -> str:
    if context_override is not None:
        return context_override
    if memory is None:
        return "[]"
    return route_context(stage, memory) or "[]"


def generate_recon_command(
    state,
    backend: ModelBackend,
    prompts: PromptLibrary | None = None,
) -> CommandPlan:
    """Ask the backend for a scan command and validate it is one."""
    prompts = prompts or default_prompts()
    prompt = prompts.render("recon", target=state.target)
    for _ in range(RETRY_LIMIT):
        completion = backend.complete(prompt)
        line = extract_tool_line(completion)
        if line is not None and state.target in line:
            return CommandPlan(stage=Stage.RECON, lines=(line,))
    raise GenerationError(
        f"backend {backend.identity!r} produced no usable scan line for "
        f"{state.target} in {RETRY_LIMIT} attempts"
    )


_HEADER_RE = re.compile(
    r"^HEADER\s+ip=(?P<ip>\S+)\s+port=(?P<port>\d+)\s+service=(?P<service>\S+)"
    r"\s+version=(?P<version>.*)$"
)


def _parse_exploit_completion(completion: str) -> tuple[PlanHeader | None, str | None, list[str]]:
    header = None
    module = None
    lines: list[str] = []
    for raw in completion.splitlines():
        line = raw.strip()
        if not line or line.startswith("```"):
            continue
        m = _HEADER_RE.match(line)
        if m:
            header = PlanHeader(
                ip=m.group("ip"),
                port=int(m.group("port")),
                service=m.group("service"),
                version=m.group("version").strip(),
            )
            continue
        if line.startswith("use ") and len(line.split()) == 2:
            module = line.split()[1]
        if line.split(None, 1)[0] in ("use", "set", "exploit", "run"):
            lines.append(line)
    return header, module, lines


def select_exploit(
    state,
    memory: GlobalMemory | None,
    db: ModuleDatabase,
    backend: ModelBackend,
    prompts: PromptLibrary | None = None,
    *,
    context_override: str | None = None,
    last_summary: str = "",
) -> CommandPlan:
    """Pick a target service and candidate module for the exploit stage.

    The active stage's memory JSON rides along in the prompt so the
    backend can steer around recorded failures.  The returned candidate is
    pre-rectification: it may not exist in the database yet.
    """
    if not state.recon_findings:
        raise GenerationError("cannot select an exploit before any recon findings")
    prompts = prompts or default_prompts()
    prompt = prompts.render(
        "exploit",
        target=state.target,
        findings=_format_findings(state.recon_findings),
        memory=_memory_slot(Stage.EXPLOIT, memory, context_override),
        last_summary=last_summary,
    )
    known = {(f.ip, f.port, f.service) for f in state.recon_findings}
    for _ in range(RETRY_LIMIT):
        completion = backend.complete(prompt)
        header, module, lines = _parse_exploit_completion(completion)
        if header is None or module is None:
            continue
        if (header.ip, header.port, header.service) not in known:
            continue
        return CommandPlan(
            stage=Stage.EXPLOIT,
            lines=tuple(lines),
            header=header,
            candidate_module=module,
        )
    raise GenerationError(
        f"backend {backend.identity!r} produced no valid exploit plan in "
        f"{RETRY_LIMIT} attempts"
    )


def _format_schema(schema: OptionSchema) -> str:
    lines = []
    for opt in schema.options:
        kind = "required" if opt.required else "optional"
        default = f" (default {opt.default})" if opt.default else ""
        lines.append(f"{opt.name} {kind}{default}")
    for p in schema.payloads:
        lines.append(f"payload {p.path} [{p.arch}]")
    return "\n".join(lines)


def setup_module(
    plan: CommandPlan,
    schema: OptionSchema,
    ctx,
    backend: ModelBackend,
    prompts: PromptLibrary | None = None,
):
    """Produce a complete, executable invocation for a rectified plan.

    The backend gets the option schema and the draft block and may refine
    the ``set`` lines; normalization then enforces completeness either
    way.  An empty completion keeps the draft block.
    """
    from .rectify import NormalizationError, normalize_invocation

    prompts = prompts or default_prompts()
    prompt = prompts.render(
        "setup",
        module=schema.module_path,
        schema=_format_schema(schema),
        block="\n".join(plan.lines),
    )
    completion = backend.complete(prompt)
    block = completion if completion.strip() else "\n".join(plan.lines)
    try:
        return normalize_invocation(block, schema, ctx)
    except NormalizationError as exc:
        raise NormalizationError(f"{schema.module_path}: {exc}") from None


def generate_exfil_command(
    state,
    memory: GlobalMemory | None,
    backend: ModelBackend,
    prompts: PromptLibrary | None = None,
    *,
    context_override: str | None = None,
    last_summary: str = "",
    flag_name: str = "flag.txt",
) -> CommandPlan:
    """One session command, vocabulary-checked against the session kind."""
    session = state.active_session()
    if session is None:
        raise GenerationError("no alive session; cannot generate exfil commands")
    prompts = prompts or default_prompts()
    prompt = prompts.render(
        "exfil",
        target=state.target,
        session_id=str(session.id),
        session_kind=session.kind,
        flag_name=flag_name,
        memory=_memory_slot(Stage.EXFILTRATE, memory, context_override),
        last_summary=last_summary,
    )
    tables = exfil_verbs()
    for _ in range(RETRY_LIMIT):
        completion = backend.complete(prompt)
        line = next(
            (l.strip() for l in completion.splitlines() if l.strip() and not l.strip().startswith("```")),
            None,
        )
        if not line:
            continue
        verb = line.split()[0]
        if session.kind == "shell" and verb in tables["meterpreter_only"]:
            continue
        if session.kind == "shell" and verb not in tables["shell"]:
            continue
        if session.kind == "meterpreter" and verb not in tables["meterpreter"]:
            continue
        return CommandPlan(stage=Stage.EXFILTRATE, lines=(line,))
    raise GenerationError(
        f"backend {backend.identity!r} produced no valid {session.kind} "
        f"exfil command in {RETRY_LIMIT} attempts"
    )


# --- translation --------------------------------------------------------------


_HINTS = {
    (Stage.RECON, Label.SUCCESS): "analyze the discovered services and move to exploitation",
    (Stage.RECON, Label.FAIL): "re-scan with different options or verify the target address",
    (Stage.EXPLOIT, Label.SUCCESS): "a session is available; proceed to exfiltration",
    (Stage.EXPLOIT, Label.FAIL): "select a different module or adjust its options",
    (Stage.EXFILTRATE, Label.SUCCESS): "verify the retrieved data against the objective",
    (Stage.EXFILTRATE, Label.FAIL): "broaden the search scope or try another path",
}


def _rule_label(raw: str, markers: MarkerTable) -> Label:
    if not raw.strip():
        return Label.FAIL
    for line in raw.splitlines():
        if any(m in line for m in markers.success):
            return Label.SUCCESS
    return Label.FAIL


def _rule_summary(raw: str, label: Label, markers: MarkerTable) -> str:
    lines = [l for l in raw.splitlines() if l.strip()]
    if not lines:
        return "no output produced"
    wanted = markers.success if label is Label.SUCCESS else markers.failure
    for i, line in enumerate(lines):
        if any(m in line for m in wanted):
            summary = line.strip()
            for extra in lines[i + 1 : i + 3]:
                if not any(m in extra for m in markers.failure):
                    summary += " " + extra.strip()
            return summary[:SUMMARY_CAP]
    return lines[-1].strip()[:SUMMARY_CAP]


def translate_output(
    raw: str,
    stage: Stage,
    backend: ModelBackend | None = None,
    prompts: PromptLibrary | None = None,
    markers: MarkerTable | None = None,
) -> ExecResult:
    """Label a transcript and condense it for the next reasoning step.

    The label comes from the structural marker table, so it is
    deterministic for any backend; the backend only gets to phrase the
    summary, and an empty or missing phrasing falls back to the marker
    line itself.  Unparseable output is a FAIL with a diagnostic summary,
    never an exception.
    """
    markers = markers or default_markers()
    trimmed = tail_trim(raw, adapters.DEFAULT_TAIL_CAP)
    label = _rule_label(trimmed, markers)
    summary = ""
    if backend is not None:
        prompts = prompts or default_prompts()
        prompt = prompts.render("translate", stage=stage.value, transcript=trimmed)
        summary = backend.complete(prompt).strip()[:SUMMARY_CAP]
    if not summary:
        summary = _rule_summary(trimmed, label, markers)
    hint = _HINTS.get((stage, label), "reassess the campaign state")
    return ExecResult(raw_tail=trimmed, label=label, summary=summary, next_hint=hint)


# --- deterministic heuristic backend ------------------------------------------


def _prompt_stage(prompt: str) -> str | None:
    m = re.search(r"^## STAGE: (\w+)", prompt, re.M)
    return m.group(1) if m else None


def _prompt_memory_entries(prompt: str) -> list[dict]:
    m = re.search(r"^## MEMORY\n(.*?)$", prompt, re.M)
    if not m:
        return []
    try:
        data = json.loads(m.group(1))
    except json.JSONDecodeError:
        return []
    return data if isinstance(data, list) else []


class RulesBackend:
    """Deterministic heuristic backend: no model, no playbook.

    Good enough to drive the simulator end to end - it scans, picks the
    best-ranked module for a discovered service that has not failed yet,
    and walks a fixed search-then-read ladder during exfiltration.
    """

    identity = "rules"

    def __init__(self, db: ModuleDatabase):
        self._db = db

    def complete(self, prompt: str) -> str:
        stage = _prompt_stage(prompt)
        if stage == "RECON":
            target = self._line_value(prompt, "Target: ")
            return f"nmap -sS -sV {target}"
        if stage == "EXPLOIT":
            return self._exploit(prompt)
        if stage == "EXFILTRATE":
            return self._exfil(prompt)
        return ""  # SETUP keeps the draft block; TRANSLATE uses rule summaries

    @staticmethod
    def _line_value(prompt: str, prefix: str) -> str:
        for line in prompt.splitlines():
            if line.startswith(prefix):
                return line[len(prefix):].strip()
        return ""

    def _exploit(self, prompt: str) -> str:
        findings = []
        in_findings = False
        for line in prompt.splitlines():
            if line.startswith("Known services:"):
                in_findings = True
                continue
            if in_findings:
                if not line.strip() or line.startswith("##"):
                    break
                parts = line.split(None, 3)
                if len(parts) >= 3:
                    findings.append(parts)
        entries = _prompt_memory_entries(prompt)
        tried = {e.get("cmd") for e in entries}
        for parts in findings:
            ip, port, service = parts[0], parts[1], parts[2]
            version = parts[3] if len(parts) > 3 else ""
            candidates = sorted(
                query_modules(self._db, service, Rank.NORMAL),
                key=lambda r: (-int(r.rank),),
            )
            for record in candidates:
                if record.path in tried:
                    continue
                return (
                    f"HEADER ip={ip} port={port} service={service} version={version}\n"
                    f"use {record.path}\n"
                    f"set RHOSTS {ip}\n"
                    "exploit"
                )
        return "no viable module"

    def _exfil(self, prompt: str) -> str:
        kind = "meterpreter" if "kind meterpreter" in prompt else "shell"
        flag = self._line_value(prompt, "Objective: locate and read the sensitive file ").rstrip(".")
        flag = flag or "flag.txt"
        last = self._line_value(prompt, "Last result: ")
        found = next(
            (tok for tok in last.split() if tok.startswith("/") and tok.endswith(flag)),
            None,
        )
        if found:
            return f"cat {found}"
        entries = _prompt_memory_entries(prompt)
        tried = {e.get("cmd") for e in entries}
        if kind == "meterpreter":
            ladder = [f"search -f {flag}", f"search -d / -f {flag}"]
        else:
            ladder = [f"find / -name {flag}"]
        for cmd in ladder:
            if cmd not in tried:
                return cmd
        return ladder[-1]


class HttpBackend:
    """Minimal JSON-over-HTTP backend.

    Reads its endpoint and credential from REDCAMPAIGN_BACKEND_URL and
    REDCAMPAIGN_BACKEND_KEY; request body is {"prompt": ...} and the
    response must carry {"completion": ...}.  Only exercised by optional
    integration tests.
    """

    identity = "http"

    def __init__(self, url: str, api_key: str | None = None, timeout: float = 30.0):
        self._url = url
        self._api_key = api_key
        self._timeout = timeout

    def complete(self, prompt: str) -> str:
        payload = json.dumps({"prompt": prompt}).encode("utf-8")
        request = urllib.request.Request(
            self._url, data=payload, headers={"Content-Type": "application/json"}
        )
        if self._api_key:
            request.add_header("Authorization", f"Bearer {self._api_key}")
        with urllib.request.urlopen(request, timeout=self._timeout) as response:
            body = json.loads(response.read().decode("utf-8"))
        return body.get("completion", "")
