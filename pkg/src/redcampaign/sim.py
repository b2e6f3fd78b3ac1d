"""Deterministic target simulator and scripted model backend.

A scenario file fully describes one simulated host: its services, which
module actually compromises each service, the planted filesystem, and the
flag file.  The simulator speaks the same console/session contract as a
live RPC client, so campaigns cannot tell the difference; transcripts are
a pure function of (scenario, command sequence).

The scripted backend replays canned completions keyed by a prompt
fingerprint (stage plus how many successes/failures the injected memory
shows), which keeps it a pure function of the prompt.  A seeded
hallucination injector can perturb the module paths it emits to reproduce
the failure modes a real model exhibits.
"""

from __future__ import annotations

import configparser
import fnmatch
import json
import random
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import IO, Iterable, Union

from .adapters import SessionDesc
from .kb import ModuleDatabase, SchemaProvider, StaticSchemaProvider, packaged_schemas
from .rectify import NormalizedInvocation

DEFAULT_SESSION_CWD = "/var/www"
_EDIT_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789_"

PERTURBATION_KINDS = ("suffix_edit", "hierarchy_scramble", "type_swap")
_SCRAMBLE_POOL = (
    "linux", "unix", "multi", "windows", "osx", "webapp", "scanner",
    "admin", "gather", "http", "ftp", "ssh", "smb", "misc", "local", "remote",
)


class ScenarioError(Exception):
    """Malformed or inconsistent scenario file."""


class PlaybackError(Exception):
    """The playbook has no completion for a prompt."""


@dataclass(frozen=True)
class ServiceSpec:
    name: str
    version: str
    port: int
    vulnerable_module: str
    required_options: tuple[tuple[str, str], ...]
    session_kind: str = "shell"
    bruteforce: bool = False
    credential: str | None = None


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    host: str
    services: tuple[ServiceSpec, ...]
    flag_path: str
    flag_contents: str
    filesystem: tuple[tuple[str, str], ...]
    upgrade_fails: bool = False

    def files(self) -> dict[str, str]:
        return dict(self.filesystem)


def load_scenario(
    source: Union[str, Path, IO[str]],
    db: ModuleDatabase | None = None,
    name: str | None = None,
) -> ScenarioSpec:
    """Parse and validate a scenario file.

    Vulnerable modules must exist in the knowledge base, ports must be
    unique, and the flag file must actually be planted in the filesystem.
    """
    if isinstance(source, Path):
        name = name or source.stem
        text = source.read_text("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()
    if db is None:
        from .kb import packaged_database

        db = packaged_database()

    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # filesystem paths are case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ScenarioError(f"unparseable scenario: {exc}") from None

    if "scenario" not in parser:
        raise ScenarioError("missing [scenario] section")
    base = parser["scenario"]
    host = base.get("host", "").strip()
    if not host:
        raise ScenarioError("scenario must declare a host")
    flag_path = base.get("flag_path", "").strip()
    flag_contents = base.get("flag_contents", "")
    upgrade_fails = base.getboolean("upgrade_fails", fallback=False)

    filesystem: list[tuple[str, str]] = []
    if "files" in parser:
        filesystem = [(path, contents) for path, contents in parser["files"].items()]
    files = dict(filesystem)
    if flag_path and flag_path not in files:
        raise ScenarioError(f"flag_path {flag_path!r} is not in the [files] section")
    if flag_path and files[flag_path] != flag_contents:
        raise ScenarioError("flag_contents does not match the planted flag file")

    known_paths = db.paths()
    services: list[ServiceSpec] = []
    ports: set[int] = set()
    for section in parser.sections():
        if not section.startswith("service:"):
            continue
        svc = parser[section]
        service_name = section.split(":", 1)[1]
        port = svc.getint("port")
        module = svc.get("module", "").strip()
        if module not in known_paths:
            raise ScenarioError(f"service {service_name}: unknown module path {module!r}")
        if port in ports:
            raise ScenarioError(f"duplicate service port {port}")
        ports.add(port)
        requires: list[tuple[str, str]] = []
        for raw in svc.get("require", "").splitlines():
            line = raw.strip()
            if not line:
                continue
            opt_name, sep, pattern = line.partition("=")
            if not sep:
                raise ScenarioError(f"service {service_name}: bad require {line!r}")
            pattern = pattern.replace("{host}", host).replace("{port}", str(port))
            requires.append((opt_name.strip(), pattern.strip()))
        services.append(
            ServiceSpec(
                name=service_name,
                version=svc.get("version", "").strip(),
                port=port,
                vulnerable_module=module,
                required_options=tuple(requires),
                session_kind=svc.get("session", "shell").strip(),
                bruteforce=svc.getboolean("bruteforce", fallback=False),
                credential=(svc.get("credential") or "").strip() or None,
            )
        )

    return ScenarioSpec(
        name=name or base.get("name", "scenario"),
        host=host,
        services=tuple(services),
        flag_path=flag_path,
        flag_contents=flag_contents,
        filesystem=tuple(filesystem),
        upgrade_fails=upgrade_fails,
    )


def packaged_scenario(name: str) -> ScenarioSpec:
    text = (
        resources.files("redcampaign.data")
        .joinpath(f"scenarios/{name}.scenario")
        .read_text("utf-8")
    )
    return load_scenario(text, name=name)


# --- pure simulation functions ------------------------------------------------


def simulate_scan(spec: ScenarioSpec, argv: Iterable[str]) -> str:
    """Synthesize a scan transcript in the fixed banner format."""
    argv = list(argv)
    target = argv[-1] if argv else ""
    if target != spec.host:
        return f"Note: host {target} seems down (no response)"
    tool = argv[1] if argv and argv[0] == "sudo" else argv[0]
    if tool == "ping":
        return f"64 bytes from {spec.host}: icmp_seq=1 ttl=64\n[+] scan complete: host alive"
    with_versions = "-sV" in argv
    lines = [f"Starting scan against {spec.host}", "PORT     STATE SERVICE     VERSION"]
    for svc in sorted(spec.services, key=lambda s: s.port):
        version = svc.version if with_versions else ""
        lines.append(f"{svc.port}/tcp".ljust(9) + "open  " + svc.name.ljust(12) + version)
    lines.append(f"[+] scan complete: {len(spec.services)} open ports")
    return "\n".join(lines)


@dataclass
class SimSession:
    id: int
    kind: str
    alive: bool = True
    cwd: str = DEFAULT_SESSION_CWD
    info: str = ""


def _options_match(svc: ServiceSpec, inv: NormalizedInvocation) -> str | None:
    """None if all required patterns match, else the failing option name."""
    assigned = dict(inv.option_assignments)
    for name, pattern in svc.required_options:
        value = assigned.get(name, "")
        if any(ch in pattern for ch in "*?[") and fnmatch.fnmatch(value, pattern):
            continue
        if value != pattern and not fnmatch.fnmatch(value, pattern):
            return name
    return None


def _wordlist_hits(inv: NormalizedInvocation, credential: str) -> bool:
    from .rectify import DEFAULT_BRUTEFORCE_MARKERS

    for name, value in inv.option_assignments:
        if name in DEFAULT_BRUTEFORCE_MARKERS:
            try:
                lines = Path(value).read_text("utf-8").splitlines()
            except OSError:
                return False
            return credential in (line.strip() for line in lines)
    return False


def simulate_module(
    spec: ScenarioSpec, inv: NormalizedInvocation, known_paths: frozenset[str]
) -> tuple[str, ServiceSpec | None]:
    """Outcome of one module execution: (transcript, compromised service or None).

    A session is only ever spawned for the exact vulnerable module of a
    service, with every required option matching.  There are no
    false-positive exploits in the simulator.
    """
    if inv.module_path not in known_paths:
        return (f"[-] Failed to load module: {inv.module_path}", None)
    service = next(
        (s for s in spec.services if s.vulnerable_module == inv.module_path), None
    )
    header = f"[*] running {inv.module_path} against {spec.host}"
    if service is None:
        return (
            header + "\n[-] Exploit completed, but no session was created.",
            None,
        )
    failing = _options_match(service, inv)
    if failing is not None:
        return (
            header
            + f"\n[*] option {failing} does not reach the target service"
            + "\n[-] Exploit completed, but no session was created.",
            None,
        )
    if service.bruteforce:
        credential = service.credential or ""
        if not credential or not _wordlist_hits(inv, credential):
            return (header + "\n[-] Login failed: no valid credentials found", None)
        user = credential.split()[0]
        return (
            header
            + f"\n[+] {spec.host}:{service.port} - Login Successful: {credential.replace(' ', ':')}"
            + f"\n[*] session opened for user {user}",
            service,
        )
    return (header + "\n[+] exploit payload delivered", service)


def simulate_session_io(spec: ScenarioSpec, session: SimSession, command: str) -> str:
    """Run one command inside a simulated session."""
    if not session.alive:
        return "[-] session closed"
    fields = command.split()
    if not fields:
        return "[-] empty command"
    verb = fields[0]
    files = spec.files()
    if session.kind == "meterpreter":
        if verb == "search":
            return _search(files, fields[1:], session.cwd)
        if verb == "cat":
            return _cat(files, fields[1] if len(fields) > 1 else "")
        if verb == "download":
            path = fields[1] if len(fields) > 1 else ""
            if path in files:
                return files[path] + f"\n[+] saved {path} -> ./{Path(path).name}"
            return f"[-] file not found: {path}"
        if verb in ("ls", "pwd", "getuid"):
            if verb == "pwd":
                return session.cwd + "\n[+] done"
            if verb == "getuid":
                return "Server username: www-data\n[+] done"
            return _ls(files, fields[1] if len(fields) > 1 else session.cwd)
        return f"[-] unknown command: {verb}"
    # raw shell
    if verb == "find":
        name = fields[fields.index("-name") + 1] if "-name" in fields[:-1] else ""
        scope = fields[1] if len(fields) > 1 and fields[1].startswith("/") else "/"
        hits = [p for p in files if p.startswith(scope) and fnmatch.fnmatch(Path(p).name, name)]
        if not hits:
            return "[-] no matching files"
        return "\n".join(sorted(hits)) + "\n[+] done"
    if verb == "cat":
        return _cat(files, fields[1] if len(fields) > 1 else "")
    if verb == "ls":
        return _ls(files, fields[1] if len(fields) > 1 else "/")
    if verb in ("id", "whoami"):
        out = "uid=33(www-data) gid=33(www-data) groups=33(www-data)" if verb == "id" else "www-data"
        return out + "\n[+] done"
    if verb in ("pwd", "head", "tail", "grep"):
        return "[+] done"
    return f"sh: {verb}: command not found"


def _search(files: dict[str, str], args: list[str], cwd: str) -> str:
    name = ""
    scope = cwd
    i = 0
    while i < len(args):
        if args[i] == "-f" and i + 1 < len(args):
            name = args[i + 1]
            i += 2
        elif args[i] == "-d" and i + 1 < len(args):
            scope = args[i + 1]
            i += 2
        else:
            i += 1
    if not name:
        return "[-] search requires -f <pattern>"
    hits = sorted(
        p for p in files if p.startswith(scope) and fnmatch.fnmatch(Path(p).name, name)
    )
    if not hits:
        return f"[-] no matching files under {scope}"
    lines = [f"[+] found {len(hits)} match(es):"]
    lines += hits
    return "\n".join(lines)


def _cat(files: dict[str, str], path: str) -> str:
    if path in files:
        contents = files[path]
        return contents + f"\n[+] done ({len(contents.encode('utf-8'))} bytes)"
    return f"[-] file not found: {path}"


def _ls(files: dict[str, str], directory: str) -> str:
    prefix = directory.rstrip("/") + "/"
    names = sorted(
        {p[len(prefix):].split("/", 1)[0] for p in files if p.startswith(prefix)}
    )
    if not names:
        return f"[-] file not found: {directory}"
    return "\n".join(names) + "\n[+] done"


# --- simulated host (console + sessions + scanning) ---------------------------


class SimHost:
    """One simulated target: console, module execution, sessions, scanning.

    Implements the same contracts as a live RPC client, plus the scan
    runner, so a campaign needs nothing else to operate.
    """

    def __init__(
        self,
        scenario: ScenarioSpec,
        db: ModuleDatabase,
        schemas: SchemaProvider | None = None,
    ):
        self.scenario = scenario
        self._db = db
        self._known_paths = db.paths()
        self._schemas = schemas or packaged_schemas()
        self._consoles: dict[str, dict] = {}
        self._sessions: dict[int, SimSession] = {}
        self._next_console = 1
        self._next_session = 1

    # SchemaProvider
    def get_schema(self, module_path: str):
        return self._schemas.get_schema(module_path)

    # ScanRunner
    def run(self, inv):
        from .adapters import ScanOutput

        return ScanOutput(simulate_scan(self.scenario, inv.argv))

    # SessionSource
    def sessions_list(self) -> dict[int, SessionDesc]:
        return {
            sid: SessionDesc(kind=s.kind, info=s.info)
            for sid, s in self._sessions.items()
            if s.alive
        }

    def kill_session(self, session_id: int) -> None:
        if session_id in self._sessions:
            self._sessions[session_id].alive = False

    # RpcConsole
    def create(self) -> str:
        console_id = f"c{self._next_console}"
        self._next_console += 1
        self._consoles[console_id] = {"queue": [], "module": None, "opts": [], "payload": None}
        return console_id

    def destroy(self, console_id: str) -> None:
        self._consoles.pop(console_id, None)

    def read(self, console_id: str) -> tuple[str, bool]:
        console = self._consoles.get(console_id)
        if console is None:
            return ("", False)
        output = "".join(console["queue"])
        console["queue"].clear()
        return (output, False)

    def write(self, console_id: str, text: str) -> None:
        console = self._consoles.get(console_id)
        if console is None:
            raise KeyError(f"no console {console_id!r}")
        for raw in text.splitlines():
            line = raw.strip()
            if line:
                self._dispatch_line(console, line)

    def _emit(self, console: dict, text: str) -> None:
        console["queue"].append(text if text.endswith("\n") else text + "\n")

    def _dispatch_line(self, console: dict, line: str) -> None:
        fields = line.split()
        if fields[0] == "use" and len(fields) == 2:
            console["module"] = fields[1]
            console["opts"] = []
            console["payload"] = None
            return
        if fields[0] == "set" and len(fields) >= 3:
            name = fields[1]
            value = line.split(None, 2)[2]
            if name.upper() == "PAYLOAD":
                console["payload"] = value
            else:
                console["opts"].append((name, value))
            self._emit(console, f"{name} => {value}")
            return
        if fields[0] in ("exploit", "run"):
            self._run_module(console)
            return
        if fields[0] == "sessions" and "-u" in fields:
            sid = int(fields[fields.index("-u") + 1])
            self._upgrade(console, sid)
            return
        if fields[0] == "sessions" and "-i" in fields and "-c" in fields:
            sid = int(fields[fields.index("-i") + 1])
            command = line.split(" -c ", 1)[1].strip()
            self._session_command(console, sid, command)
            return
        self._emit(console, f"[-] unknown console command: {line}")

    def _run_module(self, console: dict) -> None:
        module = console["module"]
        if module is None:
            self._emit(console, "[-] no module selected")
            return
        inv = NormalizedInvocation(
            module_path=module,
            option_assignments=tuple(console["opts"]),
            payload=console["payload"],
        )
        transcript, service = simulate_module(self.scenario, inv, self._known_paths)
        self._emit(console, transcript)
        if service is not None:
            session = SimSession(
                id=self._next_session,
                kind=service.session_kind,
                info=f"{service.name} {self.scenario.host}:{service.port}",
            )
            self._next_session += 1
            self._sessions[session.id] = session
            kind_name = "Meterpreter" if session.kind == "meterpreter" else "Command shell"
            self._emit(
                console,
                f"[*] {kind_name} session {session.id} opened "
                f"(10.0.2.15:4444 -> {self.scenario.host}:{service.port})",
            )

    def _upgrade(self, console: dict, session_id: int) -> None:
        session = self._sessions.get(session_id)
        if session is None or not session.alive:
            self._emit(console, f"[-] invalid session id {session_id}")
            return
        if session.kind != "shell":
            self._emit(console, f"[-] session {session_id} is not a raw shell")
            return
        if self.scenario.upgrade_fails:
            self._emit(console, f"[-] session upgrade failed for session {session_id}")
            return
        upgraded = SimSession(
            id=self._next_session,
            kind="meterpreter",
            info=f"(upgrade of session {session_id})",
        )
        self._next_session += 1
        self._sessions[upgraded.id] = upgraded
        self._emit(
            console,
            f"[*] Meterpreter session {upgraded.id} opened (upgrade of session {session_id})",
        )

    def _session_command(self, console: dict, session_id: int, command: str) -> None:
        session = self._sessions.get(session_id)
        if session is None:
            self._emit(console, f"[-] invalid session id {session_id}")
            return
        self._emit(console, simulate_session_io(self.scenario, session, command))


# --- hallucination injection ---------------------------------------------------


@dataclass
class HallucinationInjector:
    """Seeded, KB-aware perturbation of module paths.

    suffix_edit applies 1-2 character edits to the last segment and
    guarantees (by redrawing) that the result is not a known suffix;
    hierarchy_scramble rewrites middle segments with plausible wrong ones;
    type_swap flips the leading module-type segment.
    """

    rate: float
    seed: int
    kinds: tuple[str, ...] = PERTURBATION_KINDS
    db: ModuleDatabase | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("rate must be within [0, 1]")
        unknown = set(self.kinds) - set(PERTURBATION_KINDS)
        if unknown:
            raise ValueError(f"unknown perturbation kinds: {sorted(unknown)}")
        self._rng = random.Random(self.seed)

    def _suffixes(self) -> frozenset[str]:
        return frozenset(self.db.suffix_index) if self.db else frozenset()

    def _paths(self) -> frozenset[str]:
        return self.db.paths() if self.db else frozenset()

    def perturb_path(self, path: str, kind: str | None = None) -> str:
        if kind is None:
            kind = self.kinds[self._rng.randrange(len(self.kinds))]
        if kind == "suffix_edit":
            return self._suffix_edit(path)
        if kind == "hierarchy_scramble":
            return self._hierarchy_scramble(path)
        return self._type_swap(path)

    def maybe_perturb_block(self, completion: str) -> str:
        """Perturb each `use <path>` mention with probability ``rate``."""
        if self.rate <= 0.0 or "use " not in completion:
            return completion

        def replace(match: re.Match) -> str:
            path = match.group(1)
            if self._rng.random() >= self.rate:
                return match.group(0)
            return "use " + self.perturb_path(path)

        return re.sub(r"^use (\S+)$", replace, completion, flags=re.M)

    def _suffix_edit(self, path: str) -> str:
        head, _, suffix = path.rpartition("/")
        known = self._suffixes()
        for _ in range(50):
            edited = suffix
            for _ in range(self._rng.randint(1, 2)):
                edited = self._one_edit(edited)
            if edited and edited != suffix and edited not in known:
                return f"{head}/{edited}" if head else edited
        raise ValueError(f"could not find a non-colliding edit of {suffix!r}")

    def _one_edit(self, text: str) -> str:
        op = self._rng.choice(("sub", "insert", "delete"))
        if op == "delete" and len(text) > 1:
            i = self._rng.randrange(len(text))
            return text[:i] + text[i + 1 :]
        if op == "sub" and text:
            i = self._rng.randrange(len(text))
            return text[:i] + self._rng.choice(_EDIT_ALPHABET) + text[i + 1 :]
        i = self._rng.randrange(len(text) + 1)
        return text[:i] + self._rng.choice(_EDIT_ALPHABET) + text[i:]

    def _hierarchy_scramble(self, path: str) -> str:
        segments = path.split("/")
        if len(segments) < 3:
            return self._suffix_edit(path)
        known = self._paths()
        for _ in range(50):
            middle = [self._rng.choice(_SCRAMBLE_POOL) for _ in segments[1:-1]]
            candidate = "/".join([segments[0], *middle, segments[-1]])
            if candidate != path and candidate not in known:
                return candidate
        raise ValueError(f"could not scramble {path!r}")

    def _type_swap(self, path: str) -> str:
        first, _, rest = path.partition("/")
        swap = {"exploit": "auxiliary", "auxiliary": "exploit", "post": "auxiliary"}
        swapped = f"{swap.get(first, 'exploit')}/{rest}"
        if swapped in self._paths() or swapped == path:
            return self._suffix_edit(path)
        return swapped


@dataclass(frozen=True)
class CorpusCase:
    generated: str
    intended: str
    kind: str


def generate_hallucination_corpus(
    db: ModuleDatabase,
    n: int,
    mix: dict[str, float] | None = None,
    seed: int = 0,
) -> list[CorpusCase]:
    """Seeded corpus of (perturbed path, original path) pairs."""
    if mix is None:
        mix = {"suffix_edit": 0.4, "hierarchy_scramble": 0.4, "type_swap": 0.2}
    injector = HallucinationInjector(rate=1.0, seed=seed, db=db)
    rng = random.Random(seed ^ 0x5EED)
    counts = {kind: int(n * fraction) for kind, fraction in mix.items()}
    remainder = n - sum(counts.values())
    first = next(iter(mix))
    counts[first] += remainder
    cases: list[CorpusCase] = []
    for kind in mix:
        for _ in range(counts[kind]):
            record = db.records[rng.randrange(len(db.records))]
            cases.append(CorpusCase(injector.perturb_path(record.path, kind), record.path, kind))
    return cases


# --- scripted backend -----------------------------------------------------------


def prompt_fingerprint(prompt: str) -> str:
    """Stable projection of a prompt used to key playbook records.

    RECON prompts map to ``RECON``; setup prompts carry their module path;
    translation prompts carry the phase; exploit/exfiltration prompts
    count the failures and successes visible in the injected memory, so
    progress (not wording) drives playback.
    """
    m = re.search(r"^## STAGE: (\w+)", prompt, re.M)
    stage = m.group(1) if m else "UNKNOWN"
    if stage == "RECON":
        return "RECON"
    if stage == "SETUP":
        mod = re.search(r"^## MODULE: (\S+)", prompt, re.M)
        return f"SETUP:{mod.group(1) if mod else '?'}"
    if stage == "TRANSLATE":
        phase = re.search(r"^Phase under analysis: (\w+)", prompt, re.M)
        return f"TRANSLATE:{phase.group(1) if phase else '?'}"
    fails = succs = 0
    mem = re.search(r"^## MEMORY\n(.*?)$", prompt, re.M)
    if mem:
        try:
            entries = json.loads(mem.group(1))
        except json.JSONDecodeError:
            entries = []
        if isinstance(entries, list):
            for entry in entries:
                if isinstance(entry, dict) and entry.get("result") == "fail":
                    fails += 1
                elif isinstance(entry, dict) and entry.get("result") == "success":
                    succs += 1
    return f"{stage}:f{fails}:s{succs}"


@dataclass(frozen=True)
class PlaybookRecord:
    fingerprint: str
    completion: str


@dataclass(frozen=True)
class Playbook:
    records: tuple[PlaybookRecord, ...]

    def lookup(self, fingerprint: str) -> str:
        for record in self.records:  # exact match wins
            if record.fingerprint == fingerprint:
                return record.completion
        best: PlaybookRecord | None = None
        for record in self.records:  # longest wildcard prefix, first on ties
            if not record.fingerprint.endswith("*"):
                continue
            prefix = record.fingerprint[:-1]
            if fingerprint.startswith(prefix):
                if best is None or len(prefix) > len(best.fingerprint) - 1:
                    best = record
        if best is None:
            raise PlaybackError(f"no playbook record for fingerprint {fingerprint!r}")
        return best.completion


def load_playbook(source: Union[str, Path, IO[str]]) -> Playbook:
    """Parse ``@fingerprint`` record headers followed by completion lines."""
    if isinstance(source, Path):
        text = source.read_text("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()
    records: list[PlaybookRecord] = []
    fingerprint: str | None = None
    lines: list[str] = []

    def flush() -> None:
        if fingerprint is not None:
            body = "\n".join(lines)
            records.append(PlaybookRecord(fingerprint, body.strip("\n")))

    for raw in text.splitlines():
        if raw.startswith("@"):
            flush()
            fingerprint = raw[1:].strip()
            lines = []
        elif raw.startswith("#") and fingerprint is None:
            continue
        else:
            lines.append(raw)
    flush()
    if not records:
        raise PlaybackError("playbook has no records")
    return Playbook(tuple(records))


def packaged_playbook(name: str) -> Playbook:
    text = (
        resources.files("redcampaign.data")
        .joinpath(f"playbooks/{name}.playbook")
        .read_text("utf-8")
    )
    return load_playbook(text)


class ScriptedBackend:
    """Plays back canned completions; optionally perturbed by an injector.

    Without an injector the backend is a pure function of the prompt, so
    identical prompts always produce identical completions.
    """

    identity = "scripted"

    def __init__(self, playbook: Playbook, injector: HallucinationInjector | None = None):
        self._playbook = playbook
        self._injector = injector

    def complete(self, prompt: str) -> str:
        fingerprint = prompt_fingerprint(prompt)
        try:
            completion = self._playbook.lookup(fingerprint)
        except PlaybackError:
            head = prompt.splitlines()[0] if prompt else ""
            raise PlaybackError(
                f"no playbook record for fingerprint {fingerprint!r} (prompt {head!r})"
            ) from None
        if self._injector is not None and fingerprint.startswith("EXPLOIT"):
            completion = self._injector.maybe_perturb_block(completion)
        return completion


def scripted_backend(
    playbook: Playbook, injector: HallucinationInjector | None = None
) -> ScriptedBackend:
    return ScriptedBackend(playbook, injector)
