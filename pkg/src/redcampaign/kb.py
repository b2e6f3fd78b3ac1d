"""Knowledge base of verified attack-framework modules.

Every module path the engine executes has to come out of this store: it is
the ground truth both for rectifying generated paths and for picking
exploits by service.  The database is loaded once from a pipe-delimited
text file and is immutable afterwards, so it can be shared freely between
campaigns.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from importlib import resources
from typing import IO, Iterable, Mapping, Protocol, Union


class KBError(Exception):
    """A knowledge-base source could not be loaded or queried."""


class SchemaNotFoundError(KBError):
    """No option schema is known for the requested module path."""


class ModuleType(enum.Enum):
    EXPLOIT = "exploit"
    AUXILIARY = "auxiliary"
    POST = "post"
    PAYLOAD = "payload"
    ENCODER = "encoder"
    NOP = "nop"


class Rank(enum.IntEnum):
    """Module reliability grades, ordered worst to best."""

    MANUAL = 0
    LOW = 1
    AVERAGE = 2
    NORMAL = 3
    GOOD = 4
    GREAT = 5
    EXCELLENT = 6

    @classmethod
    def parse(cls, text: str) -> "Rank":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise KBError(f"unknown rank {text!r}") from None


@dataclass(frozen=True)
class ModuleRecord:
    """One verified module: its path, classification, and reliability."""

    path: str
    module_type: ModuleType
    service: str
    os: str
    rank: Rank
    description: str

    def __post_init__(self) -> None:
        if not self.path or "/" not in self.path:
            raise KBError(f"module path must contain '/': {self.path!r}")
        if any(ch.isspace() for ch in self.path):
            raise KBError(f"module path must not contain whitespace: {self.path!r}")
        first, _, _ = self.path.partition("/")
        if first != self.module_type.value:
            raise KBError(
                f"path {self.path!r} does not start with its module type "
                f"{self.module_type.value!r}"
            )
        if not self.suffix:
            raise KBError(f"module path has an empty last segment: {self.path!r}")

    @property
    def suffix(self) -> str:
        return self.path.rsplit("/", 1)[-1]


@dataclass(frozen=True)
class ModuleDatabase:
    """Immutable, indexed collection of :class:`ModuleRecord`.

    ``suffix_index`` and ``service_index`` map to record positions in file
    order, which keeps every query deterministic.
    """

    records: tuple[ModuleRecord, ...]
    suffix_index: Mapping[str, tuple[int, ...]] = field(repr=False)
    service_index: Mapping[str, tuple[int, ...]] = field(repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def paths(self) -> frozenset[str]:
        return frozenset(r.path for r in self.records)

    def by_suffix(self, suffix: str) -> tuple[ModuleRecord, ...]:
        return tuple(self.records[i] for i in self.suffix_index.get(suffix, ()))


def _build_database(records: Iterable[ModuleRecord]) -> ModuleDatabase:
    recs = tuple(records)
    seen: dict[str, int] = {}
    suffix_index: dict[str, list[int]] = {}
    service_index: dict[str, list[int]] = {}
    for i, rec in enumerate(recs):
        if rec.path in seen:
            raise KBError(f"duplicate module path {rec.path!r}")
        seen[rec.path] = i
        suffix_index.setdefault(rec.suffix, []).append(i)
        service_index.setdefault(rec.service, []).append(i)
    return ModuleDatabase(
        records=recs,
        suffix_index={k: tuple(v) for k, v in suffix_index.items()},
        service_index={k: tuple(v) for k, v in service_index.items()},
    )


class KBFormat(enum.Enum):
    PIPE = "pipe"


def parse_record_line(line: str) -> ModuleRecord:
    """Parse one ``module_type|os|service|path|rank|description`` line."""
    parts = line.split("|", 5)
    if len(parts) != 6:
        raise KBError(f"expected 6 pipe-separated fields, got {len(parts)}")
    type_s, os_s, service, path, rank_s, description = parts
    try:
        module_type = ModuleType(type_s.strip())
    except ValueError:
        raise KBError(f"unknown module type {type_s!r}") from None
    return ModuleRecord(
        path=path.strip(),
        module_type=module_type,
        service=service.strip(),
        os=os_s.strip(),
        rank=Rank.parse(rank_s),
        description=description.strip(),
    )


def load_database(
    source: Union[str, bytes, IO[bytes], IO[str]],
    format: KBFormat = KBFormat.PIPE,
) -> ModuleDatabase:
    """Load a module database from a KB file.

    ``source`` may be a text/byte stream or the file contents themselves.
    Lines starting with ``#`` and blank lines are ignored.  Malformed lines
    and duplicate paths fail the whole load: a corrupt knowledge base must
    never become ground truth.
    """
    if format is not KBFormat.PIPE:
        raise KBError(f"unsupported KB format: {format}")
    text = _read_source(source)
    records = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            records.append(parse_record_line(line))
        except KBError as exc:
            raise KBError(f"line {lineno}: {exc}") from None
    try:
        return _build_database(records)
    except KBError as exc:
        raise KBError(str(exc)) from None


def _read_source(source: Union[str, bytes, IO[bytes], IO[str]]) -> str:
    if isinstance(source, bytes):
        return source.decode("utf-8")
    if isinstance(source, str):
        return source
    data = source.read()
    if isinstance(data, bytes):
        return data.decode("utf-8")
    return data


def serialize_database(db: ModuleDatabase) -> str:
    """Inverse of :func:`load_database` over record content."""
    lines = [
        "|".join(
            [
                r.module_type.value,
                r.os,
                r.service,
                r.path,
                r.rank.name.lower(),
                r.description,
            ]
        )
        for r in db.records
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def suffixes(db: ModuleDatabase) -> frozenset[str]:
    """Set of last path segments across all records."""
    return frozenset(db.suffix_index)


# --- service canonicalization -------------------------------------------

_DEFAULT_ALIASES: dict[str, str] | None = None


def load_alias_table(source: Union[str, IO[str]]) -> dict[str, str]:
    """Parse an ``alias = canonical`` table; keys are matched lowercased."""
    text = source if isinstance(source, str) else source.read()
    table: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        alias, sep, canonical = line.partition("=")
        if not sep or not alias.strip() or not canonical.strip():
            raise KBError(f"alias table line {lineno}: expected 'alias = canonical'")
        table[alias.strip().lower()] = canonical.strip().lower()
    return table


def default_alias_table() -> dict[str, str]:
    global _DEFAULT_ALIASES
    if _DEFAULT_ALIASES is None:
        text = resources.files("redcampaign.data").joinpath("service_aliases.cfg").read_text("utf-8")
        _DEFAULT_ALIASES = load_alias_table(text)
    return _DEFAULT_ALIASES


def canonicalize_service(raw: str, aliases: Mapping[str, str] | None = None) -> str:
    """Fold a reported service name onto its canonical short name.

    Unknown services pass through lowercased and trimmed, so the caller
    never has to special-case new protocols.
    """
    if not raw:
        raise ValueError("service name must be non-empty")
    if aliases is None:
        aliases = default_alias_table()
    folded = raw.strip().lower()
    return aliases.get(folded, folded)


def query_modules(
    db: ModuleDatabase, service: str, min_rank: Rank = Rank.MANUAL
) -> list[ModuleRecord]:
    """All records for a canonical service at or above ``min_rank``, file order."""
    idxs = db.service_index.get(service, ())
    return [db.records[i] for i in idxs if db.records[i].rank >= min_rank]


# --- option schemas -------------------------------------------------------


@dataclass(frozen=True)
class OptionSpec:
    name: str
    required: bool
    default: str | None = None


@dataclass(frozen=True)
class PayloadSpec:
    path: str
    arch: str


@dataclass(frozen=True)
class OptionSchema:
    """Options and payloads a module accepts, as fetched from a provider."""

    module_path: str
    options: tuple[OptionSpec, ...]
    payloads: tuple[PayloadSpec, ...] = ()

    def __post_init__(self) -> None:
        names = [o.name for o in self.options]
        if len(names) != len(set(names)):
            raise KBError(f"duplicate option names in schema for {self.module_path}")

    def required_options(self) -> tuple[OptionSpec, ...]:
        return tuple(o for o in self.options if o.required)

    def option(self, name: str) -> OptionSpec | None:
        for o in self.options:
            if o.name == name:
                return o
        return None


class SchemaProvider(Protocol):
    """Anything that can answer 'what options does this module take'."""

    def get_schema(self, module_path: str) -> OptionSchema: ...


class StaticSchemaProvider:
    """Schema provider backed by a parsed schema file."""

    def __init__(self, schemas: Mapping[str, OptionSchema]):
        self._schemas = dict(schemas)

    def get_schema(self, module_path: str) -> OptionSchema:
        try:
            return self._schemas[module_path]
        except KeyError:
            raise SchemaNotFoundError(f"no option schema for {module_path!r}") from None

    def __contains__(self, module_path: str) -> bool:
        return module_path in self._schemas


def load_option_schemas(source: Union[str, IO[str]]) -> StaticSchemaProvider:
    """Parse the stanza-per-module option schema file.

    Stanzas start with ``module <path>`` and carry ``opt`` and ``payload``
    lines::

        module exploit/unix/ftp/vsftpd_234_backdoor
        opt RHOSTS required
        opt RPORT required 21
        payload cmd/unix/interact cmd
    """
    text = source if isinstance(source, str) else source.read()
    schemas: dict[str, OptionSchema] = {}
    current: str | None = None
    opts: list[OptionSpec] = []
    payloads: list[PayloadSpec] = []

    def flush() -> None:
        if current is not None:
            schemas[current] = OptionSchema(current, tuple(opts), tuple(payloads))

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if fields[0] == "module" and len(fields) == 2:
            flush()
            current = fields[1]
            opts, payloads = [], []
        elif fields[0] == "opt" and len(fields) in (3, 4):
            if current is None:
                raise KBError(f"schema line {lineno}: opt before any module stanza")
            if fields[2] not in ("required", "optional"):
                raise KBError(f"schema line {lineno}: expected required|optional")
            opts.append(
                OptionSpec(
                    name=fields[1],
                    required=fields[2] == "required",
                    default=fields[3] if len(fields) == 4 else None,
                )
            )
        elif fields[0] == "payload" and len(fields) == 3:
            if current is None:
                raise KBError(f"schema line {lineno}: payload before any module stanza")
            payloads.append(PayloadSpec(path=fields[1], arch=fields[2]))
        else:
            raise KBError(f"schema line {lineno}: unrecognized entry {line!r}")
    flush()
    return StaticSchemaProvider(schemas)


def option_schema(provider: SchemaProvider, module_path: str) -> OptionSchema:
    """Fetch the option schema for a module from any provider."""
    return provider.get_schema(module_path)


# --- packaged defaults ----------------------------------------------------


def packaged_database() -> ModuleDatabase:
    """The sample knowledge base shipped with the package."""
    text = resources.files("redcampaign.data").joinpath("modules.kb").read_text("utf-8")
    return load_database(text)


def packaged_schemas() -> StaticSchemaProvider:
    text = (
        resources.files("redcampaign.data")
        .joinpath("option_schemas.cfg")
        .read_text("utf-8")
    )
    return load_option_schemas(text)
