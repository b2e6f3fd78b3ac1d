"""Correction of generated module paths against the knowledge base.

Language models routinely emit module paths that look right but do not
exist: the last segment tends to survive while the directory hierarchy is
invented.  The hybrid method exploits that by fuzzy-matching only the path
suffix against the set of verified suffixes and then reconstructing the
full path from the database.  Two simpler strategies (whole-path fuzzy
matching and exact suffix lookup) are kept as comparison baselines.

Every result returned by any strategy is, by construction, a path that
exists in the database: the matcher can be wrong, never ungrounded.

This module also owns execution-level normalization: turning a raw
``use``/``set`` block into a complete invocation with all required options
filled in and the payload validated.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .kb import ModuleDatabase, ModuleRecord, OptionSchema

DEFAULT_THRESHOLD = 0.5
DEFAULT_BRUTEFORCE_MARKERS = frozenset({"USER_FILE", "PASS_FILE", "USERPASS_FILE"})


class RectifyError(Exception):
    """Invalid input to a rectification operation."""


class NormalizationError(Exception):
    """A command block could not be completed into an executable invocation."""


class CorpusError(Exception):
    """An evaluation corpus is empty or references unknown modules."""


def last_segment(path: str) -> str:
    """Substring after the final ``/``; the whole string if none exists.

    Trailing slashes and embedded whitespace are rejected rather than
    trimmed so corrupt inputs stay visible.
    """
    if not path:
        raise RectifyError("empty module path")
    if any(ch.isspace() for ch in path):
        raise RectifyError(f"module path contains whitespace: {path!r}")
    if path.endswith("/"):
        raise RectifyError(f"module path has a trailing slash: {path!r}")
    return path.rsplit("/", 1)[-1]


def levenshtein(a: str, b: str) -> int:
    """Minimum insert/delete/substitute edits turning ``a`` into ``b``.

    Unit costs, computed over Unicode scalar values with the classic
    two-row dynamic program.
    """
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cost = 0 if ca == cb else 1
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost))
        prev = cur
    return prev[-1]


def similarity(a: str, b: str) -> float:
    """Normalized edit similarity: 1 - d(a,b) / max(|a|,|b|).

    Both-empty compares equal, so the degenerate case returns 1 instead of
    dividing by zero.
    """
    if not a and not b:
        return 1.0
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))


class RectifyMethod(enum.Enum):
    HYBRID = "hybrid"
    FUZZY_FULL = "fuzzy_full"
    LAST_EXACT = "last_exact"


class RectifyOutcome(enum.Enum):
    CORRECTED = "corrected"
    ALREADY_VALID = "already_valid"
    NO_MATCH = "no_match"


@dataclass(frozen=True)
class Rectification:
    """Result of matching one generated path against the database."""

    input_path: str
    matched_path: str | None
    similarity: float
    method: RectifyMethod
    outcome: RectifyOutcome


def _tie_break_key(record: ModuleRecord, input_first_segment: str):
    # Deterministic winner among equally similar candidates: best rank,
    # then same leading segment as the input, then smallest path.
    return (
        -int(record.rank),
        0 if record.module_type.value == input_first_segment else 1,
        record.path,
    )


def _pick_record(
    candidates: list[ModuleRecord], input_path: str
) -> ModuleRecord:
    for rec in candidates:
        if rec.path == input_path:
            return rec
    first_segment = input_path.split("/", 1)[0]
    return min(candidates, key=lambda r: _tie_break_key(r, first_segment))


def _result(
    input_path: str, record: ModuleRecord, sim: float, method: RectifyMethod
) -> Rectification:
    if record.path == input_path:
        return Rectification(input_path, record.path, 1.0, method, RectifyOutcome.ALREADY_VALID)
    return Rectification(input_path, record.path, sim, method, RectifyOutcome.CORRECTED)


def rectify_hybrid(
    path: str, db: ModuleDatabase, threshold: float = DEFAULT_THRESHOLD
) -> Rectification:
    """Suffix-level fuzzy correction: the hybrid strategy.

    The last segment of ``path`` is compared against every suffix in the
    database; the best-scoring suffix picks the module.  Scores below
    ``threshold`` yield NO_MATCH instead of a bad guess.
    """
    if not db.records:
        raise RectifyError("cannot rectify against an empty database")
    s = last_segment(path)
    best_sim = -1.0
    best_suffixes: list[str] = []
    for suffix in db.suffix_index:
        sim = similarity(s, suffix)
        if sim > best_sim:
            best_sim, best_suffixes = sim, [suffix]
        elif sim == best_sim:
            best_suffixes.append(suffix)
    if best_sim < threshold:
        return Rectification(path, None, best_sim, RectifyMethod.HYBRID, RectifyOutcome.NO_MATCH)
    candidates = [r for suf in best_suffixes for r in db.by_suffix(suf)]
    return _result(path, _pick_record(candidates, path), best_sim, RectifyMethod.HYBRID)


def rectify_fuzzy_full(
    path: str, db: ModuleDatabase, threshold: float = DEFAULT_THRESHOLD
) -> Rectification:
    """Baseline: fuzzy match over whole paths instead of suffixes."""
    if not db.records:
        raise RectifyError("cannot rectify against an empty database")
    last_segment(path)  # same input validation as the hybrid path
    best_sim = -1.0
    best_records: list[ModuleRecord] = []
    for rec in db.records:
        sim = similarity(path, rec.path)
        if sim > best_sim:
            best_sim, best_records = sim, [rec]
        elif sim == best_sim:
            best_records.append(rec)
    if best_sim < threshold:
        return Rectification(path, None, best_sim, RectifyMethod.FUZZY_FULL, RectifyOutcome.NO_MATCH)
    return _result(path, _pick_record(best_records, path), best_sim, RectifyMethod.FUZZY_FULL)


def rectify_last_exact(path: str, db: ModuleDatabase) -> Rectification:
    """Baseline: exact lookup of the last segment, no tolerance at all."""
    if not db.records:
        raise RectifyError("cannot rectify against an empty database")
    s = last_segment(path)
    records = list(db.by_suffix(s))
    if not records:
        return Rectification(path, None, 0.0, RectifyMethod.LAST_EXACT, RectifyOutcome.NO_MATCH)
    return _result(path, _pick_record(records, path), 1.0, RectifyMethod.LAST_EXACT)


def rectify(
    path: str,
    db: ModuleDatabase,
    method: RectifyMethod = RectifyMethod.HYBRID,
    threshold: float = DEFAULT_THRESHOLD,
) -> Rectification:
    if method is RectifyMethod.HYBRID:
        return rectify_hybrid(path, db, threshold)
    if method is RectifyMethod.FUZZY_FULL:
        return rectify_fuzzy_full(path, db, threshold)
    return rectify_last_exact(path, db)


# --- execution-level normalization ----------------------------------------


@dataclass(frozen=True)
class NetworkContext:
    """Campaign-side values available for filling missing options."""

    rhost: str | None = None
    rport: int | None = None
    lhost: str | None = None
    lport: int | None = None
    wordlist: str | None = None


@dataclass(frozen=True)
class NormalizedInvocation:
    """A complete, executable module invocation.

    All required options are present with non-empty values, the payload
    (if any) is one the module actually supports, and the brute-force flag
    drives execution-window budgeting.
    """

    module_path: str
    option_assignments: tuple[tuple[str, str], ...]
    payload: str | None = None
    bruteforce: bool = False

    def get(self, name: str) -> str | None:
        for key, value in self.option_assignments:
            if key == name:
                return value
        return None


def classify_bruteforce(
    module_path: str,
    schema: OptionSchema,
    markers: frozenset[str] = DEFAULT_BRUTEFORCE_MARKERS,
) -> bool:
    """A module is brute-force iff its schema declares a credential-list option."""
    return any(o.name in markers for o in schema.options)


def _context_value(name: str, ctx: NetworkContext) -> str | None:
    if name == "RHOSTS" and ctx.rhost:
        return ctx.rhost
    if name == "RPORT" and ctx.rport is not None:
        return str(ctx.rport)
    if name == "LHOST" and ctx.lhost:
        return ctx.lhost
    if name == "LPORT" and ctx.lport is not None:
        return str(ctx.lport)
    if name in DEFAULT_BRUTEFORCE_MARKERS and ctx.wordlist:
        return ctx.wordlist
    return None


def parse_command_block(raw_block: str) -> tuple[str | None, list[tuple[str, str]]]:
    """Extract the ``use`` path and ordered ``set`` pairs from a command block."""
    use_path: str | None = None
    assignments: list[tuple[str, str]] = []
    for raw in raw_block.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(None, 2)
        if fields[0] == "use" and len(fields) >= 2:
            use_path = fields[1]
        elif fields[0] == "set" and len(fields) == 3:
            assignments.append((fields[1], fields[2].strip()))
    return use_path, assignments


def normalize_invocation(
    raw_block: str,
    schema: OptionSchema,
    ctx: NetworkContext,
    bruteforce_markers: frozenset[str] = DEFAULT_BRUTEFORCE_MARKERS,
) -> NormalizedInvocation:
    """Complete a raw command block into an executable invocation.

    Missing required options are injected from the campaign context
    (RHOSTS/RPORT from recon, LHOST/LPORT from the listener, credential
    files from the configured wordlist) or from schema defaults.  A
    required option with no source at all is an error naming the option;
    a payload the schema does not list is a mismatch error.  The output is
    never a partial block.
    """
    use_path, raw_assignments = parse_command_block(raw_block)
    if use_path is None:
        raise NormalizationError("command block has no 'use <module>' line")
    if use_path != schema.module_path:
        raise NormalizationError(
            f"block uses {use_path!r} but the schema is for {schema.module_path!r}"
        )

    payload: str | None = None
    assignments: list[tuple[str, str]] = []
    seen: dict[str, int] = {}
    for name, value in raw_assignments:
        if name.upper() == "PAYLOAD":
            payload = value
            continue
        if name in seen:
            assignments[seen[name]] = (name, value)  # last set wins, console-style
        else:
            seen[name] = len(assignments)
            assignments.append((name, value))

    if payload is not None and payload not in {p.path for p in schema.payloads}:
        raise NormalizationError(
            f"payload {payload!r} is not supported by {schema.module_path}"
        )

    for opt in schema.required_options():
        current = dict(assignments).get(opt.name)
        if current:
            continue
        value = _context_value(opt.name, ctx)
        if value is None:
            value = opt.default
        if not value:
            raise NormalizationError(
                f"required option {opt.name} of {schema.module_path} has no value"
            )
        if opt.name in seen:
            assignments[seen[opt.name]] = (opt.name, value)
        else:
            seen[opt.name] = len(assignments)
            assignments.append((opt.name, value))

    return NormalizedInvocation(
        module_path=schema.module_path,
        option_assignments=tuple(assignments),
        payload=payload,
        bruteforce=classify_bruteforce(schema.module_path, schema, bruteforce_markers),
    )


# --- method evaluation -----------------------------------------------------


@dataclass(frozen=True)
class MethodScore:
    method: RectifyMethod
    total: int
    successes: int
    no_match: int

    @property
    def rate(self) -> float:
        return self.successes / self.total


def evaluate_methods(
    corpus: list[tuple[str, str]],
    db: ModuleDatabase,
    threshold: float = DEFAULT_THRESHOLD,
) -> dict[RectifyMethod, MethodScore]:
    """Score each strategy on (generated path, intended path) pairs.

    Success means the strategy returned exactly the intended path.  All
    intended paths must exist in the database, otherwise the corpus itself
    is broken.
    """
    if not corpus:
        raise CorpusError("evaluation corpus is empty")
    known = db.paths()
    for generated, intended in corpus:
        if intended not in known:
            raise CorpusError(f"intended path {intended!r} is not in the database")
    scores: dict[RectifyMethod, MethodScore] = {}
    for method in RectifyMethod:
        successes = 0
        no_match = 0
        for generated, intended in corpus:
            result = rectify(generated, db, method, threshold)
            if result.outcome is RectifyOutcome.NO_MATCH:
                no_match += 1
            elif result.matched_path == intended:
                successes += 1
        scores[method] = MethodScore(method, len(corpus), successes, no_match)
    return scores


def format_method_report(scores: dict[RectifyMethod, MethodScore]) -> str:
    """Human-readable per-method table, rates to 4 decimal places."""
    lines = ["method      rate    successes  no_match  total"]
    for method in RectifyMethod:
        s = scores[method]
        lines.append(
            f"{method.value:<11} {s.rate:.4f}  {s.successes:>9}  {s.no_match:>8}  {s.total:>5}"
        )
    return "\n".join(lines) + "\n"


# --- corpus file io --------------------------------------------------------


def load_corpus(text: str) -> list[tuple[str, str]]:
    """Parse ``generated<TAB>intended`` lines; ``#`` comments allowed."""
    corpus: list[tuple[str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise CorpusError(f"corpus line {lineno}: expected two tab-separated paths")
        corpus.append((parts[0], parts[1]))
    return corpus


def dump_corpus(corpus: list[tuple[str, str]]) -> str:
    return "".join(f"{generated}\t{intended}\n" for generated, intended in corpus)
