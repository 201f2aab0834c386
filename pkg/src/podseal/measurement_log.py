"""IMA-style measurement list with a pod-aware template.

Two entry templates are supported: the classic `ima-ng` (file digest, path)
and `ima-cgn`, which appends the cgroup path of the measuring process so a
verifier can attribute the entry to a Kubernetes pod.

Template hashing uses this project's canonical field encoding (u32 big-endian
length prefix per field, digest rendered as "sha256:<hex>"), documented in the
README; it is deliberately simpler than the kernel's binary template encoding.
The ascii serialization mirrors securityfs ascii_runtime_measurements:

    <pcr> <template_hash_hex> <template_name> sha256:<hex> <path> [<cgpath>]

single-space separated, lowercase hex, one newline-terminated line per entry.
Spaces and backslashes inside path/cgpath are escaped as \\x20 and \\x5c so the
grammar stays unambiguous. Parsing keeps whatever template hash the line
claims; replay() is the place where hashes are recomputed and enforced.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass

from .trust_anchor import PCR_IMA, Digest, PcrBank

TEMPLATE_IMA_NG = "ima-ng"
TEMPLATE_IMA_CGN = "ima-cgn"
TEMPLATES = (TEMPLATE_IMA_NG, TEMPLATE_IMA_CGN)

BOOT_AGGREGATE_PATH = "boot_aggregate"

_DIGEST_FIELD = re.compile(r"sha256:[0-9a-f]{64}")
_HEX64 = re.compile(r"[0-9a-f]{64}")
_ESCAPE_SEQ = re.compile(r"\\x(20|5c)")


class MalformedLogError(ValueError):
    """Ascii log text that does not match the line grammar."""

    def __init__(self, lineno: int, detail: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {detail}")


class EntryIntegrityError(ValueError):
    """An entry whose stored template hash does not recompute from its data."""

    def __init__(self, index: int):
        self.index = index
        super().__init__(f"entry {index}: stored template hash does not recompute")


@dataclass(frozen=True)
class TemplateData:
    """Template-specific fields of one measurement.

    cgpath is None for ima-ng and a string (possibly empty) for ima-cgn.
    """

    template_name: str
    filedata_hash: Digest
    path: str
    cgpath: str | None = None

    def __post_init__(self):
        if self.template_name not in TEMPLATES:
            raise ValueError(f"unknown template {self.template_name!r}")
        if not self.path or "\n" in self.path:
            raise ValueError("path must be non-empty and newline-free")
        if self.template_name == TEMPLATE_IMA_NG:
            if self.cgpath is not None:
                raise ValueError("ima-ng carries no cgpath")
        else:
            if self.cgpath is None:
                raise ValueError("ima-cgn requires a cgpath")
            if "\n" in self.cgpath:
                raise ValueError("cgpath must be newline-free")

    def fields(self) -> list[str]:
        out = [f"sha256:{self.filedata_hash.hex}", self.path]
        if self.template_name == TEMPLATE_IMA_CGN:
            out.append(self.cgpath)
        return out


def canonical_template_data(data: TemplateData) -> bytes:
    """Deterministic encoding: u32be field length || field bytes, in order."""
    blob = b""
    for text in data.fields():
        raw = text.encode()
        blob += struct.pack(">I", len(raw)) + raw
    return blob


def template_hash(data: TemplateData) -> Digest:
    return Digest.of(canonical_template_data(data))


@dataclass(frozen=True)
class MeasurementEntry:
    pcr_index: int
    template_hash: Digest
    data: TemplateData

    @property
    def template_name(self) -> str:
        return self.data.template_name

    @property
    def path(self) -> str:
        return self.data.path


@dataclass(frozen=True)
class FileEvent:
    """A file access observed on a node; the stimulus for one ML entry."""

    path: str
    content_digest: Digest
    cgpath: str
    timestamp: int = 0


class MeasurementLog:
    """Append-only ordered sequence of entries with measure-once dedup.

    An event is recorded only the first time its (template, path, digest,
    cgpath) tuple is seen, mirroring IMA's measure-once-per-content behavior.
    """

    def __init__(self):
        self._entries: list[MeasurementEntry] = []
        self._seen: set[tuple] = set()

    @property
    def count(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> tuple[MeasurementEntry, ...]:
        return tuple(self._entries)

    def segment(self, offset: int) -> tuple[MeasurementEntry, ...]:
        if not 0 <= offset <= len(self._entries):
            raise IndexError(f"offset {offset} beyond count {len(self._entries)}")
        return tuple(self._entries[offset:])

    def record(self, entry: MeasurementEntry) -> None:
        """Append without dedup; used when reconstructing a parsed log."""
        self._entries.append(entry)
        self._seen.add(_dedup_key(entry.data))


def _dedup_key(data: TemplateData) -> tuple:
    return (data.template_name, data.path, data.filedata_hash.value, data.cgpath)


def append_measurement(
    log: MeasurementLog, bank: PcrBank, event: FileEvent, template: str = TEMPLATE_IMA_CGN
) -> MeasurementEntry | None:
    """Measure one event: build the entry, append it, extend PCR 10.

    Returns None when the event was already measured (dedup), otherwise the
    new entry.
    """
    if template == TEMPLATE_IMA_NG:
        data = TemplateData(TEMPLATE_IMA_NG, event.content_digest, event.path)
    else:
        data = TemplateData(TEMPLATE_IMA_CGN, event.content_digest, event.path, event.cgpath)
    key = _dedup_key(data)
    if key in log._seen:
        return None
    entry = MeasurementEntry(pcr_index=PCR_IMA, template_hash=template_hash(data), data=data)
    log._entries.append(entry)
    log._seen.add(key)
    bank.extend(PCR_IMA, entry.template_hash)
    return entry


def boot_aggregate_entry(log: MeasurementLog, bank: PcrBank) -> MeasurementEntry:
    """Synthetic first entry binding the (emulated) boot-time registers.

    The aggregate digest covers the concatenated values of PCRs 0..7 at the
    moment of the call, mirroring the shape of a real IMA log.
    """
    aggregate = Digest.of(b"".join(bank.value(i).value for i in range(8)))
    event = FileEvent(path=BOOT_AGGREGATE_PATH, content_digest=aggregate, cgpath="")
    entry = append_measurement(log, bank, event, template=TEMPLATE_IMA_NG)
    if entry is None:
        raise RuntimeError("boot aggregate recorded twice")
    return entry


def replay(entries, initial: Digest | None = None) -> Digest:
    """Fold the extend operation over entries, enforcing entry integrity.

    Every entry's template hash is recomputed from its data and must match the
    stored value (EntryIntegrityError names the offending index). Returns the
    final register value.
    """
    register = initial if initial is not None else Digest.zero()
    for index, entry in enumerate(entries):
        if template_hash(entry.data) != entry.template_hash:
            raise EntryIntegrityError(index)
        register = Digest.of(register.value + entry.template_hash.value)
    return register


def escape_field(text: str) -> str:
    return text.replace("\\", "\\x5c").replace(" ", "\\x20")


def unescape_field(text: str) -> str:
    # \x5c must not be re-examined after substitution, so scan once.
    return _ESCAPE_SEQ.sub(lambda m: " " if m.group(1) == "20" else "\\", text)


def emit_entry(entry: MeasurementEntry) -> str:
    fields = [f"sha256:{entry.data.filedata_hash.hex}", escape_field(entry.data.path)]
    if entry.template_name == TEMPLATE_IMA_CGN:
        fields.append(escape_field(entry.data.cgpath))
    return " ".join(
        [str(entry.pcr_index), entry.template_hash.hex, entry.template_name, *fields]
    )


def emit_ascii(log: MeasurementLog) -> str:
    """Newline-terminated ascii form of the whole log."""
    return "".join(emit_entry(e) + "\n" for e in log.entries)


def parse_entry_line(line: str, lineno: int = 1) -> MeasurementEntry:
    tokens = line.split(" ")
    if len(tokens) < 5:
        raise MalformedLogError(lineno, f"expected at least 5 fields, got {len(tokens)}")
    pcr_text, hash_text, template_name = tokens[0], tokens[1], tokens[2]
    if not pcr_text.isdigit() or pcr_text != str(int(pcr_text)):
        raise MalformedLogError(lineno, f"bad pcr field {pcr_text!r}")
    pcr_index = int(pcr_text)
    if not 0 <= pcr_index <= 23:
        raise MalformedLogError(lineno, f"pcr index {pcr_index} out of range")
    if not _HEX64.fullmatch(hash_text):
        raise MalformedLogError(lineno, "template hash must be 64 lowercase hex chars")

    if template_name == TEMPLATE_IMA_NG:
        expected = 5
    elif template_name == TEMPLATE_IMA_CGN:
        expected = 6
    else:
        raise MalformedLogError(lineno, f"unknown template name {template_name!r}")
    if len(tokens) != expected:
        raise MalformedLogError(
            lineno, f"{template_name} expects {expected} fields, got {len(tokens)}"
        )

    digest_field = tokens[3]
    if not _DIGEST_FIELD.fullmatch(digest_field):
        raise MalformedLogError(lineno, f"bad digest field {digest_field!r}")
    filedata = Digest.from_hex(digest_field[len("sha256:"):])
    path = unescape_field(tokens[4])
    if not path:
        raise MalformedLogError(lineno, "empty path")
    cgpath = unescape_field(tokens[5]) if template_name == TEMPLATE_IMA_CGN else None

    try:
        data = TemplateData(template_name, filedata, path, cgpath)
    except ValueError as exc:
        raise MalformedLogError(lineno, str(exc)) from exc
    return MeasurementEntry(
        pcr_index=pcr_index, template_hash=Digest.from_hex(hash_text), data=data
    )


def parse_ascii(text: str) -> MeasurementLog:
    """Parse an ascii measurement list; raises MalformedLogError with the
    offending line number. Stored template hashes are kept as claimed."""
    log = MeasurementLog()
    for lineno, line in enumerate(text.split("\n"), start=1):
        if line == "":
            continue
        log.record(parse_entry_line(line, lineno))
    return log
