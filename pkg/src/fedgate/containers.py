"""Write-once/read-many containers with sidecar offset indexes.

Two formats share one lifecycle (Writing -> Sealed):

* tapes: a single well-formed XML document ``<tape>`` whose ``<record>``
  children each embed one Surrogate document;
* arcs: a concatenation of ``"<ds-uri> <media-type> <datetime> <length>\\n"``
  headers, each followed by ``length`` payload bytes and a newline.

The index lives next to the container in ``<container>.idx`` with lines
``<id>\\t<datetime>\\t<offset>\\t<length>``. For tapes (offset, length)
delimit the whole ``<record>`` element; for arcs they delimit the payload.
"""

from __future__ import annotations

import enum
import hashlib
import os
import re
import stat
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    BadArgument,
    DuplicateRecord,
    IntegrityViolation,
    NotFound,
    ReadOnlyViolation,
    SealError,
)
from .model import (
    ContentURI,
    FedDatetime,
    check_window,
    classify_uri,
    datetime_in_window,
)
from .surrogate import parse_surrogate, serialize_surrogate

TAPE_NS = "urn:fedgate:tape:1"
TAPE_PROLOGUE = f'<?xml version="1.0" encoding="UTF-8"?>\n<tape xmlns="{TAPE_NS}">\n'.encode()
TAPE_EPILOGUE = b"</tape>\n"

_RECORD_OPEN_RE = re.compile(rb'<record id="([^"]*)" datetime="([^"]*)">')
_ARC_HEADER_RE = re.compile(rb"^(\S+) (\S+) (\S+) (\d+)$")


class State(enum.Enum):
    WRITING = "Writing"
    SEALED = "Sealed"


@dataclass(frozen=True)
class IndexEntry:
    record_id: ContentURI
    datetime: FedDatetime
    offset: int
    length: int

    def line(self) -> str:
        return f"{self.record_id}\t{self.datetime}\t{self.offset}\t{self.length}\n"


def index_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".idx")


def read_index(path) -> list[IndexEntry]:
    ipath = index_path(path)
    if not ipath.exists():
        raise NotFound(f"index missing: {ipath}")
    entries = []
    with open(ipath, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise IntegrityViolation(f"{ipath}:{lineno}: malformed index line")
            entries.append(IndexEntry(ContentURI(parts[0]), FedDatetime.parse(parts[1]), int(parts[2]), int(parts[3])))
    return entries


def _write_index(path, entries):
    ipath = index_path(path)
    tmp = ipath.with_name(ipath.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(e.line() for e in entries)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, ipath)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _escape_attr(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


class _Container:
    """Shared Writing/Sealed lifecycle; subclasses define the record encoding."""

    prologue = b""
    epilogue = b""

    def __init__(self, path, state, entries):
        self.path = Path(path)
        self.state = state
        self._entries = list(entries)
        self._by_id = {e.record_id: e for e in self._entries}
        self._fh = None
        self._pos = 0

    @classmethod
    def create(cls, path):
        path = Path(path)
        if path.exists():
            raise BadArgument(f"container already exists: {path}")
        c = cls(path, State.WRITING, [])
        c._fh = open(path, "wb")  # noqa: SIM115 - held until seal/abort
        c._fh.write(cls.prologue)
        c._pos = len(cls.prologue)
        return c

    @classmethod
    def open(cls, path):
        """Open a sealed container for reading."""
        path = Path(path)
        if not path.exists():
            raise NotFound(f"container missing: {path}")
        return cls(path, State.SEALED, read_index(path))

    @property
    def record_count(self) -> int:
        return len(self._entries)

    @property
    def records(self) -> list[IndexEntry]:
        return list(self._entries)

    @property
    def sealed(self) -> bool:
        return self.state is State.SEALED

    def __contains__(self, record_id):
        return classify_uri(record_id) in self._by_id

    def _require_writing(self):
        if self.state is not State.WRITING:
            raise ReadOnlyViolation(f"{self.path} is sealed")

    def _require_sealed(self):
        if self.state is not State.SEALED:
            raise BadArgument(f"{self.path} is not sealed yet")

    def _append_raw(self, record_id, prefix, body, suffix):
        if record_id in self._by_id:
            raise DuplicateRecord(f"{record_id} already in {self.path}")
        start = self._pos
        self._fh.write(prefix)
        self._fh.write(body)
        self._fh.write(suffix)
        self._pos += len(prefix) + len(body) + len(suffix)
        return start

    def _add_entry(self, entry):
        self._entries.append(entry)
        self._by_id[entry.record_id] = entry

    @property
    def size(self) -> int:
        """Bytes written so far (Writing) or file size (Sealed)."""
        return self._pos if self.state is State.WRITING else self.path.stat().st_size

    def seal(self):
        self._require_writing()
        mark = self._pos
        try:
            self._fh.write(self.epilogue)
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._verify_sealed_bytes()
            _write_index(self.path, self._entries)
        except (OSError, ValueError, ET.ParseError) as e:
            try:
                self._fh.truncate(mark)
                self._fh.seek(mark)
            except (OSError, ValueError):
                pass
            raise SealError(f"sealing {self.path} failed: {e}") from e
        self._fh.close()
        self._fh = None
        os.chmod(self.path, stat.S_IRUSR | stat.S_IRGRP | stat.S_IROTH)
        self.state = State.SEALED
        return self

    def abort(self):
        """Discard a container still being written."""
        if self._fh is not None:
            self._fh.close()
            self._fh = None
        for p in (self.path, index_path(self.path)):
            if p.exists():
                p.unlink()

    def _verify_sealed_bytes(self):
        pass

    def _read(self, offset, length) -> bytes:
        with open(self.path, "rb") as f:
            f.seek(offset)
            data = f.read(length)
        if len(data) != length:
            raise IntegrityViolation(f"{self.path}: short read at offset {offset}")
        return data

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def entry(self, record_id) -> IndexEntry:
        try:
            return self._by_id[classify_uri(record_id)]
        except KeyError:
            raise NotFound(f"{record_id} not in {self.path}") from None

    def list(self, start=None, until=None):
        """(record_id, datetime) pairs in the window, ordered by (datetime, id)."""
        self._require_sealed()
        check_window(start, until)
        hits = [(e.datetime, e.record_id) for e in self._entries if datetime_in_window(e.datetime, start, until)]
        hits.sort()
        return [(rid, dt) for dt, rid in hits]

    def digest(self) -> str:
        return file_digest(self.path)


class TapeFile(_Container):
    """Sealed XML concatenation of Surrogate documents."""

    prologue = TAPE_PROLOGUE
    epilogue = TAPE_EPILOGUE

    def append(self, doc: bytes, dt) -> ContentURI:
        self._require_writing()
        s = parse_surrogate(doc)
        if serialize_surrogate(s) != doc:
            raise BadArgument("tape records must be canonical surrogate documents")
        dt = dt if isinstance(dt, FedDatetime) else FedDatetime.parse(dt)
        if dt != s.surrogate_datetime:
            raise BadArgument(f"record datetime {dt} differs from the surrogate's {s.surrogate_datetime}")
        rid = s.surrogate_uri
        prefix = f'<record id="{_escape_attr(rid.value)}" datetime="{dt}">'.encode()
        start = self._append_raw(rid, prefix, doc, b"</record>\n")
        self._add_entry(IndexEntry(rid, dt, start, len(prefix) + len(doc) + len(b"</record>")))
        return rid

    def _verify_sealed_bytes(self):
        # full well-formedness parse of the finished document
        for _ in ET.iterparse(str(self.path), events=("end",)):
            pass

    def get_record(self, record_id) -> bytes:
        """Raw ``<record>`` element bytes."""
        self._require_sealed()
        e = self.entry(record_id)
        return self._read(e.offset, e.length)

    def get(self, record_id) -> bytes:
        """The embedded Surrogate document, byte for byte."""
        rec = self.get_record(record_id)
        if not rec.startswith(b"<record ") or not rec.endswith(b"</record>"):
            raise IntegrityViolation(f"{self.path}: index does not delimit record {record_id}")
        return rec[rec.index(b">") + 1 : -len(b"</record>")]


class ArcFile(_Container):
    """Sealed concatenation of datastream bitstreams."""

    def __init__(self, path, state, entries):
        super().__init__(path, state, entries)
        self._media = {}

    def append(self, ds_uri, media_type: str, dt, payload: bytes) -> IndexEntry:
        self._require_writing()
        ds_uri = classify_uri(ds_uri)
        if not media_type or any(c.isspace() for c in media_type):
            raise BadArgument(f"media type must be non-empty without whitespace: {media_type!r}")
        dt = dt if isinstance(dt, FedDatetime) else FedDatetime.parse(dt)
        header = f"{ds_uri} {media_type} {dt} {len(payload)}\n".encode()
        start = self._append_raw(ds_uri, header, payload, b"\n")
        entry = IndexEntry(ds_uri, dt, start + len(header), len(payload))
        self._add_entry(entry)
        self._media[ds_uri] = media_type
        return entry

    def _header_before(self, e: IndexEntry) -> tuple:
        window = 512
        while True:
            lo = max(0, e.offset - window)
            chunk = self._read(lo, e.offset - lo)
            if not chunk.endswith(b"\n"):
                raise IntegrityViolation(f"{self.path}: no header before offset {e.offset}")
            head = chunk[:-1]
            nl = head.rfind(b"\n")
            if nl >= 0 or lo == 0:
                line = head[nl + 1 :]
                break
            window *= 4
        m = _ARC_HEADER_RE.match(line)
        if m is None:
            raise IntegrityViolation(f"{self.path}: corrupt header for {e.record_id}")
        uri, media, dt, length = (g.decode("utf-8", "replace") for g in m.groups())
        if uri != e.record_id.value or int(length) != e.length or dt != str(e.datetime):
            raise IntegrityViolation(f"{self.path}: header disagrees with index for {e.record_id}")
        return media

    def get(self, ds_uri) -> tuple[str, bytes]:
        self._require_sealed()
        e = self.entry(ds_uri)
        media = self._media.get(e.record_id)
        if media is None:
            media = self._header_before(e)
            self._media[e.record_id] = media
        return media, self._read(e.offset, e.length)


# -- sequential scans (the ground truth the index is checked against) ------


@dataclass(frozen=True)
class FsckIssue:
    kind: str  # mismatch | truncation | header | missing | unindexed | malformed
    record_id: str | None
    detail: str

    def __str__(self):
        rid = f" {self.record_id}" if self.record_id else ""
        return f"{self.kind}{rid}: {self.detail}"


def scan_tape(data: bytes):
    """Walk a tape sequentially; returns (entries, issues)."""
    entries, issues = [], []
    if not data.startswith(TAPE_PROLOGUE):
        issues.append(FsckIssue("header", None, "tape prologue damaged"))
        return entries, issues
    pos = len(TAPE_PROLOGUE)
    while True:
        if data.startswith(TAPE_EPILOGUE, pos):
            if pos + len(TAPE_EPILOGUE) != len(data):
                issues.append(FsckIssue("malformed", None, f"trailing bytes after </tape> at {pos}"))
            break
        if pos >= len(data) or TAPE_EPILOGUE.startswith(data[pos:]):
            issues.append(FsckIssue("truncation", None, f"tape ends at byte {len(data)} without </tape>"))
            break
        m = _RECORD_OPEN_RE.match(data, pos)
        end = data.find(b"</record>", pos)
        if m is None:
            issues.append(FsckIssue("header", None, f"bad record start at byte {pos}"))
            break
        if end < 0:
            issues.append(FsckIssue("truncation", m.group(1).decode("utf-8", "replace"), f"record at {pos} is cut off"))
            break
        length = end + len(b"</record>") - pos
        rid_raw = m.group(1).decode("utf-8", "replace").replace("&quot;", '"').replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&")
        try:
            entry = IndexEntry(ContentURI(rid_raw), FedDatetime.parse(m.group(2).decode()), pos, length)
        except Exception as e:  # noqa: BLE001 - fsck reports, never raises
            issues.append(FsckIssue("header", rid_raw, f"bad record attributes at {pos}: {e}"))
            entry = None
        if entry is not None:
            doc = data[m.end() : end]
            try:
                s = parse_surrogate(doc)
                if s.surrogate_uri != entry.record_id or s.surrogate_datetime != entry.datetime:
                    issues.append(FsckIssue("header", rid_raw, "record attributes disagree with embedded surrogate"))
            except Exception as e:  # noqa: BLE001
                issues.append(FsckIssue("malformed", rid_raw, f"embedded surrogate invalid: {e}"))
            entries.append(entry)
        pos = end + len(b"</record>")
        if data[pos : pos + 1] != b"\n":
            issues.append(FsckIssue("malformed", rid_raw, f"missing newline after record at {pos}"))
            break
        pos += 1
    return entries, issues


def scan_arc(data: bytes):
    entries, issues = [], []
    pos = 0
    while pos < len(data):
        nl = data.find(b"\n", pos)
        if nl < 0:
            issues.append(FsckIssue("truncation", None, f"header at {pos} is cut off"))
            break
        m = _ARC_HEADER_RE.match(data[pos:nl])
        if m is None:
            issues.append(FsckIssue("header", None, f"corrupt header at byte {pos}"))
            break
        rid = m.group(1).decode("utf-8", "replace")
        try:
            uri = ContentURI(rid)
            dt = FedDatetime.parse(m.group(3).decode())
        except Exception as e:  # noqa: BLE001
            issues.append(FsckIssue("header", rid, f"bad header fields at {pos}: {e}"))
            break
        length = int(m.group(4))
        start = nl + 1
        if start + length + 1 > len(data):
            issues.append(FsckIssue("truncation", rid, f"payload needs {length} bytes, file ends early"))
            break
        if data[start + length : start + length + 1] != b"\n":
            issues.append(FsckIssue("header", rid, f"payload at {start} not followed by newline; length field wrong?"))
            break
        entries.append(IndexEntry(uri, dt, start, length))
        pos = start + length + 1
    return entries, issues


def rebuild_index(path) -> list[IndexEntry]:
    """Recreate the sidecar index from the container alone."""
    path = Path(path)
    data = path.read_bytes()
    entries, issues = (scan_tape if data.startswith(b"<?xml") else scan_arc)(data)
    if issues:
        raise IntegrityViolation(f"{path}: cannot rebuild index: {issues[0]}")
    _write_index(path, entries)
    return entries


def container_fsck(path) -> list[FsckIssue]:
    """Cross-check a sealed container against its index; empty list when healthy."""
    path = Path(path)
    if not path.exists():
        raise NotFound(f"container missing: {path}")
    ipath = index_path(path)
    if not ipath.exists():
        raise NotFound(f"index missing: {ipath}")
    data = path.read_bytes()
    is_tape = data.startswith(b"<?xml") or path.name.endswith(".tape.xml")
    scanned, issues = (scan_tape if is_tape else scan_arc)(data)
    issues = list(issues)
    if is_tape and not issues:
        try:
            ET.fromstring(data)
        except ET.ParseError as e:
            issues.append(FsckIssue("malformed", None, f"not well-formed XML: {e}"))
    try:
        indexed = read_index(path)
    except IntegrityViolation as e:
        return issues + [FsckIssue("malformed", None, str(e))]

    by_id = {e.record_id: e for e in scanned}
    seen = set()
    for e in indexed:
        seen.add(e.record_id)
        if e.offset + e.length > len(data):
            issues.append(FsckIssue("truncation", e.record_id.value, f"indexed extent {e.offset}+{e.length} beyond EOF {len(data)}"))
            continue
        s = by_id.get(e.record_id)
        if s is None:
            issues.append(FsckIssue("missing", e.record_id.value, "indexed record not found by sequential scan"))
        elif s != e:
            issues.append(FsckIssue("mismatch", e.record_id.value, f"index says {e.offset}+{e.length}@{e.datetime}, container says {s.offset}+{s.length}@{s.datetime}"))
    for s in scanned:
        if s.record_id not in seen:
            issues.append(FsckIssue("unindexed", s.record_id.value, f"record at {s.offset} has no index entry"))
    return issues
