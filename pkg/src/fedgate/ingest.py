"""Batch ingest: submission packages become sealed tapes and arcs.

Every object gets a freshly minted DO-URI appended to whatever URIs it
inherited, one new Surrogate, and one new Datastream-URI per bitstream.
Containers are sealed and then registered with the node in one step, so a
failed batch leaves nothing visible behind.
"""

from __future__ import annotations

import json
import mimetypes
import random
from dataclasses import dataclass, field
from pathlib import Path

from .containers import ArcFile, TapeFile
from .errors import (
    BadArgument,
    EmptyBatch,
    NoSuchConstituent,
    NoSuchInterface,
    StaleDatetime,
)
from .model import (
    ContentURI,
    DatastreamPolicy,
    DatastreamRef,
    DigitalObjectRef,
    EntityKind,
    FedDatetime,
    Surrogate,
    SurrogatePolicy,
    as_datetime,
    classify_uri,
    mint_uri,
)
from .repository import ARC_SUFFIX, TAPE_SUFFIX, RepositoryNode
from .surrogate import parse_surrogate, serialize_surrogate

LOCAL_NAME_KEY = "urn:fedgate:prop:local-name"
DEFAULT_MAX_RECORDS = 10_000
DEFAULT_MAX_BYTES = 1 << 30


@dataclass
class Bitstream:
    local_name: str
    media_type: str
    data: bytes
    properties: tuple = ()


@dataclass
class SubmissionObject:
    bitstreams: list
    inherited_do_uris: tuple = ()
    properties: tuple = ()
    label: str | None = None

    def __post_init__(self):
        names = [b.local_name for b in self.bitstreams]
        if len(set(names)) != len(names):
            raise BadArgument(f"duplicate local-name in object {self.label or ''}".strip())
        self.inherited_do_uris = tuple(classify_uri(u) for u in self.inherited_do_uris)


@dataclass
class SubmissionPackage:
    objects: list = field(default_factory=list)


def load_package(path) -> SubmissionPackage:
    """Read a package directory: one subdirectory per object.

    Each object directory holds ``object.json`` and its payload files.
    ``object.json`` may list ``bitstreams`` as ``{"file", "media_type",
    "properties"}``; otherwise every other file is a bitstream and its media
    type is guessed from the extension.
    """
    root = Path(path)
    if not root.is_dir():
        raise BadArgument(f"not a package directory: {root}")
    objects = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        meta_path = d / "object.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        listed = meta.get("bitstreams")
        if listed is None:
            listed = [{"file": f.name} for f in sorted(d.iterdir()) if f.is_file() and f.name != "object.json"]
        bits = []
        for b in listed:
            f = d / b["file"]
            media = b.get("media_type") or mimetypes.guess_type(f.name)[0] or "application/octet-stream"
            bits.append(Bitstream(b.get("local_name", b["file"]), media, f.read_bytes(), tuple(map(tuple, b.get("properties", ())))))
        objects.append(SubmissionObject(
            bits,
            tuple(meta.get("inherited_do_uris", ())),
            tuple(map(tuple, meta.get("properties", ()))),
            label=d.name,
        ))
    return SubmissionPackage(objects)


@dataclass
class ManifestObject:
    label: str | None
    do_uris: list
    surrogate_uri: str
    ds_uris: dict  # local-name -> ds_uri
    surrogate_datetime: str


@dataclass
class IngestManifest:
    objects: list = field(default_factory=list)
    tapes: list = field(default_factory=list)
    arcs: list = field(default_factory=list)
    bindings: dict = field(default_factory=dict)

    @property
    def surrogate_uris(self):
        return [o.surrogate_uri for o in self.objects]

    @property
    def ds_uris(self):
        return [u for o in self.objects for u in o.ds_uris.values()]

    @property
    def do_uris(self):
        return [u for o in self.objects for u in o.do_uris]

    def to_json(self) -> str:
        return json.dumps({
            "objects": [o.__dict__ for o in self.objects],
            "tapes": self.tapes,
            "arcs": self.arcs,
            "bindings": self.bindings,
        }, indent=1)


class _Writer:
    """Rolls tapes and arcs over to numbered siblings when a cap is hit."""

    def __init__(self, directory, stem, max_records, max_bytes):
        self.directory = Path(directory)
        self.stem = stem
        self.max_records = max_records
        self.max_bytes = max_bytes
        self.tapes, self.arcs = [], []

    def _current(self, kind, cls, suffix, need):
        items = self.tapes if kind == "tape" else self.arcs
        if items:
            c = items[-1]
            if c.record_count < self.max_records and (c.record_count == 0 or c.size + need <= self.max_bytes):
                return c
        c = cls.create(self.directory / f"{self.stem}-{len(items):04d}{suffix}")
        items.append(c)
        return c

    def tape_append(self, doc, dt):
        return self._current("tape", TapeFile, TAPE_SUFFIX, len(doc) + 256).append(doc, dt)

    def arc_append(self, ds_uri, media, dt, data):
        return self._current("arc", ArcFile, ARC_SUFFIX, len(data) + 256).append(ds_uri, media, dt, data)

    def seal(self):
        for c in (*self.tapes, *self.arcs):
            c.seal()

    def abort(self):
        for c in (*self.tapes, *self.arcs):
            c.abort()


def _stem(ingest_datetime, rng):
    return f"batch-{ingest_datetime.to_datetime():%Y%m%dT%H%M%S}-{rng.getrandbits(32):08x}"


def _commit(node: RepositoryNode, writer: _Writer, manifest: IngestManifest, registry, base_url):
    """Seal, register bindings and containers; undo the containers on any failure."""
    try:
        writer.seal()
        if registry is not None and base_url is not None:
            for comp, bindings in node.bindings(base_url).items():
                registry.register(comp, bindings, node.registry_metadata(comp))
                manifest.bindings[comp.value] = {b.interface_type.value: b.interface_url.value for b in bindings}
        node.register_containers(writer.tapes, writer.arcs)
    except BaseException:
        writer.abort()
        raise
    manifest.tapes = [str(t.path) for t in writer.tapes]
    manifest.arcs = [str(a.path) for a in writer.arcs]
    return manifest


def ingest_batch(
    pkg: SubmissionPackage,
    namespace: str,
    node: RepositoryNode,
    ingest_datetime=None,
    rng: random.Random | None = None,
    registry=None,
    base_url: str | None = None,
    max_records: int = DEFAULT_MAX_RECORDS,
    max_bytes: int = DEFAULT_MAX_BYTES,
) -> IngestManifest:
    if not pkg.objects:
        raise EmptyBatch("submission package has no objects")
    if node.storage_dir is None:
        raise BadArgument("target node has no storage directory")
    if node.datastream_repo is None and any(o.bitstreams for o in pkg.objects):
        raise NoSuchInterface(f"{node.repository_uri} has no Datastream Repository for bitstreams")
    dt = as_datetime(ingest_datetime) or FedDatetime.now()
    rng = rng or random.Random()
    node.storage_dir.mkdir(parents=True, exist_ok=True)
    writer = _Writer(node.storage_dir, _stem(dt, rng), max_records, max_bytes)
    manifest = IngestManifest()
    try:
        for obj in pkg.objects:
            # inherited URIs come first; they are used as non-protocol-based whatever their scheme
            do_uri = mint_uri(namespace, EntityKind.DO, rng)
            refs, ds_map = [], {}
            for b in obj.bitstreams:
                ds_uri = mint_uri(namespace, EntityKind.DATASTREAM, rng)
                writer.arc_append(ds_uri, b.media_type, dt, b.data)
                refs.append(DatastreamRef(ds_uri, None, dt, b.media_type, ((LOCAL_NAME_KEY, b.local_name), *b.properties)))
                ds_map[b.local_name] = ds_uri.value
            su = Surrogate(
                mint_uri(namespace, EntityKind.SURROGATE, rng),
                DigitalObjectRef((*obj.inherited_do_uris, do_uri)),
                dt,
                tuple(refs),
                properties=obj.properties,
            )
            writer.tape_append(serialize_surrogate(su), dt)
            manifest.objects.append(ManifestObject(obj.label, [u.value for u in su.do_uris], su.surrogate_uri.value, ds_map, str(dt)))
    except BaseException:
        writer.abort()
        raise
    return _commit(node, writer, manifest, registry, base_url)


def reingest_updated(
    node: RepositoryNode,
    do_uri,
    replacement,
    ingest_datetime=None,
    rng: random.Random | None = None,
    registry=None,
    base_url: str | None = None,
    namespace: str | None = None,
) -> IngestManifest:
    """Replace one bitstream by ingesting a new object that shares everything else.

    ``replacement`` is (local-name, media type, bytes). The new Surrogate
    keeps the DO-URIs, gets a new Surrogate-URI, and the replaced bitstream
    gets a new Datastream-URI; the previous Surrogate stays available.
    """
    if node.policy.surrogate_policy is not SurrogatePolicy.NEW or node.policy.datastream_policy is not DatastreamPolicy.NEW:
        raise BadArgument("update-as-reingest needs a NewSurrogate/NewDatastream repository")
    local_name, media_type, data = replacement
    old = parse_surrogate(node.obtain_surrogate(classify_uri(do_uri)))
    dt = as_datetime(ingest_datetime) or FedDatetime.now()
    if dt <= old.surrogate_datetime:
        raise StaleDatetime(f"reingest at {dt} is not later than the current Surrogate ({old.surrogate_datetime})")
    hit = [i for i, d in enumerate(old.datastreams) if d.get_property(LOCAL_NAME_KEY) == local_name]
    if not hit:
        raise NoSuchConstituent(f"{do_uri} has no constituent named {local_name!r}")
    namespace = namespace or node.namespace
    rng = rng or random.Random()
    writer = _Writer(node.storage_dir, _stem(dt, rng), DEFAULT_MAX_RECORDS, DEFAULT_MAX_BYTES)
    try:
        ds_uri = mint_uri(namespace, EntityKind.DATASTREAM, rng)
        writer.arc_append(ds_uri, media_type, dt, data)
        prev = old.datastreams[hit[0]]
        datastreams = list(old.datastreams)
        datastreams[hit[0]] = DatastreamRef(ds_uri, None, dt, media_type, prev.properties)
        new = Surrogate(mint_uri(namespace, EntityKind.SURROGATE, rng), old.object, dt, tuple(datastreams), old.surrogate_url, old.properties)
        writer.tape_append(serialize_surrogate(new), dt)
    except BaseException:
        writer.abort()
        raise
    ds_map = {d.get_property(LOCAL_NAME_KEY, d.identifier.value): d.identifier.value for d in new.datastreams}
    manifest = IngestManifest([ManifestObject(None, [u.value for u in new.do_uris], new.surrogate_uri.value, ds_map, str(dt))])
    return _commit(node, writer, manifest, registry, base_url)


def manifest_uris(manifest: IngestManifest) -> set:
    """Every Content Object URI a manifest introduced (DO, Surrogate and Datastream)."""
    return {ContentURI(u) for u in (*manifest.do_uris, *manifest.surrogate_uris, *manifest.ds_uris)}
