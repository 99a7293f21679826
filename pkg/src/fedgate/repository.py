"""A Tier-1 node: one Surrogate Repository plus an optional Datastream Repository.

The node serves sealed tapes and arcs. Registration of new containers
builds a fresh immutable view and swaps it in with one assignment, so
readers never lock and in-flight requests keep the view they started with.
"""

from __future__ import annotations

import bisect
import json
import logging
import random
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .containers import ArcFile, TapeFile, index_path
from .errors import (
    ConfigError,
    DuplicateRecord,
    IdDoesNotExist,
    IntegrityViolation,
    NoRecordsMatch,
    NoSuchInterface,
    StaleDatetime,
)
from .httpd import Response
from .model import (
    ContentURI,
    DatastreamPolicy,
    DatetimeTrigger,
    EntityKind,
    FedDatetime,
    InterfaceBinding,
    InterfaceType,
    RepoKind,
    RepositoryIdentity,
    SurrogatePolicy,
    UpdatePolicy,
    check_window,
    classify_uri,
    datetime_change_required,
    mint_uri,
)
from .service import RepositoryApp
from .surrogate import parse_surrogate
from .wire import IdentifierTuple, Location, render_locations

log = logging.getLogger(__name__)

TAPE_SUFFIX = ".tape"
ARC_SUFFIX = ".arc"
ROLE_KEY = "urn:fedgate:meta:role"
KIND_KEY = "urn:fedgate:meta:repo-kind"
GRANULARITY = "YYYY-MM-DDThh:mm:ssZ"

SURROGATE_PATHS = {
    InterfaceType.HARVEST_SURROGATES: "/sur/oaipmh",
    InterfaceType.HARVEST_IDENTIFIERS: "/sur/oaipmh",
    InterfaceType.OBTAIN_SURROGATE: "/openurl",
    InterfaceType.LOCATE_SURROGATES: "/openurl",
}
DATASTREAM_PATHS = {
    InterfaceType.OBTAIN_DATASTREAM: "/openurl",
    InterfaceType.HARVEST_DATASTREAM_IDENTIFIERS: "/ds/oaipmh",
}


@dataclass(frozen=True)
class SurrogateEntry:
    surrogate_uri: ContentURI
    datetime: FedDatetime
    tape: TapeFile
    do_uris: tuple
    ds_uris: tuple
    ds_urls: tuple
    surrogate_url: ContentURI | None
    surrogate: object = field(compare=False, repr=False, default=None)

    def key(self):
        return (self.datetime, self.surrogate_uri)

    def identifiers(self) -> IdentifierTuple:
        return IdentifierTuple(self.surrogate_uri, self.do_uris, self.ds_uris, self.datetime, self.ds_urls)

    def location(self, repository_uri) -> Location:
        return Location(self.surrogate_uri, repository_uri, self.datetime, self.surrogate_url)


@dataclass(frozen=True)
class _View:
    tapes: tuple = ()
    arcs: tuple = ()
    surrogates: dict = field(default_factory=dict)  # su -> SurrogateEntry
    mentions: dict = field(default_factory=dict)  # do/ds/ds_url -> tuple of su
    order: tuple = ()  # sorted (datetime, su)
    datastreams: dict = field(default_factory=dict)  # ds_uri -> (datetime, arc)
    ds_order: tuple = ()  # sorted (datetime, ds_uri)


class _Window:
    """Lazy slice of a sorted (datetime, key) sequence; docs load per page."""

    def __init__(self, keys, lo, hi, make):
        self._keys = keys
        self._lo = lo
        self._hi = hi
        self._make = make

    def __len__(self):
        return self._hi - self._lo

    def __getitem__(self, i):
        if isinstance(i, slice):
            start, stop, step = i.indices(len(self))
            return [self._make(self._keys[self._lo + j]) for j in range(start, stop, step)]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        return self._make(self._keys[self._lo + i])

    def __iter__(self):
        for j in range(self._lo, self._hi):
            yield self._make(self._keys[j])


def _bounds(keys, start, until):
    check_window(start, until)
    lo = 0 if start is None else bisect.bisect_left(keys, (start,))
    hi = len(keys) if until is None else bisect.bisect_left(keys, (until.plus(1),))
    return lo, max(lo, hi)


def interface_uri(namespace, component_uri, itype) -> ContentURI:
    """Stable Interface-URI for (component, type): a v4-shaped UUID seeded by both."""
    rng = random.Random(f"{component_uri}|{InterfaceType(itype).value}")
    return mint_uri(namespace, EntityKind.INTERFACE, rng)


class RepositoryNode:
    def __init__(
        self,
        surrogate_repo: RepositoryIdentity,
        datastream_repo: RepositoryIdentity | None = None,
        policy: UpdatePolicy | None = None,
        storage_dir=None,
        namespace: str = "info:fedgate",
        datetime_trigger: DatetimeTrigger = DatetimeTrigger.CONSTITUENCY_AND_DATASTREAM_CHANGES,
        name: str | None = None,
    ):
        if surrogate_repo.repo_kind is not RepoKind.SURROGATE:
            raise ConfigError("surrogate_repo must be a SurrogateRepository identity")
        if datastream_repo is not None and datastream_repo.repo_kind is not RepoKind.DATASTREAM:
            raise ConfigError("datastream_repo must be a DatastreamRepository identity")
        self.surrogate_repo = surrogate_repo
        self.datastream_repo = datastream_repo
        self.policy = policy or UpdatePolicy()
        self.storage_dir = Path(storage_dir) if storage_dir is not None else None
        self.namespace = namespace
        self.datetime_trigger = datetime_trigger
        self.name = name or surrogate_repo.repository_uri.value
        self._view = _View()
        self._write_lock = threading.Lock()

    # -- identity --

    @property
    def repository_uri(self) -> ContentURI:
        return self.surrogate_repo.repository_uri

    @property
    def datastream_repository_uri(self) -> ContentURI | None:
        return self.datastream_repo.repository_uri if self.datastream_repo else None

    @property
    def tapes(self):
        return list(self._view.tapes)

    @property
    def arcs(self):
        return list(self._view.arcs)

    def bindings(self, base_url: str) -> dict:
        """component URI -> list of InterfaceBinding for a node served at ``base_url``."""
        out = {}
        groups = [(self.repository_uri, SURROGATE_PATHS)]
        if self.datastream_repo is not None:
            groups.append((self.datastream_repository_uri, DATASTREAM_PATHS))
        for comp, paths in groups:
            out[comp] = [
                InterfaceBinding(interface_uri(self.namespace, comp, t), t, ContentURI(base_url.rstrip("/") + p))
                for t, p in paths.items()
            ]
        return out

    def registry_metadata(self, component_uri) -> list:
        kind = RepoKind.DATASTREAM if component_uri == self.datastream_repository_uri else RepoKind.SURROGATE
        return [(ROLE_KEY, "tier1"), (KIND_KEY, kind.value)]

    # -- container registration --

    def load(self):
        """Register every sealed container found in ``storage_dir``."""
        if self.storage_dir is None:
            return
        self.storage_dir.mkdir(parents=True, exist_ok=True)
        known = {t.path for t in self._view.tapes} | {a.path for a in self._view.arcs}
        tapes = [TapeFile.open(p) for p in sorted(self.storage_dir.glob("*" + TAPE_SUFFIX)) if p not in known and index_path(p).exists()]
        arcs = [ArcFile.open(p) for p in sorted(self.storage_dir.glob("*" + ARC_SUFFIX)) if p not in known and index_path(p).exists()]
        if tapes or arcs:
            self.register_containers(tapes, arcs)

    def register_containers(self, tapes=(), arcs=()):
        """Atomically add sealed containers; all of them become visible at once or none do."""
        for c in (*tapes, *arcs):
            if not c.sealed:
                raise IntegrityViolation(f"{c.path} is not sealed")
        if arcs and self.datastream_repo is None:
            raise NoSuchInterface(f"{self.repository_uri} has no Datastream Repository to hold arcs")
        with self._write_lock:
            old = self._view
            surrogates = dict(old.surrogates)
            touched = {}
            for tape in tapes:
                for e in tape.records:
                    s = parse_surrogate(tape.get(e.record_id))
                    self._admit_surrogate(surrogates, touched, s, tape)
            datastreams = dict(old.datastreams)
            for arc in arcs:
                for e in arc.records:
                    prev = datastreams.get(e.record_id)
                    if prev is not None:
                        if self.policy.datastream_policy is DatastreamPolicy.NEW:
                            raise DuplicateRecord(f"{e.record_id} already served; NewDatastream policy forbids reuse")
                        if e.datetime <= prev[0]:
                            raise StaleDatetime(f"{e.record_id}: updated datastream must carry a later datetime")
                    datastreams[e.record_id] = (e.datetime, arc)
            if self.datastream_repo is None:
                for su in touched:
                    if surrogates[su].ds_uris:
                        raise IntegrityViolation(f"{su} references Datastream-URIs but this node has no Datastream Repository")
            self._view = self._build(old, tapes, arcs, surrogates, touched, datastreams)

    def _admit_surrogate(self, surrogates, touched, s, tape):
        su = s.surrogate_uri
        prev = surrogates.get(su)
        if prev is not None:
            if self.policy.surrogate_policy is SurrogatePolicy.NEW:
                raise DuplicateRecord(f"{su} already served; NewSurrogate policy forbids reuse")
            old_s = prev.surrogate or parse_surrogate(prev.tape.get(su))
            if s.surrogate_datetime < old_s.surrogate_datetime:
                raise StaleDatetime(f"{su}: update is older than the served version")
            if s.surrogate_datetime == old_s.surrogate_datetime and datetime_change_required(old_s, s, self.datetime_trigger):
                raise StaleDatetime(f"{su}: change requires a new Surrogate-datetime")
        surrogates[su] = SurrogateEntry(su, s.surrogate_datetime, tape, s.do_uris, s.ds_uris, s.ds_urls, s.surrogate_url, s)
        touched.setdefault(su, prev)

    def _build(self, old, tapes, arcs, surrogates, touched, datastreams):
        mentions = dict(old.mentions)
        for su, prev in touched.items():
            if prev is not None:
                for key in (*prev.do_uris, *prev.ds_uris, *prev.ds_urls):
                    mentions[key] = tuple(x for x in mentions.get(key, ()) if x != su)
                    if not mentions[key]:
                        del mentions[key]
        for su in touched:
            e = surrogates[su]
            for key in dict.fromkeys((*e.do_uris, *e.ds_uris, *e.ds_urls)):
                mentions[key] = mentions.get(key, ()) + (su,)
        if any(p is not None for p in touched.values()):
            order = tuple(sorted(e.key() for e in surrogates.values()))
        else:
            order = tuple(sorted(old.order + tuple(surrogates[su].key() for su in touched)))
        ds_order = tuple(sorted((dt, uri) for uri, (dt, _) in datastreams.items()))
        # the parsed Surrogate is only needed while admitting updates
        if self.policy.surrogate_policy is SurrogatePolicy.NEW:
            for su in touched:
                e = surrogates[su]
                surrogates[su] = SurrogateEntry(e.surrogate_uri, e.datetime, e.tape, e.do_uris, e.ds_uris, e.ds_urls, e.surrogate_url)
        return _View(old.tapes + tuple(tapes), old.arcs + tuple(arcs), surrogates, mentions, order, datastreams, ds_order)

    # -- the Tier-1 interfaces --

    def _doc(self, view, su):
        return view.surrogates[su].tape.get(su)

    def harvest_surrogates(self, start=None, until=None):
        """(surrogate_uri, datetime, document) in (datetime, uri) order; lazy sequence."""
        view = self._view
        lo, hi = _bounds(view.order, start, until)
        if hi == lo:
            raise NoRecordsMatch("no Surrogates in the requested window")
        return _Window(view.order, lo, hi, lambda k: (k[1], k[0], self._doc(view, k[1])))

    def harvest_identifiers(self, start=None, until=None):
        view = self._view
        lo, hi = _bounds(view.order, start, until)
        if hi == lo:
            raise NoRecordsMatch("no Surrogates in the requested window")
        return _Window(view.order, lo, hi, lambda k: view.surrogates[k[1]].identifiers())

    def harvest_datastream_identifiers(self, start=None, until=None):
        if self.datastream_repo is None:
            raise NoSuchInterface(f"{self.repository_uri} has no Datastream Repository")
        view = self._view
        lo, hi = _bounds(view.ds_order, start, until)
        if hi == lo:
            raise NoRecordsMatch("no Datastreams in the requested window")
        return _Window(view.ds_order, lo, hi, lambda k: (k[1], k[0]))

    def _matches(self, view, identifier):
        hits = set(view.mentions.get(identifier, ()))
        if identifier in view.surrogates:
            hits.add(identifier)
        return sorted((view.surrogates[su] for su in hits), key=SurrogateEntry.key)

    def obtain_surrogate(self, identifier) -> bytes:
        identifier = classify_uri(identifier)
        view = self._view
        if identifier in view.surrogates:
            return self._doc(view, identifier)
        hits = self._matches(view, identifier)
        if not hits:
            raise IdDoesNotExist(f"{identifier} is unknown to {self.repository_uri}")
        return self._doc(view, hits[-1].surrogate_uri)

    def locate_surrogates(self, identifier) -> list:
        identifier = classify_uri(identifier)
        return [e.location(self.repository_uri) for e in self._matches(self._view, identifier)]

    def locate_surrogates_xml(self, identifier) -> bytes:
        return render_locations(identifier, self.locate_surrogates(identifier), self.repository_uri)

    def obtain_datastream(self, ds_uri) -> tuple:
        if self.datastream_repo is None:
            raise NoSuchInterface(f"{self.repository_uri} has no Datastream Repository")
        ds_uri = classify_uri(ds_uri)
        hit = self._view.datastreams.get(ds_uri)
        if hit is None:
            raise IdDoesNotExist(f"{ds_uri} is unknown to {self.datastream_repository_uri}")
        return hit[1].get(ds_uri)

    def datastream_datetime(self, ds_uri) -> FedDatetime:
        hit = self._view.datastreams.get(classify_uri(ds_uri))
        if hit is None:
            raise IdDoesNotExist(str(ds_uri))
        return hit[0]

    def identify(self, surface="sur") -> dict:
        view = self._view
        keys = view.order if surface == "sur" else view.ds_order
        repo = self.repository_uri if surface == "sur" else self.datastream_repository_uri
        if repo is None:
            raise NoSuchInterface(f"{self.repository_uri} has no Datastream Repository")
        return {
            "repositoryName": self.name,
            "protocolVersion": "2.0",
            "earliestDatestamp": str(keys[0][0]) if keys else "1970-01-01T00:00:00Z",
            "deletedRecord": "no",
            "granularity": GRANULARITY,
            "description": [("urn:fedgate:meta:repository", repo.value), ("urn:fedgate:meta:policy", str(self.policy))],
        }

    # -- HTTP --

    def extra_route(self, method, path, query, body):
        if path == "/admin/rescan" and method == "POST":
            before = len(self._view.surrogates)
            self.load()
            msg = {"surrogates": len(self._view.surrogates), "added": len(self._view.surrogates) - before}
            return Response(200, json.dumps(msg).encode(), "application/json")
        return None

    def app(self, base_url=lambda: "http://localhost", page_size=500, prefix_aliases=None) -> RepositoryApp:
        return RepositoryApp(self, base_url, page_size=page_size, prefix_aliases=prefix_aliases)


@dataclass
class NodeConfig:
    surrogate_repository: str
    storage: str
    datastream_repository: str | None = None
    policy: str = "NewSurrogate/NewDatastream"
    datetime_trigger: str = DatetimeTrigger.CONSTITUENCY_AND_DATASTREAM_CHANGES.value
    namespace: str = "info:fedgate"
    host: str = "127.0.0.1"
    port: int = 0
    registry_url: str | None = None
    page_size: int = 500
    name: str | None = None

    @classmethod
    def from_json(cls, data: dict, base_dir=None) -> NodeConfig:
        try:
            cfg = cls(**data)
        except TypeError as e:
            raise ConfigError(f"bad repository config: {e}") from None
        if base_dir is not None and not Path(cfg.storage).is_absolute():
            cfg.storage = str(Path(base_dir) / cfg.storage)
        return cfg

    def build(self) -> RepositoryNode:
        try:
            ds = RepositoryIdentity(ContentURI(self.datastream_repository), RepoKind.DATASTREAM) if self.datastream_repository else None
            return RepositoryNode(
                RepositoryIdentity(ContentURI(self.surrogate_repository), RepoKind.SURROGATE),
                ds,
                UpdatePolicy.parse(self.policy),
                self.storage,
                self.namespace,
                DatetimeTrigger(self.datetime_trigger),
                self.name,
            )
        except (ValueError, KeyError) as e:
            raise ConfigError(f"bad repository config: {e}") from None
