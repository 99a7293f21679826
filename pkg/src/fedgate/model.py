"""Identifiers, timestamps, content objects and repository policies."""

from __future__ import annotations

import calendar
import enum
import re
import time
import uuid
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

from .errors import BadArgument, InvalidDatetime, InvalidNamespace, InvalidURI

PROTOCOL_SCHEMES = frozenset({"http", "https", "ftp"})

_URI_RE = re.compile(r"^([A-Za-z][A-Za-z0-9+.\-]*):(\S+)$")
_NAMESPACE_RE = re.compile(r"^info:[A-Za-z0-9][A-Za-z0-9._~\-]*$")
_DATETIME_RE = re.compile(r"^(\d{4})-(\d{2})-(\d{2})(?:T(\d{2}):(\d{2}):(\d{2})Z)?$")
# characters XML 1.0 cannot carry, even escaped
_XML_ILLEGAL_RE = re.compile("[\x00-\x08\x0b\x0c\x0e-\x1f\ud800-\udfff￾￿]")


class URIKind(enum.Enum):
    PROTOCOL_BASED = "ProtocolBased"
    NON_PROTOCOL_BASED = "NonProtocolBased"


@dataclass(frozen=True, order=True)
class ContentURI:
    """An absolute URI; equality is byte equality of ``value``."""

    value: str
    kind: URIKind = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        if not isinstance(self.value, str):
            raise InvalidURI(f"URI must be a string, got {type(self.value).__name__}")
        m = _URI_RE.match(self.value)
        if m is None or _XML_ILLEGAL_RE.search(self.value):
            raise InvalidURI(f"not an absolute URI: {self.value!r}")
        scheme = m.group(1).lower()
        kind = URIKind.PROTOCOL_BASED if scheme in PROTOCOL_SCHEMES else URIKind.NON_PROTOCOL_BASED
        object.__setattr__(self, "kind", kind)

    @property
    def scheme(self) -> str:
        return self.value.split(":", 1)[0]

    @property
    def protocol_based(self) -> bool:
        return self.kind is URIKind.PROTOCOL_BASED

    def __str__(self):
        return self.value


def classify_uri(raw) -> ContentURI:
    if isinstance(raw, ContentURI):
        return raw
    if not raw:
        raise InvalidURI("empty URI")
    return ContentURI(raw)


def is_uri(raw: str) -> bool:
    return bool(raw) and _URI_RE.match(raw) is not None and not _XML_ILLEGAL_RE.search(raw)


@dataclass(frozen=True, order=True)
class FedDatetime:
    """UTC instant at second granularity, wire form ``YYYY-MM-DDThh:mm:ssZ``."""

    seconds: int

    @classmethod
    def parse(cls, text: str, bound: str = "from") -> FedDatetime:
        """Parse the wire form; a bare date expands to the start or end of day."""
        if not isinstance(text, str):
            raise InvalidDatetime(f"datetime must be a string: {text!r}")
        m = _DATETIME_RE.match(text)
        if m is None:
            raise InvalidDatetime(f"bad datetime: {text!r}")
        y, mo, d = int(m.group(1)), int(m.group(2)), int(m.group(3))
        if m.group(4) is None:
            hh, mm, ss = (0, 0, 0) if bound == "from" else (23, 59, 59)
        else:
            hh, mm, ss = int(m.group(4)), int(m.group(5)), int(m.group(6))
        try:
            dt = datetime(y, mo, d, hh, mm, ss, tzinfo=timezone.utc)
        except ValueError as e:
            raise InvalidDatetime(f"bad datetime: {text!r} ({e})") from None
        return cls(calendar.timegm(dt.utctimetuple()))

    @classmethod
    def now(cls) -> FedDatetime:
        return cls(int(time.time()))

    @classmethod
    def from_datetime(cls, dt: datetime) -> FedDatetime:
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return cls(calendar.timegm(dt.astimezone(timezone.utc).utctimetuple()))

    def to_datetime(self) -> datetime:
        return datetime.fromtimestamp(self.seconds, tz=timezone.utc)

    def plus(self, seconds: int) -> FedDatetime:
        return FedDatetime(self.seconds + seconds)

    def __str__(self):
        return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(self.seconds))


def as_datetime(value, bound="from"):
    """Coerce None / str / FedDatetime to an optional FedDatetime."""
    if value is None or isinstance(value, FedDatetime):
        return value
    return FedDatetime.parse(value, bound)


def check_window(start, until):
    if start is not None and until is not None and start > until:
        raise BadArgument(f"from {start} is later than until {until}")


def datetime_in_window(dt: FedDatetime, start: FedDatetime | None = None, until: FedDatetime | None = None) -> bool:
    """Inclusive window test; ``start``/``until`` may be omitted."""
    check_window(start, until)
    return (start is None or dt >= start) and (until is None or dt <= until)


def check_xml_text(text: str, what: str = "text") -> str:
    if not isinstance(text, str):
        raise BadArgument(f"{what} must be a string")
    if _XML_ILLEGAL_RE.search(text):
        raise BadArgument(f"{what} contains characters XML cannot carry: {text!r}")
    return text


def _check_properties(props, what):
    out = []
    for pair in props:
        key, value = pair
        if not is_uri(key):
            raise BadArgument(f"{what} key is not an absolute URI: {key!r}")
        out.append((key, check_xml_text(value, f"{what} value")))
    return tuple(out)


@dataclass(frozen=True)
class DigitalObjectRef:
    do_uris: tuple

    def __post_init__(self):
        uris = tuple(classify_uri(u) for u in self.do_uris)
        if not uris:
            raise BadArgument("a digital object needs at least one DO-URI")
        if len(set(uris)) != len(uris):
            raise BadArgument("duplicate DO-URI")
        object.__setattr__(self, "do_uris", uris)


@dataclass(frozen=True)
class DatastreamRef:
    ds_uri: ContentURI | None = None
    ds_url: ContentURI | None = None
    ds_datetime: FedDatetime | None = None
    media_type: str = "application/octet-stream"
    properties: tuple = ()

    def __post_init__(self):
        ds_uri = classify_uri(self.ds_uri) if self.ds_uri is not None else None
        ds_url = classify_uri(self.ds_url) if self.ds_url is not None else None
        if ds_uri is None and ds_url is None:
            raise BadArgument("datastream needs a Datastream-URI or a Datastream-URL")
        if ds_uri is not None and ds_uri.protocol_based:
            raise BadArgument(f"Datastream-URI must be non-protocol-based: {ds_uri}")
        if ds_url is not None and not ds_url.protocol_based:
            raise BadArgument(f"Datastream-URL must be protocol-based: {ds_url}")
        if not self.media_type or any(c.isspace() for c in self.media_type):
            raise BadArgument(f"bad media type {self.media_type!r}")
        check_xml_text(self.media_type, "media type")
        object.__setattr__(self, "ds_uri", ds_uri)
        object.__setattr__(self, "ds_url", ds_url)
        object.__setattr__(self, "ds_datetime", as_datetime(self.ds_datetime))
        object.__setattr__(self, "properties", _check_properties(self.properties, "datastream property"))

    def get_property(self, key, default=None):
        for k, v in self.properties:
            if k == key:
                return v
        return default

    @property
    def identifier(self) -> ContentURI:
        return self.ds_uri if self.ds_uri is not None else self.ds_url


@dataclass(frozen=True)
class Surrogate:
    surrogate_uri: ContentURI
    object: DigitalObjectRef
    surrogate_datetime: FedDatetime
    datastreams: tuple = ()
    surrogate_url: ContentURI | None = None
    properties: tuple = ()

    def __post_init__(self):
        su = classify_uri(self.surrogate_uri)
        if su.protocol_based:
            raise BadArgument(f"Surrogate-URI must be non-protocol-based: {su}")
        obj = self.object
        if not isinstance(obj, DigitalObjectRef):
            obj = DigitalObjectRef(tuple(obj))
        url = classify_uri(self.surrogate_url) if self.surrogate_url is not None else None
        if url is not None and not url.protocol_based:
            raise BadArgument(f"Surrogate-URL must be protocol-based: {url}")
        for ds in self.datastreams:
            if not isinstance(ds, DatastreamRef):
                raise BadArgument("datastreams must be DatastreamRef values")
        dt = as_datetime(self.surrogate_datetime)
        if dt is None:
            raise BadArgument("surrogate datetime is required")
        object.__setattr__(self, "surrogate_uri", su)
        object.__setattr__(self, "object", obj)
        object.__setattr__(self, "surrogate_url", url)
        object.__setattr__(self, "datastreams", tuple(self.datastreams))
        object.__setattr__(self, "surrogate_datetime", dt)
        object.__setattr__(self, "properties", _check_properties(self.properties, "property"))

    @property
    def do_uris(self):
        return self.object.do_uris

    @property
    def ds_uris(self):
        return tuple(d.ds_uri for d in self.datastreams if d.ds_uri is not None)

    @property
    def ds_urls(self):
        return tuple(d.ds_url for d in self.datastreams if d.ds_url is not None)

    @property
    def descriptive_only(self) -> bool:
        """True for objects without datastreams; allowed, but worth flagging."""
        return not self.datastreams

    def replace(self, **changes) -> Surrogate:
        return replace(self, **changes)


class SurrogatePolicy(enum.Enum):
    NEW = "NewSurrogate"
    UPDATE = "UpdateSurrogate"


class DatastreamPolicy(enum.Enum):
    NEW = "NewDatastream"
    UPDATE = "UpdateDatastream"


@dataclass(frozen=True)
class UpdatePolicy:
    surrogate_policy: SurrogatePolicy = SurrogatePolicy.NEW
    datastream_policy: DatastreamPolicy = DatastreamPolicy.NEW

    @classmethod
    def parse(cls, text: str) -> UpdatePolicy:
        """Parse ``"NewSurrogate/NewDatastream"`` style strings."""
        parts = [p.strip() for p in text.replace(",", "/").split("/") if p.strip()]
        sp, dp = SurrogatePolicy.NEW, DatastreamPolicy.NEW
        for p in parts:
            if p in SurrogatePolicy._value2member_map_:
                sp = SurrogatePolicy(p)
            elif p in DatastreamPolicy._value2member_map_:
                dp = DatastreamPolicy(p)
            else:
                raise BadArgument(f"unknown policy {p!r}")
        return cls(sp, dp)

    def __str__(self):
        return f"{self.surrogate_policy.value}/{self.datastream_policy.value}"


class RepoKind(enum.Enum):
    SURROGATE = "SurrogateRepository"
    DATASTREAM = "DatastreamRepository"


@dataclass(frozen=True)
class RepositoryIdentity:
    repository_uri: ContentURI
    repo_kind: RepoKind

    def __post_init__(self):
        uri = classify_uri(self.repository_uri)
        if uri.protocol_based:
            raise BadArgument(f"Repository-URI must be non-protocol-based: {uri}")
        object.__setattr__(self, "repository_uri", uri)


class InterfaceType(enum.Enum):
    HARVEST_SURROGATES = "HarvestSurrogates"
    OBTAIN_SURROGATE = "ObtainSurrogate"
    LOCATE_SURROGATES = "LocateSurrogates"
    OBTAIN_DATASTREAM = "ObtainDatastream"
    HARVEST_DATASTREAM_IDENTIFIERS = "HarvestDatastreamIdentifiers"
    HARVEST_IDENTIFIERS = "HarvestIdentifiers"
    LOCATE_REPOSITORIES = "LocateRepositories"
    OBTAIN_REGISTRY_RECORD = "ObtainRegistryRecord"


SURROGATE_INTERFACES = frozenset({
    InterfaceType.HARVEST_SURROGATES,
    InterfaceType.OBTAIN_SURROGATE,
    InterfaceType.LOCATE_SURROGATES,
    InterfaceType.HARVEST_IDENTIFIERS,
})
DATASTREAM_INTERFACES = frozenset({
    InterfaceType.OBTAIN_DATASTREAM,
    InterfaceType.HARVEST_DATASTREAM_IDENTIFIERS,
})


@dataclass(frozen=True)
class InterfaceBinding:
    interface_uri: ContentURI
    interface_type: InterfaceType
    interface_url: ContentURI

    def __post_init__(self):
        iu = classify_uri(self.interface_uri)
        url = classify_uri(self.interface_url)
        if iu.protocol_based:
            raise BadArgument(f"Interface-URI must be non-protocol-based: {iu}")
        if not url.protocol_based:
            raise BadArgument(f"Interface-URL must be protocol-based: {url}")
        object.__setattr__(self, "interface_uri", iu)
        object.__setattr__(self, "interface_url", url)
        object.__setattr__(self, "interface_type", InterfaceType(self.interface_type))


class EntityKind(enum.Enum):
    DO = "do"
    DATASTREAM = "ds"
    SURROGATE = "su"
    REPOSITORY = "repo"
    INTERFACE = "if"


def mint_uri(namespace: str, entity_kind: EntityKind, rng=None) -> ContentURI:
    """Mint ``<namespace>/<kind-tag>/<uuid4>``.

    With ``rng`` (a ``random.Random``) the UUID is reproducible; without it
    the OS entropy source is used.
    """
    if not isinstance(namespace, str) or not _NAMESPACE_RE.match(namespace):
        raise InvalidNamespace(f"namespace must look like 'info:<token>': {namespace!r}")
    kind = EntityKind(entity_kind)
    u = uuid.uuid4() if rng is None else uuid.UUID(int=rng.getrandbits(128), version=4)
    return ContentURI(f"{namespace}/{kind.value}/{u}")


class DatetimeTrigger(enum.Enum):
    CONSTITUENCY_ONLY = "ConstituencyOnly"
    CONSTITUENCY_AND_DATASTREAM_CHANGES = "ConstituencyAndDatastreamChanges"
    ANY_PROPERTY_CHANGE = "AnyPropertyChange"


def datetime_change_required(old: Surrogate, new: Surrogate, trigger: DatetimeTrigger) -> bool:
    """Whether revising ``old`` into ``new`` must bump the Surrogate-datetime."""
    if {d.identifier for d in old.datastreams} != {d.identifier for d in new.datastreams}:
        return True
    if trigger is DatetimeTrigger.CONSTITUENCY_ONLY:
        return False

    def ds_core(s):
        return {(d.ds_uri, d.ds_url, d.ds_datetime) for d in s.datastreams}

    if ds_core(old) != ds_core(new):
        return True
    if trigger is DatetimeTrigger.CONSTITUENCY_AND_DATASTREAM_CHANGES:
        return False
    return replace(old, surrogate_datetime=new.surrogate_datetime) != new
