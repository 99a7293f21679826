"""OAI-PMH subset and OpenURL KEV: request grammars, envelopes, harvest client."""

from __future__ import annotations

import base64
import hashlib
import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from urllib.parse import parse_qsl, quote

from .errors import (
    FedgateError,
    ParseError,
    ProtocolError,
    Unreachable,
    UnsupportedVersion,
)
from .httpd import fetch
from .model import ContentURI, FedDatetime, InterfaceType, is_uri
from .surrogate import NS as SURROGATE_NS
from .surrogate import serialize_surrogate, surrogate_from_element

OAI_NS = "http://www.openarchives.org/OAI/2.0/"
IDENTIFIERS_NS = "urn:fedgate:identifiers:1"
DATETIME_NS = "urn:fedgate:datetime:1"

SURROGATE_PREFIX = "surrogate"
IDENTIFIERS_PREFIX = "identifiers"
DATETIME_PREFIX = "datetime"
DEFAULT_PREFIX_ALIASES = {"didl": SURROGATE_PREFIX}

VERBS = ("Identify", "ListRecords", "ListIdentifiers", "GetRecord")
_LEGAL_ARGS = {
    "Identify": (set(), set()),
    "ListRecords": ({"metadataPrefix"}, {"from", "until"}),
    "ListIdentifiers": ({"metadataPrefix"}, {"from", "until"}),
    "GetRecord": ({"identifier", "metadataPrefix"}, set()),
}

KEV_VERSION = "z39.88-2004"
SVC_BASE = "info:ourfederation/svc/"
SVC_OBTAIN_SURROGATE = SVC_BASE + "ObtainSurrogate.SUR"
SVC_LOCATE_SURROGATES = SVC_BASE + "LocateSurrogates"
SVC_OBTAIN_DATASTREAM = SVC_BASE + "ObtainDatastream"
SVC_LOCATE_REPOSITORIES = SVC_BASE + "LocateRepositories"
SVC_OBTAIN_RECORD = SVC_BASE + "ObtainRecord"
# ObtainSurrogate carries a format suffix; DIDL is accepted as a name for ours
SURROGATE_FORMAT_ALIASES = {"SUR", "DIDL"}


# -- OAI-PMH requests ------------------------------------------------------


class PmhError(ProtocolError):
    """An OAI-PMH error condition (badVerb, badArgument, ...)."""


@dataclass(frozen=True)
class PmhRequest:
    verb: str
    metadata_prefix: str | None = None
    from_text: str | None = None
    until_text: str | None = None
    identifier: ContentURI | None = None
    resumption_token: str | None = None

    @property
    def from_(self) -> FedDatetime | None:
        return FedDatetime.parse(self.from_text, "from") if self.from_text else None

    @property
    def until(self) -> FedDatetime | None:
        return FedDatetime.parse(self.until_text, "until") if self.until_text else None

    def resolved_prefix(self, aliases=None) -> str | None:
        aliases = DEFAULT_PREFIX_ALIASES if aliases is None else aliases
        return aliases.get(self.metadata_prefix, self.metadata_prefix)

    def args(self) -> list:
        out = [("verb", self.verb)]
        if self.metadata_prefix is not None:
            out.append(("metadataPrefix", self.metadata_prefix))
        if self.identifier is not None:
            out.append(("identifier", self.identifier.value))
        if self.from_text is not None:
            out.append(("from", self.from_text))
        if self.until_text is not None:
            out.append(("until", self.until_text))
        if self.resumption_token is not None:
            out.append(("resumptionToken", self.resumption_token))
        return out


def _query_pairs(query: str):
    try:
        return parse_qsl(query, keep_blank_values=True, strict_parsing=False, errors="strict")
    except (UnicodeDecodeError, ValueError) as e:
        raise PmhError("badArgument", f"undecodable query: {e}") from None


def parse_pmh(query: str) -> PmhRequest:
    pairs = _query_pairs(query or "")
    args = {}
    for k, v in pairs:
        if k in args:
            raise PmhError("badArgument", f"repeated argument {k}")
        args[k] = v
    verb = args.pop("verb", None)
    if verb not in VERBS:
        raise PmhError("badVerb", f"illegal verb {verb!r}" if verb else "missing verb")
    if "resumptionToken" in args:
        if verb not in ("ListRecords", "ListIdentifiers") or len(args) != 1:
            raise PmhError("badArgument", "resumptionToken is exclusive")
        token = args["resumptionToken"]
        if not token:
            raise PmhError("badResumptionToken", "empty resumptionToken")
        return PmhRequest(verb, resumption_token=token)
    required, optional = _LEGAL_ARGS[verb]
    missing = required - args.keys()
    if missing:
        raise PmhError("badArgument", "missing " + ", ".join(sorted(missing)))
    extra = args.keys() - required - optional
    if extra:
        raise PmhError("badArgument", "illegal argument " + ", ".join(sorted(extra)))
    for name in ("metadataPrefix",):
        if name in args and not args[name]:
            raise PmhError("badArgument", f"empty {name}")
    f, u = args.get("from"), args.get("until")
    try:
        fd = FedDatetime.parse(f, "from") if f is not None else None
        ud = FedDatetime.parse(u, "until") if u is not None else None
    except FedgateError as e:
        raise PmhError("badArgument", str(e)) from None
    if f is not None and u is not None and len(f) != len(u):
        raise PmhError("badArgument", "from and until must share a granularity")
    if fd is not None and ud is not None and fd > ud:
        raise PmhError("badArgument", "from is later than until")
    ident = None
    if "identifier" in args:
        if not is_uri(args["identifier"]):
            raise PmhError("badArgument", f"identifier is not a URI: {args['identifier']!r}")
        ident = ContentURI(args["identifier"])
    return PmhRequest(verb, args.get("metadataPrefix"), f, u, ident)


def _q(v: str) -> str:
    return quote(v, safe=":/-._~")


def compose_pmh(req: PmhRequest) -> str:
    return "&".join(f"{k}={_q(v)}" for k, v in req.args())


# -- resumption tokens -----------------------------------------------------

_TOKEN_SALT = b"fedgate-resumption-1"


def _fingerprint(offset: int, window: str) -> str:
    return hashlib.sha256(_TOKEN_SALT + f"{offset}|{window}".encode()).hexdigest()[:16]


def make_token(offset: int, verb: str, prefix: str, from_text, until_text) -> str:
    """Opaque token: base-10 offset, the encoded window, and a fingerprint over both."""
    window = json.dumps([verb, prefix, from_text, until_text], separators=(",", ":"))
    w = base64.urlsafe_b64encode(window.encode()).decode().rstrip("=")
    return f"{offset}.{w}.{_fingerprint(offset, window)}"


def read_token(token: str, verb: str) -> tuple:
    """Returns (offset, prefix, from_text, until_text) or raises badResumptionToken."""
    try:
        off, w, fp = token.split(".")
        offset = int(off, 10)
        window = base64.urlsafe_b64decode(w + "=" * (-len(w) % 4)).decode()
        tverb, prefix, f, u = json.loads(window)
    except (ValueError, TypeError, UnicodeError):
        raise PmhError("badResumptionToken", "unreadable resumptionToken") from None
    if offset < 0 or fp != _fingerprint(offset, window) or tverb != verb:
        raise PmhError("badResumptionToken", "resumptionToken does not match this request")
    return offset, prefix, f, u


# -- OAI-PMH envelopes -----------------------------------------------------


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _attr(s: str) -> str:
    return _esc(s).replace('"', "&quot;").replace("\n", "&#10;").replace("\r", "&#13;").replace("\t", "&#9;")


@dataclass(frozen=True)
class PmhRecord:
    identifier: str
    datestamp: FedDatetime
    metadata: bytes | None = None  # already-serialized XML element


@dataclass(frozen=True)
class PmhPage:
    records: list
    token: str | None = None
    cursor: int = 0
    complete_size: int | None = None
    has_token_element: bool = False  # emit an empty token closing a paged list


def identifiers_metadata(do_uris, ds_uris, ds_urls=()) -> bytes:
    parts = [f'<identifiers xmlns="{IDENTIFIERS_NS}">']
    parts += [f"<doURI>{_esc(str(u))}</doURI>" for u in do_uris]
    parts += [f"<dsURI>{_esc(str(u))}</dsURI>" for u in ds_uris]
    parts += [f"<dsURL>{_esc(str(u))}</dsURL>" for u in ds_urls]
    parts.append("</identifiers>")
    return "".join(parts).encode()


def datetime_metadata(dt: FedDatetime) -> bytes:
    return f'<datetime xmlns="{DATETIME_NS}">{dt}</datetime>'.encode()


def render_pmh_response(request, payload, base_url: str = "http://localhost/oaipmh", response_date: FedDatetime | None = None) -> bytes:
    """Render an OAI-PMH envelope.

    ``payload`` is a :class:`PmhPage` (list verbs), a :class:`PmhRecord`
    (GetRecord), a dict (Identify) or a :class:`PmhError`.
    """
    rd = response_date or FedDatetime.now()
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>\n',
        f'<OAI-PMH xmlns="{OAI_NS}">\n',
        f"<responseDate>{rd}</responseDate>\n",
    ]
    echo = ""
    if isinstance(request, PmhRequest) and not (isinstance(payload, PmhError) and payload.code in ("badVerb", "badArgument")):
        echo = "".join(f' {k}="{_attr(v)}"' for k, v in request.args())
    out.append(f"<request{echo}>{_esc(base_url)}</request>\n")
    if isinstance(payload, ProtocolError):
        msg = _esc(payload.message or "")
        out.append(f'<error code="{_attr(payload.code)}">{msg}</error>\n')
    elif request.verb == "Identify":
        out.append("<Identify>\n")
        for k in ("repositoryName", "baseURL", "protocolVersion", "earliestDatestamp", "deletedRecord", "granularity"):
            if k in payload:
                out.append(f"  <{k}>{_esc(str(payload[k]))}</{k}>\n")
        for k, v in payload.get("description", ()):
            out.append(f'  <description><property key="{_attr(k)}">{_esc(v)}</property></description>\n')
        out.append("</Identify>\n")
    elif request.verb == "GetRecord":
        out.append("<GetRecord>\n")
        out.append(_render_record(payload, with_metadata=True))
        out.append("</GetRecord>\n")
    else:
        verb = request.verb
        out.append(f"<{verb}>\n")
        for rec in payload.records:
            out.append(_render_record(rec, with_metadata=verb == "ListRecords"))
        if payload.token is not None or payload.has_token_element:
            size = f' completeListSize="{payload.complete_size}"' if payload.complete_size is not None else ""
            out.append(f'<resumptionToken cursor="{payload.cursor}"{size}>{_esc(payload.token or "")}</resumptionToken>\n')
        out.append(f"</{verb}>\n")
    out.append("</OAI-PMH>\n")
    return b"".join(p if isinstance(p, bytes) else p.encode("utf-8") for p in out)


def _render_record(rec: PmhRecord, with_metadata: bool):
    head = f"<header><identifier>{_esc(rec.identifier)}</identifier><datestamp>{rec.datestamp}</datestamp></header>"
    if not with_metadata:
        return head + "\n"
    if rec.metadata is None:
        return f"<record>{head}</record>\n"
    return b"<record>" + head.encode() + b"<metadata>" + rec.metadata + b"</metadata></record>\n"


@dataclass(frozen=True)
class IdentifierTuple:
    surrogate_uri: ContentURI
    do_uris: tuple
    ds_uris: tuple
    surrogate_datetime: FedDatetime
    ds_urls: tuple = ()


@dataclass
class ParsedPage:
    verb: str
    records: list = field(default_factory=list)
    token: str | None = None
    complete_size: int | None = None


_O = f"{{{OAI_NS}}}"


def _decode_metadata(el: ET.Element):
    if el.tag == f"{{{SURROGATE_NS}}}surrogate":
        s, violations = surrogate_from_element(el)
        if violations:
            raise ParseError(f"bad surrogate in response: {violations[0]}")
        return serialize_surrogate(s)
    if el.tag == f"{{{IDENTIFIERS_NS}}}identifiers":
        q = f"{{{IDENTIFIERS_NS}}}"
        return (
            tuple(ContentURI(e.text or "") for e in el.iter(q + "doURI")),
            tuple(ContentURI(e.text or "") for e in el.iter(q + "dsURI")),
            tuple(ContentURI(e.text or "") for e in el.iter(q + "dsURL")),
        )
    if el.tag == f"{{{DATETIME_NS}}}datetime":
        return FedDatetime.parse((el.text or "").strip())
    return ET.tostring(el)


def parse_pmh_response(body: bytes, endpoint: str | None = None) -> ParsedPage:
    """Decode an envelope; protocol errors raise :class:`ProtocolError`.

    ``noRecordsMatch`` is not an error here: it yields an empty page.
    """
    try:
        root = ET.fromstring(body)
    except ET.ParseError as e:
        raise ProtocolError("badResponse", f"malformed envelope: {e}", endpoint) from None
    if root.tag != _O + "OAI-PMH":
        raise ProtocolError("badResponse", f"unexpected root {root.tag}", endpoint)
    err = root.find(_O + "error")
    req = root.find(_O + "request")
    verb = req.get("verb") if req is not None else None
    if err is not None:
        code = err.get("code", "")
        if code == "noRecordsMatch":
            return ParsedPage(verb or "")
        raise ProtocolError(code, (err.text or "").strip(), endpoint)
    for vname in ("ListRecords", "ListIdentifiers", "GetRecord", "Identify"):
        vel = root.find(_O + vname)
        if vel is not None:
            break
    else:
        raise ProtocolError("badResponse", "no verb element", endpoint)
    page = ParsedPage(vname)
    if vname == "Identify":
        page.records.append({c.tag.replace(_O, ""): (c.text or "") for c in vel})
        return page
    for child in vel:
        if child.tag == _O + "header":
            page.records.append(_header(child))
        elif child.tag == _O + "record":
            ident, ds = _header(child.find(_O + "header"))
            md = child.find(_O + "metadata")
            meta = _decode_metadata(md[0]) if md is not None and len(md) else None
            page.records.append((ident, ds, meta))
        elif child.tag == _O + "resumptionToken":
            page.token = (child.text or "").strip() or None
            size = child.get("completeListSize")
            page.complete_size = int(size) if size else None
    return page


def _header(h):
    ident = (h.findtext(_O + "identifier") or "").strip()
    ds = FedDatetime.parse((h.findtext(_O + "datestamp") or "").strip())
    return ident, ds


def harvest_client(endpoint: str, metadata_prefix: str, from_=None, until=None, verb: str = "ListRecords", timeout: float = 30.0):
    """Yield records from ``endpoint``, following resumption tokens.

    ListRecords yields (identifier, datestamp, metadata) with metadata
    decoded per prefix: canonical Surrogate bytes, a (do, ds, ds_url) URI
    tuple, or a datetime. ListIdentifiers yields (identifier, datestamp).
    Transport failures raise :class:`Unreachable`; error codes other than
    noRecordsMatch raise :class:`ProtocolError`.
    """
    from_ = from_ if from_ is None or isinstance(from_, str) else str(from_)
    until = until if until is None or isinstance(until, str) else str(until)
    req = PmhRequest(verb, metadata_prefix, from_, until)
    query = compose_pmh(req)
    while True:
        url = f"{endpoint}?{query}"
        status, _, body = fetch(url, timeout=timeout)
        try:
            page = parse_pmh_response(body, endpoint)
        except ProtocolError as e:
            if status >= 500 and e.code == "badResponse":
                raise Unreachable(endpoint, f"HTTP {status}") from None
            raise
        if status >= 500:
            raise Unreachable(endpoint, f"HTTP {status}")
        yield from page.records
        if not page.token:
            return
        query = compose_pmh(PmhRequest(verb, resumption_token=page.token))


# -- OpenURL KEV -----------------------------------------------------------


@dataclass(frozen=True)
class KevRequest:
    rft_id: ContentURI
    svc_id: ContentURI
    url_ver: str = KEV_VERSION
    extra: tuple = ()


class KevError(ProtocolError):
    pass


def parse_kev(query: str) -> KevRequest:
    try:
        pairs = parse_qsl(query or "", keep_blank_values=True, errors="strict")
    except (UnicodeDecodeError, ValueError) as e:
        raise KevError("badArgument", f"undecodable query: {e}") from None
    seen, extra = {}, []
    for k, v in pairs:
        if k in ("url_ver", "rft_id", "svc_id"):
            if k in seen:
                raise KevError("badArgument", f"repeated {k}")
            seen[k] = v
        else:
            extra.append((k, v))
    ver = seen.get("url_ver")
    if ver is None:
        raise KevError("badArgument", "missing url_ver")
    if ver != KEV_VERSION:
        raise UnsupportedVersion(f"url_ver {ver!r} is not {KEV_VERSION}")
    for k in ("rft_id", "svc_id"):
        if k not in seen:
            raise KevError("badArgument", f"missing {k}")
        if not is_uri(seen[k]):
            raise KevError("badArgument", f"{k} is not a URI: {seen[k]!r}")
    return KevRequest(ContentURI(seen["rft_id"]), ContentURI(seen["svc_id"]), ver, tuple(extra))


def compose_kev(req: KevRequest) -> str:
    parts = [("url_ver", req.url_ver), ("rft_id", req.rft_id.value), ("svc_id", req.svc_id.value), *req.extra]
    return "&".join(f"{_q(k)}={_q(v)}" for k, v in parts)


def kev_url(base: str, rft_id, svc_id: str) -> str:
    return f"{base}?{compose_kev(KevRequest(ContentURI(str(rft_id)), ContentURI(svc_id)))}"


def service_of(svc_id: ContentURI) -> InterfaceType | None:
    """Map a ServiceType identifier onto the interface it invokes."""
    v = svc_id.value
    if not v.startswith(SVC_BASE):
        return None
    name = v[len(SVC_BASE):]
    if name == "ObtainSurrogate" or (name.startswith("ObtainSurrogate.") and name.split(".", 1)[1] in SURROGATE_FORMAT_ALIASES):
        return InterfaceType.OBTAIN_SURROGATE
    return {
        "LocateSurrogates": InterfaceType.LOCATE_SURROGATES,
        "ObtainDatastream": InterfaceType.OBTAIN_DATASTREAM,
        "LocateRepositories": InterfaceType.LOCATE_REPOSITORIES,
        "ObtainRecord": InterfaceType.OBTAIN_REGISTRY_RECORD,
    }.get(name)


# -- small XML bodies used by the OpenURL services --------------------------


@dataclass(frozen=True)
class Location:
    surrogate_uri: ContentURI
    repository_uri: ContentURI | None
    surrogate_datetime: FedDatetime | None = None
    surrogate_url: ContentURI | None = None


def render_locations(identifier, locations, repository_uri=None) -> bytes:
    repo = f' repository="{_attr(str(repository_uri))}"' if repository_uri is not None else ""
    out = [f'<?xml version="1.0" encoding="UTF-8"?>\n<locations identifier="{_attr(str(identifier))}"{repo}>\n']
    for loc in locations:
        a = f'surrogateURI="{_attr(loc.surrogate_uri.value)}"'
        if loc.surrogate_url is not None:
            a += f' surrogateURL="{_attr(loc.surrogate_url.value)}"'
        if loc.repository_uri is not None and loc.repository_uri != repository_uri:
            a += f' repository="{_attr(loc.repository_uri.value)}"'
        if loc.surrogate_datetime is not None:
            a += f' datetime="{loc.surrogate_datetime}"'
        out.append(f"  <location {a}/>\n")
    out.append("</locations>\n")
    return "".join(out).encode()


def parse_locations(body: bytes) -> list:
    root = ET.fromstring(body)
    default_repo = root.get("repository")
    out = []
    for el in root.iter("location"):
        repo = el.get("repository", default_repo)
        dt = el.get("datetime")
        url = el.get("surrogateURL")
        out.append(Location(
            ContentURI(el.get("surrogateURI")),
            ContentURI(repo) if repo else None,
            FedDatetime.parse(dt) if dt else None,
            ContentURI(url) if url else None,
        ))
    return out


def render_uri_list(root: str, child: str, uris, **attrs) -> bytes:
    a = "".join(f' {k}="{_attr(str(v))}"' for k, v in attrs.items())
    if not uris:
        return f'<?xml version="1.0" encoding="UTF-8"?>\n<{root}{a}/>\n'.encode()
    body = "".join(f"  <{child}>{_esc(str(u))}</{child}>\n" for u in uris)
    return f'<?xml version="1.0" encoding="UTF-8"?>\n<{root}{a}>\n{body}</{root}>\n'.encode()


def parse_uri_list(body: bytes, child: str) -> list:
    root = ET.fromstring(body)
    return [ContentURI((e.text or "").strip()) for e in root.iter(child)]


def render_referrals(identifier, referrals) -> bytes:
    """``referrals``: iterable of (repository_uri, request_url)."""
    out = [f'<?xml version="1.0" encoding="UTF-8"?>\n<referrals identifier="{_attr(str(identifier))}">\n']
    for repo, url in referrals:
        out.append(f'  <request repository="{_attr(str(repo))}">{_esc(url)}</request>\n')
    out.append("</referrals>\n")
    return "".join(out).encode()


def parse_referrals(body: bytes) -> list:
    root = ET.fromstring(body)
    return [(ContentURI(e.get("repository")), (e.text or "").strip()) for e in root.iter("request")]


def error_body(code: str, message: str) -> bytes:
    return f'<?xml version="1.0" encoding="UTF-8"?>\n<error code="{_attr(code)}">{_esc(message)}</error>\n'.encode()


def parse_error_body(body: bytes):
    try:
        root = ET.fromstring(body)
    except ET.ParseError:
        return None, body.decode("utf-8", "replace")
    if root.tag != "error":
        return None, ""
    return root.get("code"), root.text or ""

