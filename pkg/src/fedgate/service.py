"""HTTP surface shared by Tier-1 nodes and the federator.

Both speak the same grammar: ``/sur/oaipmh``, ``/ds/oaipmh`` and
``/openurl``. A backend supplies the operations; :class:`RepositoryApp`
owns parsing, paging and error rendering, so the two can never drift.
"""

from __future__ import annotations

import logging
import threading
import time

from .errors import (
    BadArgument,
    FedgateError,
    HarvestFailure,
    IdDoesNotExist,
    IntegrityViolation,
    NoRecordsMatch,
    NoSuchInterface,
    ProtocolError,
    UnsupportedVersion,
    UpstreamUnavailable,
)
from .httpd import Response
from .model import InterfaceType
from .surrogate import parse_surrogate
from .wire import (
    DATETIME_PREFIX,
    DEFAULT_PREFIX_ALIASES,
    IDENTIFIERS_PREFIX,
    SURROGATE_PREFIX,
    IdentifierTuple,
    PmhError,
    PmhPage,
    PmhRecord,
    PmhRequest,
    datetime_metadata,
    error_body,
    identifiers_metadata,
    make_token,
    parse_kev,
    parse_pmh,
    read_token,
    render_pmh_response,
    service_of,
)

log = logging.getLogger(__name__)

DEFAULT_PAGE_SIZE = 500

_HTTP_STATUS = [
    (IdDoesNotExist, 404, "idDoesNotExist"),
    (NoSuchInterface, 404, "noSuchInterface"),
    (UnsupportedVersion, 400, "unsupportedVersion"),
    (BadArgument, 400, "badArgument"),
    (IntegrityViolation, 409, "integrityViolation"),
    (UpstreamUnavailable, 502, "upstreamUnavailable"),
    (HarvestFailure, 502, "harvestFailure"),
]


def error_response(exc: Exception) -> Response:
    if isinstance(exc, ProtocolError):
        status = 404 if exc.code == "idDoesNotExist" else 400
        return Response(status, error_body(exc.code, exc.message))
    for cls, status, code in _HTTP_STATUS:
        if isinstance(exc, cls):
            return Response(status, error_body(code, str(exc)))
    return Response(500, error_body("internalError", str(exc)))


def identifier_tuple(doc: bytes) -> IdentifierTuple:
    s = parse_surrogate(doc)
    return IdentifierTuple(s.surrogate_uri, s.do_uris, s.ds_uris, s.surrogate_datetime, s.ds_urls)


class RepositoryApp:
    """WSGI-less app object: ``app(method, path, query, body) -> Response``."""

    def __init__(self, backend, base_url=lambda: "http://localhost", page_size=DEFAULT_PAGE_SIZE,
                 prefix_aliases=None, session_ttl=0.0):
        self.backend = backend
        self.base_url = base_url
        self.page_size = page_size
        self.prefix_aliases = DEFAULT_PREFIX_ALIASES if prefix_aliases is None else prefix_aliases
        self.session_ttl = session_ttl
        self._sessions = {}
        self._lock = threading.Lock()

    def __call__(self, method, path, query, body):
        if path == "/sur/oaipmh" and method in ("GET", "HEAD"):
            return self._pmh("sur", query)
        if path == "/ds/oaipmh" and method in ("GET", "HEAD"):
            return self._pmh("ds", query)
        if path == "/openurl" and method in ("GET", "HEAD"):
            return self._openurl(query)
        extra = getattr(self.backend, "extra_route", None)
        if extra is not None:
            resp = extra(method, path, query, body)
            if resp is not None:
                return resp
        return Response(404, error_body("notFound", f"no route for {method} {path}"))

    # -- OAI-PMH --

    def _pmh(self, surface, query):
        base = f"{self.base_url()}/{surface}/oaipmh"
        req = None
        try:
            req = parse_pmh(query)
            if req.verb == "Identify":
                return self._envelope(req, self.backend.identify(surface), base)
            if req.resumption_token is not None:
                offset, prefix, f, u = read_token(req.resumption_token, req.verb)
                work = PmhRequest(req.verb, prefix, f, u)
            else:
                offset, work = 0, req
            prefix = work.resolved_prefix(self.prefix_aliases)
            if req.verb == "GetRecord":
                return self._envelope(req, self._get_record(surface, prefix, work.identifier), base)
            records = self._listing(surface, prefix, work, fresh=req.resumption_token is None)
            if offset and offset >= len(records):
                raise PmhError("badResumptionToken", "resumptionToken beyond the end of the list")
            end = offset + self.page_size
            chunk = records[offset:end]
            page = [self._to_record(surface, prefix, item) for item in chunk]
            token = None
            if end < len(records):
                token = make_token(end, req.verb, work.metadata_prefix, work.from_text, work.until_text)
            resp = self._envelope(req, PmhPage(page, token, offset, len(records), has_token_element=offset > 0), base)
            warnings = getattr(records, "warnings", None)
            if warnings:
                resp.headers["X-Fedgate-Warning"] = "; ".join(f"{r}: {why}" for r, why in warnings).replace("\n", " ")[:4000]
            return resp
        except NoRecordsMatch as e:
            return self._envelope(req, PmhError("noRecordsMatch", str(e)), base)
        except IdDoesNotExist as e:
            return self._envelope(req, PmhError("idDoesNotExist", str(e)), base)
        except PmhError as e:
            return self._envelope(req, e, base)
        except HarvestFailure as e:
            return self._envelope(req, PmhError("harvestFailure", str(e)), base, status=502)
        except NoSuchInterface as e:
            return self._envelope(req, PmhError("noSuchInterface", str(e)), base, status=404)
        except BadArgument as e:
            return self._envelope(req, PmhError("badArgument", str(e)), base)
        except FedgateError as e:
            log.warning("harvest request failed: %s", e)
            return self._envelope(req, PmhError("upstreamFailure", str(e)), base, status=502)

    def _envelope(self, req, payload, base, status=200):
        return Response(status, render_pmh_response(req, payload, base))

    def _check_prefix(self, surface, prefix):
        allowed = (SURROGATE_PREFIX, IDENTIFIERS_PREFIX) if surface == "sur" else (DATETIME_PREFIX,)
        if prefix not in allowed:
            raise PmhError("cannotDisseminateFormat", f"metadataPrefix {prefix!r} not supported here")

    def _listing(self, surface, prefix, req, fresh):
        self._check_prefix(surface, prefix)
        key = (surface, prefix, req.from_text, req.until_text)
        if self.session_ttl > 0 and not fresh:
            with self._lock:
                hit = self._sessions.get(key)
            if hit is not None and hit[0] > time.monotonic():
                return hit[1]
        f, u = req.from_, req.until
        if surface == "ds":
            records = self.backend.harvest_datastream_identifiers(f, u)
        elif prefix == IDENTIFIERS_PREFIX:
            records = self.backend.harvest_identifiers(f, u)
        else:
            records = self.backend.harvest_surrogates(f, u)
        if self.session_ttl > 0:
            now = time.monotonic()
            with self._lock:
                self._sessions = {k: v for k, v in self._sessions.items() if v[0] > now}
                self._sessions[key] = (now + self.session_ttl, records)
        return records

    def _to_record(self, surface, prefix, item):
        if surface == "ds":
            ds_uri, dt = item
            return PmhRecord(ds_uri.value, dt, datetime_metadata(dt))
        if prefix == IDENTIFIERS_PREFIX:
            t = item
            return PmhRecord(t.surrogate_uri.value, t.surrogate_datetime, identifiers_metadata(t.do_uris, t.ds_uris, t.ds_urls))
        su, dt, doc = item
        return PmhRecord(su.value, dt, doc)

    def _get_record(self, surface, prefix, identifier):
        if surface != "sur":
            raise PmhError("cannotDisseminateFormat", "GetRecord is not offered for datastream identifiers")
        self._check_prefix(surface, prefix)
        doc = self.backend.obtain_surrogate(identifier)
        t = identifier_tuple(doc)
        if t.surrogate_uri != identifier:
            raise IdDoesNotExist(f"{identifier} is not a Surrogate-URI here")
        if prefix == IDENTIFIERS_PREFIX:
            return PmhRecord(t.surrogate_uri.value, t.surrogate_datetime, identifiers_metadata(t.do_uris, t.ds_uris, t.ds_urls))
        return PmhRecord(t.surrogate_uri.value, t.surrogate_datetime, doc)

    # -- OpenURL --

    def _openurl(self, query):
        try:
            req = parse_kev(query)
            service = service_of(req.svc_id)
            if service is InterfaceType.OBTAIN_SURROGATE:
                return Response(200, self.backend.obtain_surrogate(req.rft_id), "application/xml")
            if service is InterfaceType.LOCATE_SURROGATES:
                return Response(200, self.backend.locate_surrogates_xml(req.rft_id))
            if service is InterfaceType.OBTAIN_DATASTREAM:
                media, payload = self.backend.obtain_datastream(req.rft_id)
                return Response(200, payload, media)
            return Response(400, error_body("unknownService", f"unsupported svc_id {req.svc_id}"))
        except FedgateError as e:
            return error_response(e)
