"""Service Registry: component URI -> typed Interface-URIs -> Interface-URLs."""

from __future__ import annotations

import json
import os
import threading
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import quote, unquote

from .errors import (
    BadArgument,
    ConflictError,
    IdDoesNotExist,
    ProtocolError,
    Unreachable,
)
from .httpd import Response, fetch
from .model import ContentURI, InterfaceBinding, InterfaceType, classify_uri
from .service import error_response
from .wire import (
    SVC_OBTAIN_RECORD,
    error_body,
    kev_url,
    parse_error_body,
    parse_kev,
    service_of,
)

ROLE_KEY = "urn:fedgate:meta:role"


@dataclass(frozen=True)
class RegistryRecord:
    identifier: ContentURI
    kind: str  # "component" or "interface"
    interfaces: tuple = ()  # InterfaceBinding values, for components
    interface_url: ContentURI | None = None  # for interfaces
    metadata: tuple = ()

    def to_xml(self) -> bytes:
        def a(s):
            return str(s).replace("&", "&amp;").replace("<", "&lt;").replace('"', "&quot;")

        out = [f'<?xml version="1.0" encoding="UTF-8"?>\n<registryRecord identifier="{a(self.identifier)}" kind="{self.kind}">\n']
        if self.kind == "interface":
            out.append(f"  <location>{a(self.interface_url)}</location>\n")
        for b in self.interfaces:
            out.append(f'  <interface uri="{a(b.interface_uri)}" type="{b.interface_type.value}" url="{a(b.interface_url)}"/>\n')
        for k, v in self.metadata:
            out.append(f'  <property key="{a(k)}">{a(v)}</property>\n')
        out.append("</registryRecord>\n")
        return "".join(out).encode()

    @classmethod
    def from_xml(cls, body: bytes) -> RegistryRecord:
        root = ET.fromstring(body)
        ident = ContentURI(root.get("identifier"))
        kind = root.get("kind")
        ifaces = tuple(
            InterfaceBinding(ContentURI(e.get("uri")), InterfaceType(e.get("type")), ContentURI(e.get("url")))
            for e in root.iter("interface")
        )
        loc = root.findtext("location")
        meta = tuple((e.get("key"), e.text or "") for e in root.iter("property"))
        return cls(ident, kind, ifaces, ContentURI(loc) if loc else None, meta)


@dataclass
class Component:
    uri: ContentURI
    bindings: tuple
    metadata: tuple = ()

    def binding(self, itype) -> InterfaceBinding | None:
        for b in self.bindings:
            if b.interface_type is itype:
                return b
        return None

    @property
    def role(self):
        return dict(self.metadata).get(ROLE_KEY)

    def to_json(self):
        return {
            "component": self.uri.value,
            "bindings": [{"uri": b.interface_uri.value, "type": b.interface_type.value, "url": b.interface_url.value} for b in self.bindings],
            "metadata": [list(p) for p in self.metadata],
        }

    @classmethod
    def from_json(cls, d) -> Component:
        try:
            return cls(
                ContentURI(d["component"]),
                tuple(InterfaceBinding(ContentURI(b["uri"]), InterfaceType(b["type"]), ContentURI(b["url"])) for b in d.get("bindings", ())),
                tuple((k, v) for k, v in d.get("metadata", ())),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise BadArgument(f"bad component document: {e}") from None


@dataclass(frozen=True)
class _State:
    components: dict = field(default_factory=dict)  # uri -> Component
    owners: dict = field(default_factory=dict)  # interface uri -> component uri


class Registry:
    """Registrations are serialized; reads work on an immutable snapshot."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._state = _State()
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for d in json.loads(self.path.read_text()):
                c = Component.from_json(d)
                self.register(c.uri, c.bindings, c.metadata)

    def register(self, component_uri, bindings, metadata=()):
        comp = classify_uri(component_uri)
        bindings = tuple(bindings)
        seen = {}
        for b in bindings:
            if not isinstance(b, InterfaceBinding):
                raise BadArgument("bindings must be InterfaceBinding values")
            if seen.get(b.interface_uri, b.interface_url) != b.interface_url:
                raise BadArgument(f"{b.interface_uri} bound to two locations")
            seen[b.interface_uri] = b.interface_url
        with self._lock:
            old = self._state
            for b in bindings:
                owner = old.owners.get(b.interface_uri)
                if owner is not None and owner != comp:
                    raise ConflictError(f"{b.interface_uri} already belongs to {owner}")
            components = dict(old.components)
            owners = {k: v for k, v in old.owners.items() if v != comp}
            components[comp] = Component(comp, bindings, tuple(metadata))
            owners.update({b.interface_uri: comp for b in bindings})
            self._state = _State(components, owners)
            self._persist()

    def unregister(self, component_uri):
        comp = classify_uri(component_uri)
        with self._lock:
            old = self._state
            if comp not in old.components:
                raise IdDoesNotExist(f"{comp} is not registered")
            components = {k: v for k, v in old.components.items() if k != comp}
            owners = {k: v for k, v in old.owners.items() if v != comp}
            self._state = _State(components, owners)
            self._persist()

    def _persist(self):
        if self.path is None:
            return
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps([c.to_json() for c in self._state.components.values()], indent=1))
        os.replace(tmp, self.path)

    def obtain_registry_record(self, identifier) -> RegistryRecord:
        ident = classify_uri(identifier)
        st = self._state
        comp = st.components.get(ident)
        if comp is not None:
            return RegistryRecord(ident, "component", comp.bindings, None, comp.metadata)
        owner = st.owners.get(ident)
        if owner is not None:
            b = next(b for b in st.components[owner].bindings if b.interface_uri == ident)
            return RegistryRecord(ident, "interface", (), b.interface_url)
        raise IdDoesNotExist(f"{ident} is not registered")

    def components(self) -> list:
        return sorted(self._state.components.values(), key=lambda c: c.uri)

    def providers(self, itype) -> list:
        """(component, binding) for every component offering ``itype``."""
        out = []
        for c in self.components():
            b = c.binding(itype)
            if b is not None:
                out.append((c, b))
        return out

    # -- HTTP --

    def app(self, method, path, query, body):
        if path == "/openurl" and method in ("GET", "HEAD"):
            try:
                req = parse_kev(query)
                if service_of(req.svc_id) is not InterfaceType.OBTAIN_REGISTRY_RECORD:
                    return Response(400, error_body("unknownService", f"unsupported svc_id {req.svc_id}"))
                return Response(200, self.obtain_registry_record(req.rft_id).to_xml())
            except Exception as e:  # noqa: BLE001 - mapped onto status codes
                return error_response(e)
        if path == "/admin/components" and method == "GET":
            return Response(200, json.dumps([c.to_json() for c in self.components()]).encode(), "application/json")
        if path.startswith("/admin/components/"):
            raw = unquote(path[len("/admin/components/"):])
            try:
                if method == "PUT":
                    d = json.loads(body or b"{}")
                    d["component"] = raw
                    c = Component.from_json(d)
                    self.register(c.uri, c.bindings, c.metadata)
                    return Response(200, json.dumps(c.to_json()).encode(), "application/json")
                if method == "DELETE":
                    self.unregister(raw)
                    return Response(200, b"{}", "application/json")
            except ConflictError as e:
                return Response(409, error_body("conflict", str(e)))
            except (ValueError, BadArgument) as e:
                return Response(400, error_body("badArgument", str(e)))
            except IdDoesNotExist as e:
                return Response(404, error_body("idDoesNotExist", str(e)))
        return Response(404, error_body("notFound", f"no route for {method} {path}"))


class RegistryClient:
    """The registry over HTTP, with a short-lived cache of the component list."""

    def __init__(self, url: str, timeout: float = 5.0, ttl: float = 2.0):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.ttl = ttl
        self._cached = (0.0, None)

    def obtain_registry_record(self, identifier) -> RegistryRecord:
        status, _, body = fetch(kev_url(self.url + "/openurl", identifier, SVC_OBTAIN_RECORD), self.timeout)
        if status == 404:
            raise IdDoesNotExist(f"{identifier} is not registered")
        if status != 200:
            code, msg = parse_error_body(body)
            raise ProtocolError(code or f"http{status}", msg, self.url)
        return RegistryRecord.from_xml(body)

    def components(self) -> list:
        stamp, comps = self._cached
        if comps is not None and time.monotonic() - stamp < self.ttl:
            return comps
        status, _, body = fetch(self.url + "/admin/components", self.timeout)
        if status != 200:
            raise Unreachable(self.url, f"HTTP {status}")
        comps = [Component.from_json(d) for d in json.loads(body)]
        self._cached = (time.monotonic(), comps)
        return comps

    def providers(self, itype) -> list:
        out = []
        for c in self.components():
            b = c.binding(itype)
            if b is not None:
                out.append((c, b))
        return out

    def register(self, component_uri, bindings, metadata=()):
        c = Component(classify_uri(component_uri), tuple(bindings), tuple(metadata))
        doc = c.to_json()
        del doc["component"]
        status, _, body = fetch(
            f"{self.url}/admin/components/{quote(c.uri.value, safe='')}",
            self.timeout,
            method="PUT",
            body=json.dumps(doc).encode(),
            headers={"Content-Type": "application/json"},
        )
        if status == 409:
            raise ConflictError(parse_error_body(body)[1])
        if status != 200:
            raise ProtocolError(f"http{status}", parse_error_body(body)[1], self.url)
        self._cached = (0.0, None)
