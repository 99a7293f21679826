"""The federation's Surrogate serialization.

Documents are UTF-8 XML with root ``surrogate`` in namespace
``urn:fedgate:surrogate:1``. Serialization is canonical: equal Surrogates
give byte-identical documents, so a document can be rebuilt exactly from
any parsed copy of it (the harvest client relies on this).
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass

from .errors import BadArgument, FedgateError, InvalidURI, ParseError, SchemaError
from .model import (
    ContentURI,
    DatastreamRef,
    DigitalObjectRef,
    FedDatetime,
    Surrogate,
    is_uri,
)

NS = "urn:fedgate:surrogate:1"
_Q = f"{{{NS}}}"
SurrogateDocument = bytes


def _text(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace("\r", "&#13;")


def _attr(s: str) -> str:
    return (
        s.replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
        .replace("\t", "&#9;")
        .replace("\n", "&#10;")
        .replace("\r", "&#13;")
    )


def serialize_surrogate(s: Surrogate) -> SurrogateDocument:
    out = [f'<surrogate xmlns="{NS}" surrogateURI="{_attr(s.surrogate_uri.value)}"']
    if s.surrogate_url is not None:
        out.append(f' surrogateURL="{_attr(s.surrogate_url.value)}"')
    out.append(f' datetime="{s.surrogate_datetime}">\n')
    for u in s.object.do_uris:
        out.append(f"  <doURI>{_text(u.value)}</doURI>\n")
    for ds in s.datastreams:
        out.append("  <datastream")
        if ds.ds_uri is not None:
            out.append(f' uri="{_attr(ds.ds_uri.value)}"')
        if ds.ds_url is not None:
            out.append(f' url="{_attr(ds.ds_url.value)}"')
        if ds.ds_datetime is not None:
            out.append(f' datetime="{ds.ds_datetime}"')
        out.append(f' mediaType="{_attr(ds.media_type)}"')
        if ds.properties:
            out.append(">\n")
            for k, v in ds.properties:
                out.append(f'    <property key="{_attr(k)}">{_text(v)}</property>\n')
            out.append("  </datastream>\n")
        else:
            out.append("/>\n")
    for k, v in s.properties:
        out.append(f'  <property key="{_attr(k)}">{_text(v)}</property>\n')
    out.append("</surrogate>\n")
    return "".join(out).encode("utf-8")


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self):
        return f"{self.path}: {self.message}"


def _load(doc) -> ET.Element:
    if isinstance(doc, str):
        doc = doc.encode("utf-8")
    if not isinstance(doc, (bytes, bytearray)):
        raise ParseError("document must be bytes")
    if b"<!DOCTYPE" in doc or b"<!ENTITY" in doc:
        raise ParseError("DTDs are not accepted")
    try:
        return ET.fromstring(bytes(doc))
    except ET.ParseError as e:
        raise ParseError(f"malformed XML: {e}") from None
    except (ValueError, UnicodeError, RecursionError) as e:
        raise ParseError(f"malformed XML: {e}") from None


class _Collector:
    def __init__(self):
        self.violations = []

    def add(self, path, message):
        self.violations.append(Violation(path, message))


def _blank(s):
    return s is None or not s.strip()


def _check_attrs(el, path, allowed, col):
    for name in el.attrib:
        if name not in allowed:
            col.add(f"{path}/@{name}", "unexpected attribute")


def _uri_attr(el, name, path, col, *, required, protocol=None):
    raw = el.get(name)
    if raw is None:
        if required:
            col.add(f"{path}/@{name}", "missing required attribute")
        return None
    try:
        u = ContentURI(raw)
    except InvalidURI:
        col.add(f"{path}/@{name}", f"not an absolute URI: {raw!r}")
        return None
    if protocol is True and not u.protocol_based:
        col.add(f"{path}/@{name}", "must be a protocol-based URI")
        return None
    if protocol is False and u.protocol_based:
        col.add(f"{path}/@{name}", "must be a non-protocol-based URI")
        return None
    return u


def _datetime_attr(el, path, col, *, required):
    raw = el.get("datetime")
    if raw is None:
        if required:
            col.add(f"{path}/@datetime", "missing required attribute")
        return None
    try:
        return FedDatetime.parse(raw)
    except FedgateError:
        col.add(f"{path}/@datetime", f"bad datetime {raw!r}")
        return None


def _properties(children, path, col):
    props = []
    for i, p in enumerate(children, 1):
        ppath = f"{path}/property[{i}]"
        _check_attrs(p, ppath, {"key"}, col)
        if len(p):
            col.add(ppath, "property must not have child elements")
        key = p.get("key")
        if key is None:
            col.add(f"{ppath}/@key", "missing required attribute")
            continue
        if not is_uri(key):
            col.add(f"{ppath}/@key", f"not an absolute URI: {key!r}")
            continue
        props.append((key, p.text or ""))
    return tuple(props)


def _datastream(el, path, col):
    _check_attrs(el, path, {"uri", "url", "datetime", "mediaType"}, col)
    before = len(col.violations)
    if el.get("uri") is None and el.get("url") is None:
        col.add(path, "datastream needs a uri or url attribute")
    uri = _uri_attr(el, "uri", path, col, required=False, protocol=False)
    url = _uri_attr(el, "url", path, col, required=False, protocol=True)
    dt = _datetime_attr(el, path, col, required=False)
    media = el.get("mediaType")
    if media is None:
        col.add(f"{path}/@mediaType", "missing required attribute")
    elif not media or any(c.isspace() for c in media):
        col.add(f"{path}/@mediaType", f"bad media type {media!r}")
    if not _blank(el.text):
        col.add(path, "unexpected text content")
    for child in el:
        if child.tag != _Q + "property":
            col.add(f"{path}/{_local(child.tag)}", "unexpected element")
        elif not _blank(child.tail):
            col.add(path, "unexpected text content")
    props = _properties([c for c in el if c.tag == _Q + "property"], path, col)
    if len(col.violations) != before:
        return None
    try:
        return DatastreamRef(ds_uri=uri, ds_url=url, ds_datetime=dt, media_type=media, properties=props)
    except BadArgument as e:
        col.add(path, str(e))
        return None


def _local(tag):
    return tag.rsplit("}", 1)[-1]


def surrogate_from_element(root: ET.Element) -> tuple[Surrogate | None, list]:
    """Decode a parsed ``surrogate`` element; returns (surrogate, violations)."""
    col = _Collector()
    path = "/surrogate"
    if root.tag != _Q + "surrogate":
        col.add("/" + _local(root.tag), f"root element must be {{{NS}}}surrogate")
        return None, col.violations
    _check_attrs(root, path, {"surrogateURI", "surrogateURL", "datetime"}, col)
    su = _uri_attr(root, "surrogateURI", path, col, required=True, protocol=False)
    surl = _uri_attr(root, "surrogateURL", path, col, required=False, protocol=True)
    dt = _datetime_attr(root, path, col, required=True)
    if not _blank(root.text):
        col.add(path, "unexpected text content")

    order = {"doURI": 0, "datastream": 1, "property": 2}
    stage = 0
    do_uris, datastreams, props_el = [], [], []
    counts = {"doURI": 0, "datastream": 0, "property": 0}
    for child in root:
        name = _local(child.tag)
        if child.tag != _Q + name or name not in order:
            col.add(f"{path}/{name}", "unexpected element")
            continue
        counts[name] += 1
        cpath = f"{path}/{name}[{counts[name]}]"
        if not _blank(child.tail):
            col.add(path, "unexpected text content")
        if order[name] < stage:
            col.add(cpath, "children must be ordered doURI*, datastream*, property*")
        stage = max(stage, order[name])
        if name == "doURI":
            _check_attrs(child, cpath, set(), col)
            if len(child):
                col.add(cpath, "doURI must not have child elements")
            raw = (child.text or "")
            try:
                u = ContentURI(raw)
            except InvalidURI:
                col.add(cpath, f"not an absolute URI: {raw!r}")
                continue
            if u in do_uris:
                col.add(cpath, f"duplicate DO-URI {raw}")
                continue
            do_uris.append(u)
        elif name == "datastream":
            ds = _datastream(child, cpath, col)
            if ds is not None:
                datastreams.append(ds)
        else:
            props_el.append(child)
    if counts["doURI"] == 0:
        col.add(f"{path}/doURI", "at least one doURI is required")
    props = _properties(props_el, path, col)
    if col.violations:
        return None, col.violations
    try:
        s = Surrogate(
            surrogate_uri=su,
            surrogate_url=surl,
            object=DigitalObjectRef(tuple(do_uris)),
            datastreams=tuple(datastreams),
            surrogate_datetime=dt,
            properties=props,
        )
    except BadArgument as e:
        col.add(path, str(e))
        return None, col.violations
    return s, []


def parse_surrogate(doc: bytes) -> Surrogate:
    root = _load(doc)
    s, violations = surrogate_from_element(root)
    if violations:
        first = violations[0]
        raise SchemaError(first.path, first.message, violations)
    return s


def validate_surrogate(doc: bytes) -> list:
    """All detectable violations; empty iff ``parse_surrogate`` succeeds."""
    try:
        root = _load(doc)
    except ParseError as e:
        return [Violation("/", str(e))]
    _, violations = surrogate_from_element(root)
    return violations


def canonicalize(doc: bytes) -> bytes:
    return serialize_surrogate(parse_surrogate(doc))
