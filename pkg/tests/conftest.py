import random
import string

import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from fedgate.containers import ArcFile, TapeFile
from fedgate.httpd import Server
from fedgate.model import (
    ContentURI,
    DatastreamRef,
    DigitalObjectRef,
    FedDatetime,
    RepoKind,
    RepositoryIdentity,
    Surrogate,
)
from fedgate.repository import RepositoryNode
from fedgate.surrogate import serialize_surrogate

settings.register_profile("ci", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

T0 = FedDatetime.parse("2006-09-07T00:00:00Z")

# (criterion number, title, passed, detail); filled by test_acceptance, printed at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})")


# -- strategies --

_token = st.text(string.ascii_letters + string.digits + "-._~", min_size=1, max_size=12)
_safe_text = st.text(
    st.characters(blacklist_categories=("Cs", "Cc"), blacklist_characters="￾￿"), max_size=30
)


@st.composite
def np_uris(draw, kind="do"):
    ns = draw(_token)
    return ContentURI(f"info:{ns}/{kind}/{draw(_token)}")


@st.composite
def p_uris(draw):
    host = draw(st.sampled_from(["some.repo.org", "a.example.org", "b.example.net"]))
    return ContentURI(f"http://{host}/ds/{draw(_token)}")


datetimes = st.integers(min_value=T0.seconds - 400 * 86400, max_value=T0.seconds + 400 * 86400).map(FedDatetime)

_props = st.lists(st.tuples(np_uris("prop").map(lambda u: u.value), _safe_text), max_size=3).map(tuple)


@st.composite
def datastream_refs(draw):
    which = draw(st.sampled_from(["uri", "url", "both"]))
    return DatastreamRef(
        draw(np_uris("ds")) if which != "url" else None,
        draw(p_uris()) if which != "uri" else None,
        draw(st.none() | datetimes),
        draw(st.sampled_from(["image/jpeg", "application/pdf", "text/plain;charset=utf-8"])),
        draw(_props),
    )


@st.composite
def surrogates(draw):
    return Surrogate(
        draw(np_uris("su")),
        DigitalObjectRef(tuple(draw(st.lists(np_uris("do") | p_uris(), min_size=1, max_size=3, unique=True)))),
        draw(datetimes),
        tuple(draw(st.lists(datastream_refs(), max_size=3))),
        draw(st.none() | p_uris()),
        draw(_props),
    )


# -- fixture builders --


def sur(su, dos, dt, ds=(), url=None, props=()):
    """Compact Surrogate constructor for hand-written fixtures."""
    refs = []
    for d in ds:
        if isinstance(d, DatastreamRef):
            refs.append(d)
        elif d.startswith("http"):
            refs.append(DatastreamRef(ds_url=d))
        else:
            refs.append(DatastreamRef(ds_uri=d, ds_datetime=dt))
    return Surrogate(su, DigitalObjectRef(tuple(dos)), dt if isinstance(dt, FedDatetime) else FedDatetime.parse(dt), tuple(refs), url, props)


def write_tape(path, surrogate_list):
    t = TapeFile.create(path)
    for s in surrogate_list:
        t.append(serialize_surrogate(s), s.surrogate_datetime)
    t.seal()
    return t


def write_arc(path, payloads):
    """``payloads``: iterable of (ds_uri, media, datetime, bytes)."""
    a = ArcFile.create(path)
    for ds, media, dt, data in payloads:
        a.append(ds, media, dt, data)
    a.seal()
    return a


def make_node(directory, surrogate_list=(), payloads=(), repo="info:some-repo/repo/sur", ds_repo="info:some-repo/repo/ds", **kw):
    directory.mkdir(parents=True, exist_ok=True)
    node = RepositoryNode(
        RepositoryIdentity(ContentURI(repo), RepoKind.SURROGATE),
        RepositoryIdentity(ContentURI(ds_repo), RepoKind.DATASTREAM) if ds_repo else None,
        storage_dir=directory,
        **kw,
    )
    tapes = [write_tape(directory / "a.tape", surrogate_list)] if surrogate_list else []
    arcs = [write_arc(directory / "a.arc", payloads)] if payloads else []
    if tapes or arcs:
        node.register_containers(tapes, arcs)
    return node


def serve_node(node):
    srv = Server(None, name="node")
    srv.app = node.app(lambda: srv.url)
    return srv.start()


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def served():
    """Start apps on loopback; everything started is stopped at teardown."""
    started = []

    def start(app_or_node, page_size=500):
        if isinstance(app_or_node, RepositoryNode):
            srv = Server(None, name="node")
            srv.app = app_or_node.app(lambda: srv.url, page_size=page_size)
        else:
            srv = Server(app_or_node)
        started.append(srv.start())
        return srv

    yield start
    for s in started:
        s.stop()
