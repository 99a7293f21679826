import xml.etree.ElementTree as ET

import pytest
from conftest import T0, make_node, sur
from hypothesis import given
from hypothesis import strategies as st

from fedgate.errors import ProtocolError, Unreachable, UnsupportedVersion
from fedgate.httpd import Server
from fedgate.model import ContentURI, FedDatetime, InterfaceType
from fedgate.surrogate import serialize_surrogate
from fedgate.wire import (
    OAI_NS,
    SVC_OBTAIN_DATASTREAM,
    KevError,
    KevRequest,
    PmhError,
    PmhPage,
    PmhRecord,
    PmhRequest,
    compose_kev,
    compose_pmh,
    datetime_metadata,
    harvest_client,
    identifiers_metadata,
    make_token,
    parse_kev,
    parse_pmh,
    parse_pmh_response,
    read_token,
    render_pmh_response,
    service_of,
)

O = f"{{{OAI_NS}}}"


def test_listrecords_day_granularity():
    r = parse_pmh("verb=ListRecords&metadataPrefix=surrogate&from=2006-09-07")
    assert r.verb == "ListRecords" and r.metadata_prefix == "surrogate"
    assert str(r.from_) == "2006-09-07T00:00:00Z"


def test_until_day_expands_to_end_of_day():
    r = parse_pmh("verb=ListRecords&metadataPrefix=surrogate&until=2006-09-07")
    assert str(r.until) == "2006-09-07T23:59:59Z"


@pytest.mark.parametrize("q,code", [
    ("verb=ListRecords", "badArgument"),
    ("verb=Frobnicate", "badVerb"),
    ("", "badVerb"),
    ("verb=ListRecords&metadataPrefix=surrogate&from=yesterday", "badArgument"),
    ("verb=ListRecords&metadataPrefix=surrogate&from=2006-09-08&until=2006-09-07", "badArgument"),
    ("verb=ListRecords&metadataPrefix=surrogate&from=2006-09-07&until=2006-09-08T00:00:00Z", "badArgument"),
    ("verb=ListRecords&metadataPrefix=surrogate&metadataPrefix=surrogate", "badArgument"),
    ("verb=ListRecords&metadataPrefix=surrogate&set=x", "badArgument"),
    ("verb=GetRecord&metadataPrefix=surrogate", "badArgument"),
    ("verb=GetRecord&metadataPrefix=surrogate&identifier=not%20a%20uri", "badArgument"),
    ("verb=ListRecords&resumptionToken=x&metadataPrefix=surrogate", "badArgument"),
    ("verb=ListRecords&resumptionToken=", "badResumptionToken"),
    ("verb=Identify&metadataPrefix=surrogate", "badArgument"),
])
def test_pmh_errors(q, code):
    with pytest.raises(PmhError) as ei:
        parse_pmh(q)
    assert ei.value.code == code


def test_getrecord_ok():
    r = parse_pmh("verb=GetRecord&metadataPrefix=surrogate&identifier=info%3Asome-repo%2Fsu%2F9012")
    assert r.identifier == ContentURI("info:some-repo/su/9012")


def test_percent_decoding_once():
    r = parse_pmh("verb=GetRecord&metadataPrefix=surrogate&identifier=info:a/su/%2541")
    assert r.identifier.value == "info:a/su/%41"
    assert parse_pmh(compose_pmh(r)) == r


_prefix = st.sampled_from(["surrogate", "identifiers", "datetime", "didl"])
_dt = st.integers(min_value=0, max_value=2**31).map(lambda s: str(FedDatetime(s)))


@st.composite
def pmh_requests(draw):
    verb = draw(st.sampled_from(["Identify", "ListRecords", "ListIdentifiers", "GetRecord"]))
    if verb == "Identify":
        return PmhRequest(verb)
    if verb == "GetRecord":
        return PmhRequest(verb, draw(_prefix), identifier=ContentURI(f"info:x/su/{draw(st.integers(0, 10**6))}"))
    if draw(st.booleans()):
        return PmhRequest(verb, resumption_token=make_token(draw(st.integers(0, 10**6)), verb, "surrogate", None, None))
    f, u = sorted([draw(_dt), draw(_dt)])
    return PmhRequest(verb, draw(_prefix), f if draw(st.booleans()) else None, u if draw(st.booleans()) else None)


@given(pmh_requests())
def test_pmh_round_trip(req):
    q = compose_pmh(req)
    assert parse_pmh(q) == req
    assert compose_pmh(parse_pmh(q)) == q


@given(st.text(max_size=80))
def test_pmh_fuzz(q):
    try:
        parse_pmh(q)
    except PmhError:
        pass


def test_didl_alias():
    r = parse_pmh("verb=ListRecords&metadataPrefix=didl&from=2006-09-07")
    assert r.resolved_prefix() == "surrogate"
    assert r.resolved_prefix({}) == "didl"


def test_token_round_trip_and_tamper():
    t = make_token(500, "ListRecords", "surrogate", "2006-09-07", None)
    assert read_token(t, "ListRecords") == (500, "surrogate", "2006-09-07", None)
    with pytest.raises(PmhError):
        read_token(t, "ListIdentifiers")
    off, w, fp = t.split(".")
    with pytest.raises(PmhError):
        read_token(f"1000.{w}.{fp}", "ListRecords")
    other = make_token(500, "ListRecords", "surrogate", "2006-09-08", None).split(".")[1]
    with pytest.raises(PmhError) as ei:
        read_token(f"{off}.{other}.{fp}", "ListRecords")
    assert ei.value.code == "badResumptionToken"
    for junk in ("x", "1.2", "a.b.c", "-1.e30.00"):
        with pytest.raises(PmhError):
            read_token(junk, "ListRecords")


def test_render_no_records_match():
    req = PmhRequest("ListRecords", "surrogate")
    body = render_pmh_response(req, PmhError("noRecordsMatch", ""))
    err = ET.fromstring(body).find(O + "error")
    assert err.get("code") == "noRecordsMatch"
    assert parse_pmh_response(body).records == []


def test_render_token_present_when_paging():
    req = PmhRequest("ListRecords", "surrogate")
    recs = [PmhRecord(f"info:a/su/{i}", T0, datetime_metadata(T0)) for i in range(3)]
    body = render_pmh_response(req, PmhPage(recs, "3.abc.def", 0, 10))
    tok = ET.fromstring(body).find(f"{O}ListRecords/{O}resumptionToken")
    assert tok.text == "3.abc.def" and tok.get("completeListSize") == "10"


def test_render_is_deterministic():
    req = PmhRequest("ListIdentifiers", "surrogate")
    page = PmhPage([PmhRecord("info:a/su/1", T0)])
    assert render_pmh_response(req, page, response_date=T0) == render_pmh_response(req, page, response_date=T0)


def test_bad_argument_has_no_echo():
    body = render_pmh_response(PmhRequest("ListRecords"), PmhError("badArgument", "x"))
    assert ET.fromstring(body).find(O + "request").attrib == {}


@given(st.lists(st.tuples(st.integers(0, 10**6), st.integers(0, 2**31)), max_size=20, unique_by=lambda t: t[0]),
       st.sampled_from(["surrogate", "identifiers", "datetime"]))
def test_render_parse_round_trip(items, prefix):
    recs, expect = [], []
    for i, secs in items:
        dt = FedDatetime(secs)
        ident = f"info:a/su/{i}"
        if prefix == "surrogate":
            doc = serialize_surrogate(sur(ident, [f"info:a/do/{i}"], dt, [f"info:a/ds/{i}"]))
            meta, want = doc, doc
        elif prefix == "identifiers":
            meta = identifiers_metadata([ContentURI(f"info:a/do/{i}")], [ContentURI(f"info:a/ds/{i}")])
            want = ((ContentURI(f"info:a/do/{i}"),), (ContentURI(f"info:a/ds/{i}"),), ())
        else:
            meta, want = datetime_metadata(dt), dt
        recs.append(PmhRecord(ident, dt, meta))
        expect.append((ident, dt, want))
    body = render_pmh_response(PmhRequest("ListRecords", prefix), PmhPage(recs))
    assert parse_pmh_response(body).records == expect


def test_parse_response_protocol_error():
    body = render_pmh_response(PmhRequest("ListRecords", "x"), PmhError("cannotDisseminateFormat", "no"))
    with pytest.raises(ProtocolError) as ei:
        parse_pmh_response(body)
    assert ei.value.code == "cannotDisseminateFormat"


# -- KEV --

EXAMPLE_OBTAIN_DATASTREAM = (
    "url_ver=z39.88-2004&rft_id=info:some-repo/ds/5678&svc_id=info:ourfederation/svc/ObtainDatastream"
)


def test_obtain_datastream_example():
    r = parse_kev(EXAMPLE_OBTAIN_DATASTREAM)
    assert r.rft_id == ContentURI("info:some-repo/ds/5678")
    assert r.svc_id.value == SVC_OBTAIN_DATASTREAM
    assert service_of(r.svc_id) is InterfaceType.OBTAIN_DATASTREAM


def test_kev_wrong_version():
    with pytest.raises(UnsupportedVersion):
        parse_kev("url_ver=z39.87-2004&rft_id=info:a/b&svc_id=info:c/d")


@pytest.mark.parametrize("q", [
    "url_ver=z39.88-2004&svc_id=info:c/d",
    "url_ver=z39.88-2004&rft_id=info:a/b",
    "rft_id=info:a/b&svc_id=info:c/d",
    "url_ver=z39.88-2004&rft_id=info:a/b&rft_id=info:a/c&svc_id=info:c/d",
    "url_ver=z39.88-2004&rft_id=nope&svc_id=info:c/d",
])
def test_kev_bad_argument(q):
    with pytest.raises(KevError) as ei:
        parse_kev(q)
    assert ei.value.code == "badArgument"


def test_kev_extras_preserved_in_order():
    q = "url_ver=z39.88-2004&rft_id=info:a/b&svc_id=info:c/d&z=1&a=2&z=3"
    r = parse_kev(q)
    assert r.extra == (("z", "1"), ("a", "2"), ("z", "3"))
    assert compose_kev(r) == q


_uri = st.one_of(
    st.from_regex(r"info:[a-z]{1,6}/(do|ds|su)/[A-Za-z0-9._~%-]{1,10}", fullmatch=True),
    st.from_regex(r"http://[a-z]{1,6}\.org/[A-Za-z0-9._~&=?/-]{0,12}", fullmatch=True),
)


@given(_uri, _uri, st.lists(st.tuples(st.text("abcxyz_", min_size=1, max_size=5), st.text(max_size=8)), max_size=3))
def test_kev_round_trip(rft, svc, extra):
    req = KevRequest(ContentURI(rft), ContentURI(svc), extra=tuple(extra))
    assert parse_kev(compose_kev(req)) == req


@given(st.text(max_size=100))
def test_kev_fuzz(q):
    try:
        parse_kev(q)
    except (KevError, UnsupportedVersion):
        pass


@pytest.mark.parametrize("name,itype", [
    ("ObtainSurrogate.DIDL", InterfaceType.OBTAIN_SURROGATE),
    ("ObtainSurrogate.SUR", InterfaceType.OBTAIN_SURROGATE),
    ("ObtainSurrogate", InterfaceType.OBTAIN_SURROGATE),
    ("ObtainSurrogate.METS", None),
    ("LocateSurrogates", InterfaceType.LOCATE_SURROGATES),
    ("LocateRepositories", InterfaceType.LOCATE_REPOSITORIES),
    ("ObtainRecord", InterfaceType.OBTAIN_REGISTRY_RECORD),
    ("Frob", None),
])
def test_service_of(name, itype):
    assert service_of(ContentURI("info:ourfederation/svc/" + name)) is itype


# -- harvest client --


def test_client_1234_records_three_pages(tmp_path, served):
    ss = [sur(f"info:r/su/{i:05d}", [f"info:r/do/{i}"], T0.plus(i % 97)) for i in range(1234)]
    node = make_node(tmp_path, ss, ds_repo=None)
    calls = []
    srv = served(node)
    inner = srv.app

    def counting(method, path, query, body):
        calls.append(query)
        return inner(method, path, query, body)

    srv.app = counting
    got = list(harvest_client(srv.url + "/sur/oaipmh", "surrogate"))
    assert len(got) == 1234
    assert len(calls) == 3
    assert {g[0] for g in got} == {s.surrogate_uri.value for s in ss}


def test_client_no_records_match_is_empty(tmp_path, served):
    node = make_node(tmp_path, ds_repo=None)
    srv = served(node)
    assert list(harvest_client(srv.url + "/sur/oaipmh", "surrogate")) == []


def test_client_stopped_server():
    srv = Server(lambda *a: None).start()
    url = srv.url
    srv.stop()
    with pytest.raises(Unreachable):
        list(harvest_client(url + "/sur/oaipmh", "surrogate", timeout=2))


def test_client_protocol_error(tmp_path, served):
    node = make_node(tmp_path, [sur("info:r/su/1", ["info:r/do/1"], T0)], ds_repo=None)
    srv = served(node)
    with pytest.raises(ProtocolError) as ei:
        list(harvest_client(srv.url + "/sur/oaipmh", "nonsense"))
    assert ei.value.code == "cannotDisseminateFormat"


@given(st.integers(min_value=1, max_value=40))
def test_paging_completeness(tmp_path_factory, page):
    d = tmp_path_factory.mktemp("pg")
    ss = [sur(f"info:r/su/{i:03d}", [f"info:r/do/{i}"], T0.plus(i % 7)) for i in range(57)]
    node = make_node(d, ss, ds_repo=None)
    srv = Server(None)
    srv.app = node.app(lambda: srv.url, page_size=page)
    with srv:
        got = [(i, dt) for i, dt, _ in harvest_client(srv.url + "/sur/oaipmh", "surrogate")]
    assert got == [(s.surrogate_uri.value, s.surrogate_datetime) for s in sorted(ss, key=lambda s: (s.surrogate_datetime, s.surrogate_uri))]
