import hashlib
import json
import random
import xml.etree.ElementTree as ET

import pytest
from conftest import T0, make_node, sur, write_arc, write_tape
from hypothesis import given
from hypothesis import strategies as st

from fedgate.errors import (
    BadArgument,
    ConfigError,
    DuplicateRecord,
    IdDoesNotExist,
    IntegrityViolation,
    NoRecordsMatch,
    NoSuchInterface,
    StaleDatetime,
)
from fedgate.httpd import fetch
from fedgate.model import ContentURI, DatastreamRef, FedDatetime, UpdatePolicy
from fedgate.repository import NodeConfig, interface_uri
from fedgate.surrogate import parse_surrogate, serialize_surrogate
from fedgate.wire import (
    OAI_NS,
    KevRequest,
    compose_kev,
    parse_error_body,
    parse_locations,
    parse_pmh_response,
)

D6 = FedDatetime.parse("2006-09-06T12:00:00Z")
D8 = FedDatetime.parse("2006-09-08T00:00:00Z")


def test_harvest_window_anchor(tmp_path):
    a = sur("info:some-repo/su/1", ["info:some-repo/do/1"], D6)
    b = sur("info:some-repo/su/2", ["info:some-repo/do/2"], D8)
    node = make_node(tmp_path, [a, b])
    got = list(node.harvest_surrogates(FedDatetime.parse("2006-09-07")))
    assert [g[0] for g in got] == [b.surrogate_uri]
    assert got[0][2] == serialize_surrogate(b)


def test_empty_node_no_records_match(tmp_path):
    node = make_node(tmp_path)
    with pytest.raises(NoRecordsMatch):
        node.harvest_surrogates()
    with pytest.raises(NoRecordsMatch):
        node.harvest_identifiers()


def test_inverted_window(tmp_path):
    node = make_node(tmp_path, [sur("info:a/su/1", ["info:a/do/1"], T0)])
    with pytest.raises(BadArgument):
        node.harvest_surrogates(D8, D6)


def test_unbounded_counts_all_tapes(tmp_path):
    node = make_node(tmp_path, [sur(f"info:a/su/{i}", ["info:a/do/1"], T0.plus(i)) for i in range(30)])
    t2 = write_tape(tmp_path / "b.tape", [sur(f"info:a/su/x{i}", ["info:a/do/2"], T0.plus(i)) for i in range(12)])
    node.register_containers([t2])
    assert len(node.harvest_surrogates()) == sum(t.record_count for t in node.tapes) == 42


def _random_records(rng, n=300):
    out = []
    for i in range(n):
        dt = T0.plus(rng.randint(-3 * 86400, 3 * 86400))
        dos = [f"info:a/do/{rng.randint(0, 40)}"]
        out.append(sur(f"info:a/su/{i:04d}", dos, dt, [f"info:a/ds/{i}"]))
    return out


def test_harvest_window_brute_force(tmp_path, rng):
    records = _random_records(rng)
    node = make_node(tmp_path, records, ds_repo="info:a/repo/ds")
    for _ in range(30):
        lo, hi = sorted(T0.plus(rng.randint(-4 * 86400, 4 * 86400)) for _ in range(2))
        expect = sorted((str(s.surrogate_datetime), s.surrogate_uri.value) for s in records
                        if str(lo) <= str(s.surrogate_datetime) <= str(hi))
        try:
            got = [(str(dt), su.value) for su, dt, _ in node.harvest_surrogates(lo, hi)]
        except NoRecordsMatch:
            got = []
        assert got == expect


def test_adjacent_windows_partition(tmp_path, rng):
    records = _random_records(rng)
    node = make_node(tmp_path, records, ds_repo="info:a/repo/ds")
    a, b = T0.plus(-3 * 86400), T0.plus(3 * 86400)

    def h(lo, hi):
        try:
            return [x[0] for x in node.harvest_surrogates(lo, hi)]
        except NoRecordsMatch:
            return []

    for t in (T0, T0.plus(-1), T0.plus(86400)):
        assert h(a, t) + h(t.plus(1), b) == h(a, b)


def test_harvest_identifiers_projection(tmp_path, rng):
    records = _random_records(rng, 120)
    node = make_node(tmp_path, records, ds_repo="info:a/repo/ds")
    full = list(node.harvest_surrogates())
    ids = list(node.harvest_identifiers())
    assert len(full) == len(ids)
    for (su, dt, doc), t in zip(full, ids, strict=True):
        s = parse_surrogate(doc)
        assert (t.surrogate_uri, t.surrogate_datetime, t.do_uris, t.ds_uris) == (su, dt, s.do_uris, s.ds_uris)


def test_obtain_max_datetime(tmp_path):
    do = "info:some-repo/do/1234"
    older = sur("info:some-repo/su/1", [do], T0)
    newer = sur("info:some-repo/su/2", [do], D8)
    node = make_node(tmp_path, [newer, older])
    assert node.obtain_surrogate(do) == serialize_surrogate(newer)
    assert node.obtain_surrogate(older.surrogate_uri) == serialize_surrogate(older)
    with pytest.raises(IdDoesNotExist):
        node.obtain_surrogate("info:some-repo/do/nope")


def test_obtain_tie_break_greatest_uri(tmp_path):
    do = "info:a/do/1"
    ss = [sur(f"info:a/su/{c}", [do], T0) for c in "bca"]
    node = make_node(tmp_path, ss)
    assert parse_surrogate(node.obtain_surrogate(do)).surrogate_uri.value == "info:a/su/c"


def test_obtain_by_ds_uri(tmp_path):
    ds = "info:a/ds/7"
    ss = [sur("info:a/su/1", ["info:a/do/1"], T0, [ds]), sur("info:a/su/2", ["info:a/do/2"], D8, [ds])]
    node = make_node(tmp_path, ss, ds_repo="info:a/repo/ds")
    assert parse_surrogate(node.obtain_surrogate(ds)).surrogate_uri.value == "info:a/su/2"


def test_obtain_is_member_of_locate_with_max_datetime(tmp_path, rng):
    records = _random_records(rng)
    node = make_node(tmp_path, records, ds_repo="info:a/repo/ds")
    for d in range(41):
        do = ContentURI(f"info:a/do/{d}")
        matching = [s for s in records if do in s.do_uris]
        if not matching:
            with pytest.raises(IdDoesNotExist):
                node.obtain_surrogate(do)
            continue
        best = max(matching, key=lambda s: (str(s.surrogate_datetime), s.surrogate_uri.value))
        assert node.obtain_surrogate(do) == serialize_surrogate(best)
        locs = node.locate_surrogates(do)
        assert [loc.surrogate_uri for loc in locs] == [
            s.surrogate_uri for s in sorted(matching, key=lambda s: (str(s.surrogate_datetime), s.surrogate_uri.value))]


def test_locate_shared_datastream_url(tmp_path):
    url = "http://some.repo.org/ds/5678"
    a = sur("info:some-repo/su/1", ["info:some-repo/do/1"], D8, [url])
    b = sur("info:some-repo/su/2", ["info:some-repo/do/2"], T0, [url])
    c = sur("info:some-repo/su/3", ["info:some-repo/do/3"], T0)
    node = make_node(tmp_path, [a, b, c])
    assert [loc.surrogate_uri.value for loc in node.locate_surrogates(url)] == ["info:some-repo/su/2", "info:some-repo/su/1"]
    assert node.locate_surrogates("info:some-repo/do/none") == []


def test_obtain_datastream_round_trip(tmp_path):
    node = make_node(tmp_path, payloads=[("info:some-repo/ds/5678", "image/jpeg", T0, b"\x00B\xff")])
    assert node.obtain_datastream("info:some-repo/ds/5678") == ("image/jpeg", b"\x00B\xff")
    with pytest.raises(IdDoesNotExist):
        node.obtain_datastream("info:some-repo/ds/9999")


def test_obtain_datastream_500_digests(tmp_path):
    rng = random.Random(77)
    payloads, digests = [], {}
    for i in range(500):
        data = rng.randbytes(rng.randint(0, 4096))
        uri = f"info:a/ds/{i}"
        payloads.append((uri, "application/octet-stream", T0.plus(i), data))
        digests[uri] = hashlib.sha256(data).hexdigest()
    node = make_node(tmp_path, payloads=payloads, ds_repo="info:a/repo/ds")
    for uri, h in digests.items():
        assert hashlib.sha256(node.obtain_datastream(uri)[1]).hexdigest() == h


def test_no_datastream_repository(tmp_path):
    node = make_node(tmp_path, [sur("info:a/su/1", ["info:a/do/1"], T0, ["http://x.org/ds/1"])], ds_repo=None)
    with pytest.raises(NoSuchInterface):
        node.obtain_datastream("info:a/ds/1")
    with pytest.raises(NoSuchInterface):
        node.harvest_datastream_identifiers()
    assert len(node.bindings("http://h")) == 1


def test_ds_uri_requires_datastream_repository(tmp_path):
    with pytest.raises(IntegrityViolation):
        make_node(tmp_path, [sur("info:a/su/1", ["info:a/do/1"], T0, ["info:a/ds/1"])], ds_repo=None)


def test_harvest_datastream_identifiers(tmp_path, rng):
    pl = [(f"info:a/ds/{i}", "text/plain", T0.plus(rng.randint(-9000, 9000)), b"x") for i in range(200)]
    node = make_node(tmp_path, payloads=pl, ds_repo="info:a/repo/ds")
    assert {u.value for u, _ in node.harvest_datastream_identifiers()} == {p[0] for p in pl}
    expect = sorted((str(dt), u) for u, _, dt, _ in pl if str(dt) >= str(T0))
    assert [(str(dt), u.value) for u, dt in node.harvest_datastream_identifiers(T0)] == expect
    with pytest.raises(NoRecordsMatch):
        node.harvest_datastream_identifiers(T0.plus(10**6))


# -- update policies --


def test_new_surrogate_policy_rejects_reuse(tmp_path):
    s = sur("info:a/su/1", ["info:a/do/1"], T0)
    node = make_node(tmp_path, [s])
    before = node.obtain_surrogate(s.surrogate_uri)
    t2 = write_tape(tmp_path / "b.tape", [s.replace(surrogate_datetime=D8)])
    with pytest.raises(DuplicateRecord):
        node.register_containers([t2])
    assert node.obtain_surrogate(s.surrogate_uri) == before


def test_new_surrogate_keeps_superseded(tmp_path):
    do = "info:a/do/1"
    node = make_node(tmp_path, [sur("info:a/su/1", [do], T0)])
    node.register_containers([write_tape(tmp_path / "b.tape", [sur("info:a/su/2", [do], D8)])])
    assert [x[0].value for x in node.harvest_surrogates()] == ["info:a/su/1", "info:a/su/2"]
    assert parse_surrogate(node.obtain_surrogate(do)).surrogate_uri.value == "info:a/su/2"


def test_update_surrogate_policy_replaces(tmp_path):
    s = sur("info:a/su/1", ["info:a/do/1"], T0, ["info:a/ds/1"])
    node = make_node(tmp_path, [s], policy=UpdatePolicy.parse("UpdateSurrogate/UpdateDatastream"), ds_repo="info:a/repo/ds")
    s2 = s.replace(surrogate_datetime=D8, object=["info:a/do/2"])
    node.register_containers([write_tape(tmp_path / "b.tape", [s2])])
    assert [(x[0].value, str(x[1])) for x in node.harvest_surrogates()] == [("info:a/su/1", str(D8))]
    assert node.locate_surrogates("info:a/do/1") == []
    assert node.locate_surrogates("info:a/do/2")[0].surrogate_uri == s.surrogate_uri


def test_update_requires_new_datetime(tmp_path):
    s = sur("info:a/su/1", ["info:a/do/1"], T0)
    node = make_node(tmp_path, [s], policy=UpdatePolicy.parse("UpdateSurrogate/NewDatastream"))
    older = s.replace(surrogate_datetime=T0.plus(-1))
    with pytest.raises(StaleDatetime):
        node.register_containers([write_tape(tmp_path / "b.tape", [older])])
    # constituency change at an unchanged datetime
    same = s.replace(datastreams=(DatastreamRef(ds_url="http://a.org/ds/1"),))
    with pytest.raises(StaleDatetime):
        node.register_containers([write_tape(tmp_path / "c.tape", [same])])
    # a DO-URI edit alone is outside the default trigger set
    node.register_containers([write_tape(tmp_path / "d.tape", [s.replace(object=["info:a/do/9"])])])
    assert node.locate_surrogates("info:a/do/9")[0].surrogate_uri == s.surrogate_uri


def test_new_datastream_policy(tmp_path):
    node = make_node(tmp_path, payloads=[("info:a/ds/1", "a/b", T0, b"1")], ds_repo="info:a/repo/ds")
    with pytest.raises(DuplicateRecord):
        node.register_containers(arcs=[write_arc(tmp_path / "b.arc", [("info:a/ds/1", "a/b", D8, b"2")])])
    node2 = make_node(tmp_path / "u", payloads=[("info:a/ds/1", "a/b", T0, b"1")], ds_repo="info:a/repo/ds",
                      policy=UpdatePolicy.parse("NewSurrogate/UpdateDatastream"))
    node2.register_containers(arcs=[write_arc(tmp_path / "u" / "b.arc", [("info:a/ds/1", "a/b", D8, b"2")])])
    assert node2.obtain_datastream("info:a/ds/1") == ("a/b", b"2")


def test_failed_registration_is_atomic(tmp_path):
    node = make_node(tmp_path, [sur("info:a/su/1", ["info:a/do/1"], T0)])
    bad = write_tape(tmp_path / "b.tape", [sur("info:a/su/2", ["info:a/do/2"], T0), sur("info:a/su/1", ["info:a/do/1"], D8)])
    with pytest.raises(DuplicateRecord):
        node.register_containers([bad])
    assert node.locate_surrogates("info:a/do/2") == []
    assert len(node.tapes) == 1


@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 5)), min_size=1, max_size=25, unique_by=lambda t: t[0]))
def test_new_policy_su_byte_stable(tmp_path_factory, items):
    d = tmp_path_factory.mktemp("stable")
    first = [sur(f"info:a/su/{i}", [f"info:a/do/{j}"], T0.plus(i)) for i, j in items]
    node = make_node(d, first)
    snap = {s.surrogate_uri: node.obtain_surrogate(s.surrogate_uri) for s in first}
    extra = [sur(f"info:a/su/n{i}", [f"info:a/do/{j}"], D8.plus(i)) for i, j in items]
    node.register_containers([write_tape(d / "b.tape", extra)])
    assert {su: node.obtain_surrogate(su) for su in snap} == snap


def test_load_from_storage(tmp_path):
    ss = [sur(f"info:a/su/{i}", ["info:a/do/1"], T0.plus(i)) for i in range(5)]
    make_node(tmp_path, ss)
    cfg = NodeConfig.from_json({"surrogate_repository": "info:some-repo/repo/sur",
                                "datastream_repository": "info:some-repo/repo/ds", "storage": "."}, tmp_path)
    node = cfg.build()
    node.load()
    assert len(node.harvest_surrogates()) == 5


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        NodeConfig.from_json({"storage": "x"})
    with pytest.raises(ConfigError):
        NodeConfig.from_json({"surrogate_repository": "info:a/r", "storage": "x", "policy": "Maybe"}).build()


def test_interface_uris_stable():
    a = interface_uri("info:fed", "info:a/repo/sur", "ObtainSurrogate")
    assert a == interface_uri("info:fed", "info:a/repo/sur", "ObtainSurrogate")
    assert a != interface_uri("info:fed", "info:a/repo/sur", "LocateSurrogates")


# -- HTTP surface --


@pytest.fixture
def http_node(tmp_path, served):
    url = "http://some.repo.org/ds/5678"
    ss = [
        sur("info:some-repo/su/9012", ["info:some-repo/do/1234"], T0, ["info:some-repo/ds/5678", url]),
        sur("info:some-repo/su/9013", ["info:some-repo/do/1234"], D8, [url]),
    ]
    node = make_node(tmp_path, ss, [("info:some-repo/ds/5678", "image/png", T0, b"PNG")])
    return node, served(node)


def _kev(base, rft, svc):
    return base + "/openurl?" + compose_kev(KevRequest(ContentURI(rft), ContentURI("info:ourfederation/svc/" + svc)))


def test_http_obtain_surrogate(http_node):
    _node, srv = http_node
    status, ctype, body = fetch(_kev(srv.url, "info:some-repo/do/1234", "ObtainSurrogate.DIDL"))
    assert status == 200 and ctype.startswith("application/xml")
    assert parse_surrogate(body).surrogate_uri.value == "info:some-repo/su/9013"


def test_http_locate(http_node):
    node, srv = http_node
    status, _, body = fetch(_kev(srv.url, "http://some.repo.org/ds/5678", "LocateSurrogates"))
    assert status == 200
    locs = parse_locations(body)
    assert [loc.surrogate_uri.value for loc in locs] == ["info:some-repo/su/9012", "info:some-repo/su/9013"]
    assert all(loc.repository_uri == node.repository_uri for loc in locs)


def test_http_obtain_datastream(http_node):
    _, srv = http_node
    status, ctype, body = fetch(_kev(srv.url, "info:some-repo/ds/5678", "ObtainDatastream"))
    assert (status, ctype, body) == (200, "image/png", b"PNG")


@pytest.mark.parametrize("rft,svc,status,code", [
    ("info:some-repo/do/none", "ObtainSurrogate.SUR", 404, "idDoesNotExist"),
    ("info:some-repo/ds/none", "ObtainDatastream", 404, "idDoesNotExist"),
    ("info:some-repo/do/1234", "Frobnicate", 400, "unknownService"),
])
def test_http_openurl_errors(http_node, rft, svc, status, code):
    _, srv = http_node
    st_, _, body = fetch(_kev(srv.url, rft, svc))
    assert st_ == status
    assert parse_error_body(body)[0] == code


def test_http_wrong_url_ver(http_node):
    _, srv = http_node
    st_, _, _ = fetch(srv.url + "/openurl?url_ver=z39.88-1999&rft_id=info:a/do/1&svc_id=info:ourfederation/svc/LocateSurrogates")
    assert st_ == 400


def test_http_pmh_listrecords_and_identify(http_node):
    _, srv = http_node
    status, _, body = fetch(srv.url + "/sur/oaipmh?verb=ListRecords&metadataPrefix=didl&from=2006-09-08")
    assert status == 200
    assert [r[0] for r in parse_pmh_response(body).records] == ["info:some-repo/su/9013"]
    status, _, body = fetch(srv.url + "/sur/oaipmh?verb=Identify")
    assert status == 200 and ET.fromstring(body).find(f"{{{OAI_NS}}}Identify") is not None


def test_http_pmh_get_record(http_node):
    _, srv = http_node
    _, _, body = fetch(srv.url + "/sur/oaipmh?verb=GetRecord&metadataPrefix=surrogate&identifier=info:some-repo/su/9012")
    assert parse_pmh_response(body).records[0][0] == "info:some-repo/su/9012"
    _, _, body = fetch(srv.url + "/sur/oaipmh?verb=GetRecord&metadataPrefix=surrogate&identifier=info:some-repo/su/0")
    err = ET.fromstring(body).find(f"{{{OAI_NS}}}error")
    assert err.get("code") == "idDoesNotExist"


def test_http_ds_pmh(http_node):
    _, srv = http_node
    _, _, body = fetch(srv.url + "/ds/oaipmh?verb=ListIdentifiers&metadataPrefix=datetime&from=2006-09-07")
    assert parse_pmh_response(body).records[0][0] == "info:some-repo/ds/5678"


def test_http_rescan(tmp_path, served):
    node = make_node(tmp_path, [sur("info:a/su/1", ["info:a/do/1"], T0)])
    srv = served(node)
    write_tape(tmp_path / "b.tape", [sur("info:a/su/2", ["info:a/do/1"], D8)])
    status, _, body = fetch(srv.url + "/admin/rescan", method="POST", body=b"")
    assert status == 200 and json.loads(body) == {"surrogates": 2, "added": 1}
