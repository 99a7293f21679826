import hashlib
import os
import random
import re
import stat
import xml.etree.ElementTree as ET

import pytest
from conftest import T0, sur, surrogates
from hypothesis import given
from hypothesis import strategies as st

from fedgate.containers import (
    ArcFile,
    TapeFile,
    container_fsck,
    index_path,
    read_index,
    rebuild_index,
)
from fedgate.errors import (
    BadArgument,
    DuplicateRecord,
    NotFound,
    ReadOnlyViolation,
    SealError,
)
from fedgate.model import FedDatetime
from fedgate.surrogate import canonicalize, serialize_surrogate


def _writable(path):
    os.chmod(path, stat.S_IRUSR | stat.S_IWUSR)


def linear_scan_tape(path):
    """Independent oracle: split the raw file on record boundaries."""
    data = path.read_bytes()
    body = data[data.index(b">", data.index(b"<tape")) + 2 : data.rindex(b"</tape>")]
    out = {}
    for chunk in body.split(b"</record>\n"):
        if not chunk:
            continue
        m = re.match(rb'<record id="([^"]*)" datetime="([^"]*)">', chunk)
        out[m.group(1).decode()] = (m.group(2).decode(), chunk[m.end():])
    return out


def linear_scan_arc(path):
    data = path.read_bytes()
    out, pos = {}, 0
    while pos < len(data):
        nl = data.index(b"\n", pos)
        uri, media, dt, n = data[pos:nl].decode().split(" ")
        start = nl + 1
        out[uri] = (media, dt, data[start : start + int(n)])
        pos = start + int(n) + 1
    return out


def make_surrogates(n, rng, spread=86400):
    return [
        sur(f"info:r/su/{i:06d}", [f"info:r/do/{i:06d}"], T0.plus(rng.randrange(spread)), [f"info:r/ds/{i:06d}"])
        for i in range(n)
    ]


@pytest.fixture(scope="module")
def big_tape(tmp_path_factory):
    rng = random.Random(77)
    path = tmp_path_factory.mktemp("tape") / "big.tape"
    ss = make_surrogates(10_000, rng)
    t = TapeFile.create(path)
    for s in ss:
        t.append(serialize_surrogate(s), s.surrogate_datetime)
    t.seal()
    return t, ss


def test_append_three_monotone(tmp_path, rng):
    t = TapeFile.create(tmp_path / "t.tape")
    for s in make_surrogates(3, rng):
        t.append(serialize_surrogate(s), s.surrogate_datetime)
    assert t.record_count == 3
    offs = [e.offset for e in t.records]
    assert offs == sorted(offs) and len(set(offs)) == 3


def test_record_id_is_surrogate_uri(tmp_path):
    t = TapeFile.create(tmp_path / "t.tape")
    s = sur("info:some-repo/su/9012", ["info:some-repo/do/1234"], "2006-09-08T00:00:00Z")
    assert t.append(serialize_surrogate(s), s.surrogate_datetime).value == "info:some-repo/su/9012"


def test_append_after_seal(tmp_path, rng):
    t = TapeFile.create(tmp_path / "t.tape").seal()
    s = make_surrogates(1, rng)[0]
    with pytest.raises(ReadOnlyViolation):
        t.append(serialize_surrogate(s), s.surrogate_datetime)
    a = ArcFile.create(tmp_path / "a.arc").seal()
    with pytest.raises(ReadOnlyViolation):
        a.append("info:r/ds/1", "a/b", T0, b"x")


def test_duplicate_in_tape(tmp_path, rng):
    t = TapeFile.create(tmp_path / "t.tape")
    s = make_surrogates(1, rng)[0]
    t.append(serialize_surrogate(s), s.surrogate_datetime)
    with pytest.raises(DuplicateRecord):
        t.append(serialize_surrogate(s), s.surrogate_datetime)


def test_tape_rejects_noncanonical_and_mismatched_datetime(tmp_path, rng):
    t = TapeFile.create(tmp_path / "t.tape")
    s = make_surrogates(1, rng)[0]
    with pytest.raises(BadArgument):
        t.append(serialize_surrogate(s).replace(b"\n  ", b"\n "), s.surrogate_datetime)
    with pytest.raises(BadArgument):
        t.append(serialize_surrogate(s), s.surrogate_datetime.plus(1))


def test_seal_empty_tape(tmp_path):
    t = TapeFile.create(tmp_path / "t.tape").seal()
    root = ET.parse(t.path).getroot()
    assert root.tag.endswith("tape") and len(root) == 0
    assert t.digest() == t.digest()


def test_seal_failure_keeps_writing(tmp_path, rng, monkeypatch):
    t = TapeFile.create(tmp_path / "t.tape")
    s = make_surrogates(1, rng)[0]
    t.append(serialize_surrogate(s), s.surrogate_datetime)

    def boom(fd):
        raise OSError("disk gone")

    monkeypatch.setattr(os, "fsync", boom)
    with pytest.raises(SealError):
        t.seal()
    assert not t.sealed
    monkeypatch.undo()
    t.seal()
    assert t.get(s.surrogate_uri) == serialize_surrogate(s)


def test_get_identity_and_unknown(tmp_path, rng):
    ss = make_surrogates(5, rng)
    t = TapeFile.create(tmp_path / "t.tape")
    for s in ss:
        t.append(serialize_surrogate(s), s.surrogate_datetime)
    t.seal()
    for s in ss:
        assert t.get(s.surrogate_uri) == serialize_surrogate(s)
    with pytest.raises(NotFound):
        t.get("info:r/su/nope")
    reopened = TapeFile.open(t.path)
    assert reopened.records == t.records


def test_big_tape_well_formed(big_tape):
    t, _ss = big_tape
    root = ET.parse(t.path).getroot()
    assert len(root) == 10_000


def test_big_tape_every_id_matches_linear_scan(big_tape):
    t, _ss = big_tape
    oracle = linear_scan_tape(t.path)
    assert len(oracle) == 10_000
    for e in t.records:
        dt, doc = oracle[e.record_id.value]
        assert t.get(e.record_id) == doc
        assert str(e.datetime) == dt


def test_big_tape_sample_matches_iterparse(big_tape):
    t, ss = big_tape
    rng = random.Random(3)
    sample = {s.surrogate_uri.value for s in rng.sample(ss, 100)}
    found = 0
    for _, el in ET.iterparse(t.path):
        if el.tag.endswith("}record") and el.get("id") in sample:
            inner = el[0]
            assert canonicalize(ET.tostring(inner)) == t.get(el.get("id"))
            found += 1
    assert found == 100


def test_list_window_brute_force(big_tape):
    t, ss = big_tape
    rng = random.Random(8)
    assert len(t.list()) == 10_000
    mx = max(s.surrogate_datetime for s in ss)
    assert {r for r, _ in t.list(mx)} == {s.surrogate_uri for s in ss if s.surrogate_datetime == mx}
    for _ in range(20):
        a, b = sorted(T0.plus(rng.randrange(86400)) for _ in range(2))
        expect = sorted((s.surrogate_datetime, s.surrogate_uri) for s in ss if a <= s.surrogate_datetime <= b)
        assert t.list(a, b) == [(u, d) for d, u in expect]
    with pytest.raises(BadArgument):
        t.list(T0.plus(10), T0)


def test_digest_stable_across_reads(big_tape):
    t, ss = big_tape
    d = t.digest()
    for s in ss[:50]:
        t.get(s.surrogate_uri)
    t.list()
    assert t.digest() == d == hashlib.sha256(t.path.read_bytes()).hexdigest()


def test_arc_hello(tmp_path):
    a = ArcFile.create(tmp_path / "a.arc")
    a.append("info:some-repo/ds/5678", "text/plain", T0, b"hello")
    a.seal()
    assert a.get("info:some-repo/ds/5678") == ("text/plain", b"hello")
    assert (tmp_path / "a.arc").read_bytes() == b"info:some-repo/ds/5678 text/plain 2006-09-07T00:00:00Z 5\nhello\n"
    with pytest.raises(NotFound):
        a.get("info:some-repo/ds/0")


def test_arc_rejects_spaces(tmp_path):
    a = ArcFile.create(tmp_path / "a.arc")
    with pytest.raises(BadArgument):
        a.append("info:r/ds/1", "text/plain; charset=x", T0, b"")


def test_arc_thousand_payloads(tmp_path):
    rng = random.Random(11)
    payloads = [b"", bytes(range(256)), rng.randbytes(1 << 20)]
    payloads += [rng.randbytes(int(2 ** rng.uniform(0, 14))) for _ in range(997)]
    a = ArcFile.create(tmp_path / "a.arc")
    digests = {}
    for i, p in enumerate(payloads):
        a.append(f"info:r/ds/{i}", "application/octet-stream", T0.plus(i), p)
        digests[f"info:r/ds/{i}"] = hashlib.sha256(p).hexdigest()
    a.seal()
    b = ArcFile.open(a.path)
    oracle = linear_scan_arc(a.path)
    for uri, d in digests.items():
        _media, data = b.get(uri)
        assert hashlib.sha256(data).hexdigest() == d
        assert oracle[uri][2] == data


def test_arc_list_window(tmp_path):
    a = ArcFile.create(tmp_path / "a.arc")
    for i in range(10):
        a.append(f"info:r/ds/{9 - i}", "a/b", T0.plus(i // 2), b"x")
    a.seal()
    assert [u.value for u, _ in a.list(T0.plus(1), T0.plus(2))] == ["info:r/ds/6", "info:r/ds/7", "info:r/ds/4", "info:r/ds/5"]


def test_index_format_and_rebuild(tmp_path, rng):
    ss = make_surrogates(20, rng)
    t = TapeFile.create(tmp_path / "t.tape")
    for s in ss:
        t.append(serialize_surrogate(s), s.surrogate_datetime)
    t.seal()
    lines = index_path(t.path).read_text().splitlines()
    uri, dt, off, n = lines[0].split("\t")
    assert uri == ss[0].surrogate_uri.value and dt == str(ss[0].surrogate_datetime)
    assert t.path.read_bytes()[int(off) : int(off) + int(n)].startswith(b"<record ")
    original = index_path(t.path).read_bytes()
    _writable(index_path(t.path))
    index_path(t.path).write_text("")
    assert rebuild_index(t.path) == read_index(t.path)
    assert index_path(t.path).read_bytes() == original


def test_fsck_healthy(big_tape, tmp_path):
    assert container_fsck(big_tape[0].path) == []
    a = ArcFile.create(tmp_path / "a.arc")
    a.append("info:r/ds/1", "a/b", T0, b"abc")
    a.seal()
    assert container_fsck(a.path) == []


def test_fsck_missing(tmp_path):
    with pytest.raises(NotFound):
        container_fsck(tmp_path / "none.tape")


def _sealed_tape(tmp_path, n=30):
    rng = random.Random(2)
    ss = make_surrogates(n, rng)
    t = TapeFile.create(tmp_path / "t.tape")
    for s in ss:
        t.append(serialize_surrogate(s), s.surrogate_datetime)
    return t.seal()


def test_fsck_offset_perturbation(tmp_path):
    t = _sealed_tape(tmp_path)
    ipath = index_path(t.path)
    lines = ipath.read_text().splitlines()
    uri, dt, off, n = lines[7].split("\t")
    lines[7] = "\t".join((uri, dt, str(int(off) + 1), n))
    _writable(ipath)
    ipath.write_text("\n".join(lines) + "\n")
    issues = container_fsck(t.path)
    assert [(i.kind, i.record_id) for i in issues] == [("mismatch", uri)]


def test_fsck_arc_truncation(tmp_path):
    a = ArcFile.create(tmp_path / "a.arc")
    for i in range(5):
        a.append(f"info:r/ds/{i}", "a/b", T0, bytes([i]) * 100)
    a.seal()
    _writable(a.path)
    data = a.path.read_bytes()
    a.path.write_bytes(data[:-40])
    kinds = {i.kind for i in container_fsck(a.path)}
    assert "truncation" in kinds


def test_fsck_header_edit(tmp_path):
    t = _sealed_tape(tmp_path)
    _writable(t.path)
    data = t.path.read_bytes()
    victim = t.records[4]
    # change the datetime in one record header without touching lengths
    head = data[victim.offset : victim.offset + 200]
    old = f'datetime="{victim.datetime}"'.encode()
    new = f'datetime="{FedDatetime(victim.datetime.seconds + 1)}"'.encode()
    assert len(old) == len(new)
    patched = head.replace(old, new, 1)
    t.path.write_bytes(data[: victim.offset] + patched + data[victim.offset + 200 :])
    issues = container_fsck(t.path)
    assert issues and {i.record_id for i in issues} == {victim.record_id.value}


def test_fsck_arc_header_corruption(tmp_path):
    a = ArcFile.create(tmp_path / "a.arc")
    for i in range(3):
        a.append(f"info:r/ds/{i}", "a/b", T0, b"xyz")
    a.seal()
    _writable(a.path)
    data = bytearray(a.path.read_bytes())
    pos = data.index(b"info:r/ds/1")
    data[pos - 1 : pos] = b"#"  # clobber the newline separating records
    a.path.write_bytes(bytes(data))
    assert container_fsck(a.path)


@given(st.lists(surrogates(), min_size=1, max_size=8, unique_by=lambda s: s.surrogate_uri))
def test_tape_round_trip_property(tmp_path_factory, ss):
    path = tmp_path_factory.mktemp("p") / "t.tape"
    t = TapeFile.create(path)
    for s in ss:
        t.append(serialize_surrogate(s), s.surrogate_datetime)
    t.seal()
    oracle = linear_scan_tape(path)
    for s in ss:
        assert t.get(s.surrogate_uri) == serialize_surrogate(s) == oracle[s.surrogate_uri.value.replace("&", "&amp;").replace('"', "&quot;").replace("<", "&lt;").replace(">", "&gt;")][1]
    assert container_fsck(path) == []
