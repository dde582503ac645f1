import gc
import socket
import threading

import numpy as np
import pytest

from hers import client, fv, service, wire
from hers.codec import quantize
from hers.gallery import EnrollmentBatch, load_gallery
from hers.remote import ClientKeys, HersClient, ServiceError
from hers.ring import make_rng
from hers.serialization import save_keys, secret_key_to_bytes

DIM = 4


def unit_rows(seed, count, d=DIM):
    X = np.random.default_rng(seed).standard_normal((count, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


@pytest.fixture
def running(tmp_path, params, keys):
    sk, pk, ev = keys
    key_dir = tmp_path / "server-keys"
    save_keys(key_dir, params, pk, ev)  # public material only
    frames = []
    srv = service.make_server(("127.0.0.1", 0), key_dir, tmp_path / "gallery", DIM, max_frame=4_000_000,
                              tap=frames.append)
    service.serve_in_background(srv)
    yield srv, frames, tmp_path / "gallery"
    srv.shutdown()
    srv.server_close()


def connect(srv, params, keys, sk=True):
    return HersClient(srv.address, ClientKeys(params, keys[1], keys[0] if sk else None))


class TestLoop:
    def test_enroll_search(self, running, params, keys):
        srv, _, gdir = running
        X = unit_rows(1, 12)
        with connect(srv, params, keys) as cl:
            assert cl.status() == wire.Ack(0, DIM, 0)
            ack = cl.enroll(X, [f"id{i}" for i in range(12)], rng=make_rng(2))
            assert ack.cursor == 12 and ack.chunks == 1
            res = cl.search(X[5], top_k=3, rng=make_rng(3))
        assert res.best_id == "id5"
        oracle = quantize(X) @ quantize(X[5])
        assert np.array_equal(res.raw_scores, oracle)
        # persisted gallery matches
        assert load_gallery(gdir, params).labels == tuple(f"id{i}" for i in range(12))

    def test_restart_keeps_gallery(self, running, params, keys, tmp_path):
        srv, _, gdir = running
        with connect(srv, params, keys) as cl:
            cl.enroll(unit_rows(4, 3), ["x", "y", "z"], rng=make_rng(5))
        again = service.make_server(("127.0.0.1", 0), tmp_path / "server-keys", gdir)
        try:
            assert again.state.gallery.labels == ("x", "y", "z")
        finally:
            again.server_close()

    def test_stale_cursor_rejected(self, running, params, keys):
        srv, _, _ = running
        with connect(srv, params, keys) as cl:
            cl.enroll(unit_rows(6, 2), ["a", "b"], rng=make_rng(1))
            stale = client.prepare_enrollment(unit_rows(7, 1), ["c"], 0, keys[1], rng=make_rng(2))
            with pytest.raises(ServiceError) as err:
                cl.request(wire.enroll_frame(stale))
            assert err.value.code == wire.E_REJECTED
            assert cl.status().cursor == 2

    def test_id_collision_rejected(self, running, params, keys):
        srv, _, _ = running
        with connect(srv, params, keys) as cl:
            cl.enroll(unit_rows(6, 1), ["a"], rng=make_rng(1))
            with pytest.raises(ServiceError):
                cl.enroll(unit_rows(7, 1), ["a"], rng=make_rng(2))


class TestConcurrency:
    def test_concurrent_searches_match_sequential(self, running, params, keys):
        srv, _, _ = running
        X = unit_rows(10, 20)
        with connect(srv, params, keys) as cl:
            cl.enroll(X, list(range(20)), rng=make_rng(1))
            sequential = [cl.search(X[i], rng=make_rng(i)).raw_scores for i in (3, 9)]
        out = {}

        def worker(i):
            with connect(srv, params, keys) as c:
                out[i] = c.search(X[i], rng=make_rng(100 + i)).raw_scores

        threads = [threading.Thread(target=worker, args=(i,)) for i in (3, 9)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert np.array_equal(out[3], sequential[0]) and np.array_equal(out[9], sequential[1])

    def test_enroll_during_search_sees_whole_state(self, running, params, keys):
        srv, _, _ = running
        X = unit_rows(11, 30)
        with connect(srv, params, keys) as cl:
            cl.enroll(X[:10], list(range(10)), rng=make_rng(1))
        results = []

        def searcher():
            with connect(srv, params, keys) as c:
                for j in range(3):
                    results.append(c.search(X[0], rng=make_rng(j)).raw_scores)

        t = threading.Thread(target=searcher)
        t.start()
        with connect(srv, params, keys) as cl:
            cl.enroll(X[10:30], list(range(10, 30)), rng=make_rng(2))
        t.join()
        full = quantize(X) @ quantize(X[0])
        for raw in results:
            assert len(raw) in (10, 30)
            assert np.array_equal(raw, full[:len(raw)])


class TestRobustness:
    def _raw(self, srv):
        s = socket.create_connection(srv.address)
        return s, s.makefile("rwb")

    def test_oversized_frame_keeps_connection(self, running, params):
        srv, _, _ = running
        s, f = self._raw(srv)
        with s:
            wire.write_frame(f, wire.Frame(wire.SEARCH, params.param_hash, b"\0" * 5_000_000))
            reply = wire.read_frame(f)
            assert reply.type == wire.ERROR and wire.parse_error(reply).code == wire.E_TOO_LARGE
            wire.write_frame(f, wire.enroll_frame(EnrollmentBatch(params.param_hash, 0, 0, ())))
            assert wire.parse_ack(wire.read_frame(f)).dim == DIM

    def test_malformed_payload_keeps_connection(self, running, params):
        srv, _, _ = running
        s, f = self._raw(srv)
        with s:
            wire.write_frame(f, wire.Frame(wire.SEARCH, params.param_hash, b"garbage"))
            assert wire.parse_error(wire.read_frame(f)).code == wire.E_MALFORMED
            f.write(b"\x00\x00\x00\x00\x63" + bytes(32))  # unknown frame type
            f.flush()
            assert wire.parse_error(wire.read_frame(f)).code == wire.E_MALFORMED
            wire.write_frame(f, wire.Frame(wire.SCORES, params.param_hash, b""))
            assert wire.read_frame(f).type == wire.ERROR
            wire.write_frame(f, wire.enroll_frame(EnrollmentBatch(params.param_hash, 0, 0, ())))
            assert wire.read_frame(f).type == wire.ACK

    def test_params_mismatch(self, running):
        srv, _, _ = running
        s, f = self._raw(srv)
        with s:
            wire.write_frame(f, wire.enroll_frame(EnrollmentBatch(b"\x07" * 32, 0, 0, ())))
            assert wire.parse_error(wire.read_frame(f)).code == wire.E_PARAMS


class TestKeyIsolation:
    def test_secret_key_never_reaches_server(self, running, params, keys):
        srv, frames, _ = running
        sk = keys[0]
        X = unit_rows(12, 5)
        with connect(srv, params, keys) as cl:
            cl.enroll(X, list(range(5)), rng=make_rng(1))
            cl.search(X[1], rng=make_rng(2))
        assert {f.type for f in frames} == {wire.ENROLL, wire.SEARCH}
        secret = secret_key_to_bytes(sk)
        window = secret[-64:]  # tail of the key's residues
        assert all(window not in f.payload for f in frames)

    def test_no_secret_key_reachable_from_server(self, running, params, keys):
        srv, _, _ = running
        with connect(srv, params, keys) as cl:
            cl.enroll(unit_rows(13, 2), [0, 1], rng=make_rng(1))
        seen, todo = set(), [srv.state, srv.pk, srv.ev, srv.params]
        while todo:
            obj = todo.pop()
            if id(obj) in seen or isinstance(obj, (type, type(gc))):
                continue
            seen.add(id(obj))
            assert not isinstance(obj, fv.SecretKey)
            if isinstance(obj, np.ndarray):
                continue
            todo.extend(gc.get_referents(obj))

    def test_server_starts_without_secret_file(self, running):
        srv, _, _ = running
        assert not (srv.state.directory.parent / "server-keys" / "secret.key").exists()
