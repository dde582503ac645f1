"""Client and server on opposite ends of a socket.

The server is built from public key material only and keeps the encrypted
gallery on disk. The client enrolls templates, sends an encrypted probe and
decrypts the returned scores with the secret key it never shares.
"""

import tempfile
from pathlib import Path

from hers import protocol, service
from hers.codec import l2_normalize
from hers.remote import ClientKeys, HersClient
from hers.ring import make_rng, testing_params
from hers.serialization import save_keys


def main():
    params = testing_params(1024)
    rng = make_rng(5)
    keys = protocol.generate_keys(params, rng, rotations=False)
    with tempfile.TemporaryDirectory() as tmp:
        server_keys = Path(tmp) / "server-keys"
        save_keys(server_keys, params, keys.pk, keys.ev)
        srv = service.make_server(("127.0.0.1", 0), server_keys, Path(tmp) / "gallery", dim=32)
        service.serve_in_background(srv)
        print("server listening on %s:%d" % srv.address)
        try:
            feats = l2_normalize(rng.standard_normal((500, 32)))
            with HersClient(srv.address, ClientKeys(params, keys.pk, keys.sk)) as cl:
                ack = cl.enroll(feats, [f"user{i}" for i in range(500)], rng=rng)
                print(f"gallery now holds {ack.cursor} templates in {ack.chunks} chunk(s)")
                probe = l2_normalize(feats[42] + 0.1 * rng.standard_normal(32))
                res = cl.search(probe, top_k=3, rng=rng)
            print("top matches:", [(lab, round(s, 3)) for lab, s in res.ranked])
            print("files on the server:", sorted(p.name for p in server_keys.iterdir()))
        finally:
            srv.shutdown()
            srv.server_close()


if __name__ == "__main__":
    main()
