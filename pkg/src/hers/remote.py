"""Client role over the network: encrypt locally, let the server compute, decrypt locally."""

from __future__ import annotations

import socket
from dataclasses import dataclass

from . import client, wire
from .codec import PRECISION
from .fv import PublicKey, SecretKey
from .gallery import EnrollmentBatch
from .ring import ParameterError, RingParams, make_rng


class ServiceError(RuntimeError):
    """The server answered with an ERROR frame."""

    def __init__(self, code: int, message: str):
        super().__init__(f"server error {code}: {message}")
        self.code = code
        self.message = message


@dataclass
class ClientKeys:
    params: RingParams
    pk: PublicKey
    sk: SecretKey | None = None


class HersClient:
    """Synchronous client: one request, one reply, over a persistent connection."""

    def __init__(self, address, keys: ClientKeys, timeout: float | None = 300.0):
        self.keys = keys
        self.sock = socket.create_connection(address, timeout=timeout)
        self.stream = self.sock.makefile("rwb")

    def close(self):
        try:
            self.stream.close()
        finally:
            self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def request(self, frame: wire.Frame) -> wire.Frame:
        wire.write_frame(self.stream, frame)
        reply = wire.read_frame(self.stream)
        if reply.type == wire.ERROR:
            err = wire.parse_error(reply)
            raise ServiceError(err.code, err.message)
        return reply

    def status(self) -> wire.Ack:
        """Gallery cursor, dimension, and chunk count (an empty enrollment)."""
        batch = EnrollmentBatch(self.keys.params.param_hash, 0, 0, (), ())
        return wire.parse_ack(self.request(wire.enroll_frame(batch)))

    def enroll(self, features, labels, precision: float = PRECISION, rng=None,
               prequantized: bool = False) -> wire.Ack:
        rng = make_rng() if rng is None else rng
        cursor = self.status().cursor
        batch = client.prepare_enrollment(features, labels, cursor, self.keys.pk, precision, rng, prequantized)
        return wire.parse_ack(self.request(wire.enroll_frame(batch)))

    def search_encrypted(self, query, precision: float = PRECISION, rng=None, prequantized: bool = False):
        # the query fills every slot, so it stays valid however the gallery grows meanwhile
        q = client.encrypt_query(query, self.keys.pk, precision, None, rng, prequantized)
        return wire.parse_scores(self.request(wire.search_frame(q)), self.keys.params)

    def search(self, query, top_k: int | None = None, precision: float = PRECISION, rng=None,
               prequantized: bool = False) -> client.MatchResult:
        if self.keys.sk is None:
            raise ParameterError("searching needs the secret key to decrypt scores")
        scores = self.search_encrypted(query, precision, rng, prequantized)
        return client.decrypt_and_rank(scores, self.keys.sk, top_k, precision)
