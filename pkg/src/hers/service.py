"""TCP service: the server role behind a socket.

The server loads only the public and evaluation keys.  Searches read an
immutable gallery snapshot; enrollments are serialized by a writer lock, build
a new gallery, persist it, and swap it in with a single reference assignment,
so a search sees either the old or the new gallery in full.
"""

from __future__ import annotations

import logging
import socketserver
import threading
from pathlib import Path

from . import server, wire
from .fv import EvaluationKeys, PublicKey
from .gallery import EncryptedGallery, EnrollmentError, empty_gallery, load_gallery, read_manifest, save_gallery
from .ring import ParameterError, RingParams
from .serialization import FormatError, ParamsMismatchError, load_public_keys

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# server
# ---------------------------------------------------------------------------

class GalleryState:
    """Current gallery plus the writer lock guarding enrollment."""

    def __init__(self, gallery: EncryptedGallery, directory: Path | None):
        self.gallery = gallery
        self.directory = directory
        self.write_lock = threading.Lock()

    def snapshot(self) -> EncryptedGallery:
        return self.gallery

    def ack(self) -> wire.Ack:
        g = self.gallery
        return wire.Ack(g.cursor, g.dim, g.num_chunks)


def open_gallery(directory, params: RingParams, dim: int | None = None) -> EncryptedGallery:
    """Load the gallery at ``directory``, or create an empty one of dimension ``dim``."""
    d = Path(directory)
    if (d / "manifest.json").is_file():
        if read_manifest(d)["encoding"] != "hers":
            raise ParameterError("the network service serves HERS galleries only")
        gal = load_gallery(d, params)
        if dim is not None and dim != gal.dim:
            raise ParameterError(f"gallery has dimension {gal.dim}, not {dim}")
        return gal
    if dim is None:
        raise ParameterError(f"no gallery at {d}; pass a dimension to create one")
    gal = empty_gallery(params, dim)
    save_gallery(gal, d)
    return gal


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        srv: HersServer = self.server
        while True:
            try:
                frame = wire.read_frame(self.rfile, srv.max_frame)
            except wire.ConnectionClosed:
                return
            except wire.FrameTooLarge as exc:
                reply = wire.error_frame(wire.E_TOO_LARGE, str(exc), srv.params.param_hash)
            except FormatError as exc:
                reply = wire.error_frame(wire.E_MALFORMED, str(exc), srv.params.param_hash)
            except OSError:
                return
            else:
                if srv.tap is not None:
                    srv.tap(frame)
                reply = srv.dispatch(frame)
            try:
                wire.write_frame(self.wfile, reply)
            except OSError:
                return


class HersServer(socketserver.ThreadingTCPServer):
    """Threaded server holding ``pk``, ``ev`` and one encrypted gallery."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, params: RingParams, pk: PublicKey, ev: EvaluationKeys, state: GalleryState,
                 max_frame: int = wire.DEFAULT_MAX_FRAME, workers: int = 1, tap=None):
        self.params = params
        self.pk = pk
        self.ev = ev
        self.state = state
        self.max_frame = max_frame
        self.workers = workers
        self.tap = tap
        super().__init__(address, _Handler)

    @property
    def address(self):
        return self.server_address[:2]

    def dispatch(self, frame: wire.Frame) -> wire.Frame:
        h = self.params.param_hash
        try:
            if frame.type == wire.SEARCH:
                return self._search(frame)
            if frame.type == wire.ENROLL:
                return self._enroll(frame)
            return wire.error_frame(wire.E_MALFORMED, f"unexpected {frame.name} frame", h)
        except ParamsMismatchError as exc:
            return wire.error_frame(wire.E_PARAMS, str(exc), h)
        except FormatError as exc:
            return wire.error_frame(wire.E_MALFORMED, str(exc), h)
        except (EnrollmentError, ParameterError) as exc:
            return wire.error_frame(wire.E_REJECTED, str(exc), h)
        except Exception as exc:  # keep serving other clients
            log.exception("request failed")
            return wire.error_frame(wire.E_INTERNAL, f"{type(exc).__name__}: {exc}", h)

    def _search(self, frame):
        query = wire.parse_search(frame, self.params)
        gallery = self.state.snapshot()
        scores = server.search(gallery, query, self.ev, self.pk, workers=self.workers)
        return wire.scores_frame(scores, self.params.param_hash)

    def _enroll(self, frame):
        batch = wire.parse_enroll(frame, self.params)
        st = self.state
        with st.write_lock:
            if batch.labels:
                new, touched = server.apply_enrollment(st.gallery, batch, self.pk)
                if st.directory is not None:
                    save_gallery(new, st.directory, changed_groups=touched)
                st.gallery = new
            return wire.ack_frame(st.ack(), self.params.param_hash)


def make_server(address, key_dir, gallery_dir, dim: int | None = None, max_frame: int = wire.DEFAULT_MAX_FRAME,
                workers: int = 1, tap=None) -> HersServer:
    """Server role from a key directory (public material only) and a gallery directory."""
    params, pk, ev, _ = load_public_keys(key_dir, rotation=False)
    gallery = open_gallery(gallery_dir, params, dim)
    state = GalleryState(gallery, Path(gallery_dir))
    return HersServer(address, params, pk, ev, state, max_frame, workers, tap)


def serve_in_background(srv: HersServer) -> threading.Thread:
    th = threading.Thread(target=srv.serve_forever, name="hers-server", daemon=True)
    th.start()
    return th


def parse_address(text: str, default_host: str = "127.0.0.1"):
    host, _, port = text.rpartition(":")
    return (host or default_host, int(port))
