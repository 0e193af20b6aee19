"""Text-encoder HTTP service.

Wire contract: ``POST /encode`` with ``{"texts": [str]}`` returns
``{"dim": D, "embeddings": [[f32]]}``; rows are unit-norm and stable
across calls. Malformed requests get a 400 with a JSON error body.
"""

from __future__ import annotations

import json
import logging
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .features import HashedBagOfWordsTextEmbedder

logger = logging.getLogger(__name__)


def _make_handler(embedder: HashedBagOfWordsTextEmbedder):
    class EncodeHandler(BaseHTTPRequestHandler):
        def _send(self, status: int, payload: dict) -> None:
            raw = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

        def do_POST(self):
            if self.path.rstrip("/") != "/encode":
                self._send(404, {"error": f"unknown path {self.path!r}"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length))
                texts = body["texts"]
                if not isinstance(texts, list) or not all(isinstance(t, str) for t in texts):
                    raise ValueError("'texts' must be a list of strings")
            except (ValueError, KeyError, json.JSONDecodeError) as exc:
                self._send(400, {"error": str(exc)})
                return
            rows = embedder.embed_texts(texts)
            self._send(200, {"dim": embedder.dim, "embeddings": rows.tolist()})

        def log_message(self, fmt, *args):
            logger.debug("http: " + fmt, *args)

    return EncodeHandler


def make_server(port: int, dim: int = 32, seed: int = 29) -> ThreadingHTTPServer:
    embedder = HashedBagOfWordsTextEmbedder(dim=dim, seed=seed)
    return ThreadingHTTPServer(("0.0.0.0", port), _make_handler(embedder))


def serve_text_encoder(port: int, dim: int = 32, seed: int = 29) -> None:
    """Run the /encode service until interrupted."""
    server = make_server(port, dim=dim, seed=seed)
    logger.info("serving /encode on port %d (dim %d)", server.server_port, dim)
    try:
        server.serve_forever()
    finally:
        server.server_close()
