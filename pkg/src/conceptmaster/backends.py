"""Backend wire format: JSON over HTTP.

Request  ``{"kind": ..., "payload_b64": ..., "shape": [...], "extra": {...}}``
Response ``{"tokens_b64": ..., "shape": [...]}`` for tensor outputs, or
``{"result": ...}`` for structured outputs (captions, boxes, labels).
Tensors travel as little-endian float32; text travels as UTF-8 with
``shape == [n_bytes]``.
"""

import base64
import json
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .errors import BackendError

KINDS = ("image", "text", "caption", "detect", "classify", "segment", "face")


def encode_array(arr):
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    return base64.b64encode(arr.tobytes()).decode("ascii"), list(arr.shape)


def decode_array(b64, shape):
    arr = np.frombuffer(base64.b64decode(b64), dtype="<f4")
    return arr.reshape(tuple(shape)).astype(np.float64)


def make_request(kind, payload, extra=None):
    if kind not in KINDS:
        raise BackendError(f"unknown backend kind {kind!r}")
    if isinstance(payload, str):
        raw = payload.encode("utf-8")
        req = {"kind": kind, "payload_b64": base64.b64encode(raw).decode("ascii"), "shape": [len(raw)]}
    else:
        b64, shape = encode_array(payload)
        req = {"kind": kind, "payload_b64": b64, "shape": shape}
    if extra:
        req["extra"] = extra
    return req


def decode_request(req):
    """Inverse of ``make_request``: returns (kind, payload, extra)."""
    kind = req["kind"]
    if kind == "text":
        payload = base64.b64decode(req["payload_b64"]).decode("utf-8")
    else:
        payload = decode_array(req["payload_b64"], req["shape"])
    return kind, payload, req.get("extra", {})


class HttpBackend:
    """Client for a remote model server speaking the JSON wire format."""

    thread_safe = True

    def __init__(self, url, timeout=30.0):
        self.url = url
        self.timeout = timeout

    def call(self, kind, payload, extra=None):
        body = json.dumps(make_request(kind, payload, extra)).encode()
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read())
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise BackendError(f"{kind} request to {self.url} failed: {exc}") from exc

    def tokens(self, kind, payload, extra=None):
        resp = self.call(kind, payload, extra)
        if "tokens_b64" not in resp:
            raise BackendError(f"{kind} response carries no tokens")
        return decode_array(resp["tokens_b64"], resp["shape"])


class HttpImageEncoder(HttpBackend):
    def encode(self, image):
        return self.tokens("image", image)


class HttpTextEncoder(HttpBackend):
    def encode(self, text):
        return self.tokens("text", text)


def serve(handlers, host="127.0.0.1", port=0):
    """Start a threaded server; ``handlers`` maps kind -> fn(payload, extra) -> response dict.

    Returns ``(server, url)``; call ``server.shutdown()`` when done.
    """

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            n = int(self.headers.get("Content-Length", 0))
            try:
                kind, payload, extra = decode_request(json.loads(self.rfile.read(n)))
                resp = handlers[kind](payload, extra)
                code = 200
            except Exception as exc:  # reported to the client as a 500
                resp, code = {"error": str(exc)}, 500
            data = json.dumps(resp).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer((host, port), Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server, f"http://{host}:{server.server_address[1]}/"


def tensor_response(arr):
    b64, shape = encode_array(arr)
    return {"tokens_b64": b64, "shape": shape}
