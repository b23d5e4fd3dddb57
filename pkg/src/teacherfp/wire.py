"""Newline-delimited JSON over TCP, so attacks can run against a box that
is genuinely remote.

Query frame:    {"id": int, "shape": [C,H,W], "pixels": base64(raw bytes)}
Reply frame:    {"id": int, "label": int} or {"id": int, "posteriors": [...]}
Admin frames:   {"op": "count"} -> {"count": n}
                {"op": "info"}  -> {"shape": [...], "classes": c, "mode": str}
Unparseable or incomplete frames get {"error": "bad_request"} and the
connection stays open; a well-formed query with a wrong image shape gets
{"id", "error": "shape_mismatch"} and still spends a query.
"""

from __future__ import annotations

import base64
import json
import socket
import socketserver
import threading

import numpy as np

from .blackbox import Endpoint, ExposureMode, LocalEndpoint, ProtocolError, Response, TransportError


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        endpoint = self.server.endpoint
        for line in self.rfile:
            line = line.strip()
            if not line:
                continue
            try:
                reply = self._process(endpoint, line)
            except Exception:
                reply = {"error": "bad_request"}
            self.wfile.write(json.dumps(reply).encode() + b"\n")
            self.wfile.flush()

    def _process(self, endpoint, line):
        try:
            msg = json.loads(line.decode())
        except (json.JSONDecodeError, UnicodeDecodeError):
            return {"error": "bad_request"}
        if not isinstance(msg, dict):
            return {"error": "bad_request"}
        if msg.get("op") == "count":
            return {"count": endpoint.query_count()}
        if msg.get("op") == "info":
            return {"shape": list(endpoint.input_shape),
                    "classes": endpoint.classes, "mode": str(endpoint.mode)}
        if "id" not in msg or "shape" not in msg or "pixels" not in msg:
            return {"error": "bad_request"}
        qid = msg["id"]
        try:
            raw = base64.b64decode(msg["pixels"], validate=True)
            image = np.frombuffer(raw, dtype=np.uint8).reshape(msg["shape"])
        except Exception:
            return {"id": qid, "error": "bad_request"}
        try:
            resp = endpoint.query(image)
        except ProtocolError:
            return {"id": qid, "error": "shape_mismatch"}
        if resp.label is not None:
            return {"id": qid, "label": resp.label}
        return {"id": qid, "posteriors": [float(p) for p in resp.posteriors]}


class Server:
    """Running TCP server hiding a local endpoint."""

    def __init__(self, endpoint, address=("127.0.0.1", 0)):
        self.endpoint = endpoint

        class _TCP(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = _TCP(address, _Handler)
        self._server.endpoint = endpoint
        self.address = self._server.server_address
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def close(self):
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(network, mode=ExposureMode("top1"), address=("127.0.0.1", 0), seed=0):
    """Expose a model (Network or Student) at a TCP address."""
    net = getattr(network, "network", network)
    return Server(LocalEndpoint(net, mode, seed=seed), address)


class RemoteEndpoint(Endpoint):
    def __init__(self, address, timeout=10.0):
        self.address = tuple(address)
        self._timeout = timeout
        self._lock = threading.Lock()
        self._next_id = 0
        try:
            self._sock = socket.create_connection(self.address, timeout=timeout)
            self._file = self._sock.makefile("rwb")
        except OSError as e:
            raise TransportError(f"cannot connect to {self.address}: {e}") from None
        info = self._roundtrip({"op": "info"})
        self.input_shape = tuple(info["shape"])
        self.classes = info["classes"]
        self.mode = ExposureMode.parse(info["mode"])

    def _roundtrip(self, msg):
        with self._lock:
            try:
                self._file.write(json.dumps(msg).encode() + b"\n")
                self._file.flush()
                line = self._file.readline()
            except OSError as e:
                raise TransportError(f"connection to {self.address} failed: {e}") from None
        if not line:
            raise TransportError(f"server at {self.address} closed the connection")
        return json.loads(line.decode())

    def query(self, image):
        image = np.ascontiguousarray(image)
        qid, self._next_id = self._next_id, self._next_id + 1
        reply = self._roundtrip({
            "id": qid, "shape": list(image.shape),
            "pixels": base64.b64encode(image.astype(np.uint8).tobytes()).decode(),
        })
        if reply.get("error") == "shape_mismatch":
            raise ProtocolError(f"server rejected input shape {image.shape}")
        if "error" in reply:
            raise TransportError(f"server error: {reply['error']}")
        if reply.get("id") != qid:
            raise TransportError(f"reply id {reply.get('id')} != request id {qid}")
        if "label" in reply:
            return Response(label=int(reply["label"]))
        return Response(posteriors=np.asarray(reply["posteriors"], dtype=np.float32))

    def query_count(self):
        return int(self._roundtrip({"op": "count"})["count"])

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


def connect(address, timeout=10.0):
    return RemoteEndpoint(address, timeout)
