"""Shared fixtures for the unit and acceptance suites."""
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from dyncot import autodiff as ad
from dyncot.autodiff import Tensor


def project(out: Tensor, seed: int) -> Tensor:
    # scalarize a tensor-valued op with a fixed random weighting
    r = np.random.default_rng(1000 + seed).normal(size=out.shape)
    return ad.sum(ad.mul(out, Tensor(r)))


def op_cases():
    """(name, input factory, scalar function) for every differentiable op."""
    def attn(q, k, v):
        return ad.causal_attention(q, k, v, n_heads=2)

    ids = np.array([0, 2, 2, 1, 3])
    targets = np.array([1, 0, 3, 3, 2])
    mask = np.array([True, False, True, True, False])
    return [
        ("add", lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], lambda a, b: ad.add(a, b)),
        ("broadcast_add", lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))], lambda a, b: ad.add(a, b)),
        ("mul", lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], lambda a, b: ad.mul(a, b)),
        ("matmul", lambda r: [r.normal(size=(4, 5)), r.normal(size=(5, 3))], lambda a, b: ad.matmul(a, b)),
        ("transpose", lambda r: [r.normal(size=(3, 5))], lambda a: ad.transpose(a)),
        ("mean", lambda r: [r.normal(size=(3, 4))], lambda a: ad.mean(ad.mul(a, a))),
        ("tanh", lambda r: [r.normal(size=(3, 4))], lambda a: ad.tanh(a)),
        ("gelu", lambda r: [r.normal(size=(3, 4))], lambda a: ad.gelu(a)),  # tail |x|>4 is below FD resolution
        ("layer_norm", lambda r: [r.normal(size=(3, 6)), 1 + 0.1 * r.normal(size=6), r.normal(size=6)],
         lambda x, w, b: ad.layer_norm(x, w, b)),
        ("embedding", lambda r: [r.normal(size=(4, 3))], lambda t: ad.embedding(t, ids)),
        ("slice_rows", lambda r: [r.normal(size=(6, 3))], lambda t: ad.slice_rows(t, 4)),
        ("softmax", lambda r: [r.normal(size=(3, 5))], lambda a: ad.softmax(a)),
        ("causal_attention", lambda r: [r.normal(size=(5, 4)) for _ in range(3)], attn),
        ("masked_cross_entropy", lambda r: [r.normal(size=(5, 4)) * 2],
         lambda z: ad.masked_cross_entropy(z, targets, mask)),
    ]


class Stub:
    """Scripted chat-completions server.

    ``script`` is either a list of behaviours consumed one per request, or a
    callable mapping the request body to a behaviour. Behaviours: "ok",
    "500", "400", "timeout", "malformed", or any other string to return as
    the assistant text.
    """

    def __init__(self, script, default="ok"):
        self.script = script if callable(script) else list(script)
        self.default = default
        self.requests = []
        self.lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with stub.lock:
                    stub.requests.append((dict(self.headers), body))
                    if callable(stub.script):
                        action = stub.script(body)
                    else:
                        action = stub.script.pop(0) if stub.script else stub.default
                if action == "timeout":
                    time.sleep(0.6)
                    action = "ok"
                if action == "500":
                    self._send(500, b"boom")
                elif action == "malformed":
                    self._send(200, b"{not json")
                elif action == "400":
                    self._send(400, b"bad request")
                else:
                    text = action if action != "ok" else "users tag this <think> because snow"
                    reply = {"choices": [{"message": {"role": "assistant", "content": text}}]}
                    self._send(200, json.dumps(reply).encode())

            def _send(self, code, data):
                try:
                    self.send_response(code)
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                except (BrokenPipeError, ConnectionResetError):
                    pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/v1/chat/completions"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
