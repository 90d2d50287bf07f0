"""HTTP verifier client plus a bundled mock server speaking the same wire
contract, backed by a local embedder gallery.

Wire format (JSON over HTTP POST /api/verify):
  request:  {"image": <base64 PNG>, "mode": "search" | "compare",
             "reference": <base64 PNG, compare mode only>}
  response: {"identity": string | null, "confidence": number 0-100,
             "similarity": number (optional)}
"""

from __future__ import annotations

import base64
import io
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

import httpx
import numpy as np
from PIL import Image

from .evaluation import LocalGalleryVerifier, VerifierDecision, VerifierError
from .types import ImageTensor, to_uint8, validate_image


class VerifierTransportError(VerifierError):
    """Connection failures after exhausting retries."""


class VerifierProtocolError(VerifierError):
    """Non-2xx response from the verifier endpoint."""

    def __init__(self, status_code: int, detail: str = ""):
        super().__init__(f"verifier endpoint returned {status_code}: {detail}")
        self.status_code = status_code


class VerifierResponseError(VerifierError):
    """2xx response whose body does not match the wire contract."""


def encode_image_b64(img: ImageTensor) -> str:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img.data), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_image_b64(data: str) -> ImageTensor:
    raw = base64.b64decode(data)
    with Image.open(io.BytesIO(raw)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return validate_image(arr)


class RemoteVerifierClient:
    """Client for the verify endpoint with retry on transport failures.

    Transport errors and 5xx responses are retried up to max_attempts with
    exponential backoff; 4xx and malformed bodies fail immediately (they are
    deterministic).
    """

    def __init__(self, endpoint: str, api_key: Optional[str] = None,
                 verifier_id: str = "remote", timeout: float = 10.0,
                 max_attempts: int = 3, backoff: float = 0.5):
        self.id = verifier_id
        self.endpoint = endpoint.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff = backoff

    def _post(self, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["X-Api-Key"] = self.api_key
        url = self.endpoint + "/api/verify"
        last_exc: Optional[Exception] = None
        for attempt in range(self.max_attempts):
            if attempt > 0:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                resp = httpx.post(url, json=payload, headers=headers, timeout=self.timeout)
            except httpx.HTTPError as e:
                last_exc = e
                continue
            if resp.status_code >= 500:
                last_exc = VerifierProtocolError(resp.status_code, resp.text[:200])
                continue
            if resp.status_code >= 300:
                raise VerifierProtocolError(resp.status_code, resp.text[:200])
            try:
                body = resp.json()
            except ValueError as e:
                raise VerifierResponseError(f"response is not JSON: {e}") from e
            if not isinstance(body, dict) or "confidence" not in body or "identity" not in body:
                raise VerifierResponseError(f"response missing required fields: {body!r}")
            return body
        if isinstance(last_exc, VerifierProtocolError):
            raise last_exc
        raise VerifierTransportError(
            f"verifier endpoint {url} unreachable after {self.max_attempts} attempts: {last_exc}")

    def _decision(self, body: dict) -> VerifierDecision:
        identity = body["identity"]
        confidence = float(body["confidence"])
        if identity is not None and not isinstance(identity, str):
            raise VerifierResponseError(f"identity must be a string or null, got {identity!r}")
        if not (0.0 <= confidence <= 100.0):
            raise VerifierResponseError(f"confidence out of range: {confidence}")
        return VerifierDecision(identity=identity, confidence=confidence,
                                similarity=body.get("similarity"))

    def verify(self, image) -> VerifierDecision:
        img = image if isinstance(image, ImageTensor) else validate_image(np.asarray(image))
        return self._decision(self._post({"image": encode_image_b64(img), "mode": "search"}))

    def compare(self, image, reference) -> VerifierDecision:
        img = image if isinstance(image, ImageTensor) else validate_image(np.asarray(image))
        ref = reference if isinstance(reference, ImageTensor) else validate_image(np.asarray(reference))
        return self._decision(self._post({
            "image": encode_image_b64(img),
            "mode": "compare",
            "reference": encode_image_b64(ref),
        }))


def remote_verify(client: RemoteVerifierClient, image):
    """Search the remote gallery; returns (identity-or-None, confidence)."""
    decision = client.verify(image)
    return decision.identity, decision.confidence


# ---------------------------------------------------------------------------
# Mock server
# ---------------------------------------------------------------------------

class _MockHandler(BaseHTTPRequestHandler):
    verifier: LocalGalleryVerifier

    def log_message(self, fmt, *args):  # keep tests quiet
        pass

    def _send(self, code: int, body: dict) -> None:
        data = json.dumps(body).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_POST(self):
        if self.path != "/api/verify":
            self._send(404, {"error": "not found"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length))
            mode = payload.get("mode", "search")
            image = decode_image_b64(payload["image"])
            if mode == "compare":
                decision = self.server.verifier.compare(image, decode_image_b64(payload["reference"]))
            elif mode == "search":
                decision = self.server.verifier.verify(image)
            else:
                self._send(400, {"error": f"unknown mode {mode!r}"})
                return
        except (KeyError, ValueError) as e:
            self._send(400, {"error": str(e)})
            return
        self._send(200, {
            "identity": decision.identity,
            "confidence": decision.confidence,
            "similarity": decision.similarity,
        })


class MockVerifierServer:
    """Threaded HTTP server exposing a LocalGalleryVerifier over the wire
    contract; use as a context manager in tests and demos.
    """

    def __init__(self, verifier: LocalGalleryVerifier, host: str = "127.0.0.1", port: int = 0):
        self._httpd = ThreadingHTTPServer((host, port), _MockHandler)
        self._httpd.verifier = verifier
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockVerifierServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
