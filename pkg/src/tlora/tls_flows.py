"""TLS endpoints for the end-to-end harness.

Two flavours share one small interface: :class:`RealTls` wraps ``ssl.SSLObject``
over memory BIOs (a genuine TLS 1.3 handshake), :class:`ScriptedTls` emits
record flights of fixed sizes from a seeded keystream so simulated runs are
bit-reproducible.
"""

from __future__ import annotations

import datetime
import functools
import json
import os
import random
import ssl
import struct
import tempfile
from dataclasses import dataclass

from .packet_engine import tls_record_scan

SERVER_NAME = "api.test"

# exactly 55 bytes of JSON
API_BODY = json.dumps({"device": "sensor-17", "state": "ok", "temp_c": 21, "rh": 40},
                      separators=(",", ":")).encode()
assert len(API_BODY) == 55, len(API_BODY)

CT_CCS, CT_ALERT, CT_HANDSHAKE, CT_APPDATA = 20, 21, 22, 23
AEAD_TAG = 16


def http_request(host: str = SERVER_NAME, path: str = "/v1/reading") -> bytes:
    return (f"GET {path} HTTP/1.1\r\nHost: {host}\r\nUser-Agent: tlora-device/1\r\n"
            f"Accept: application/json\r\nConnection: close\r\n\r\n").encode()


def http_response(body: bytes = API_BODY) -> bytes:
    head = (f"HTTP/1.1 200 OK\r\nContent-Type: application/json\r\n"
            f"Content-Length: {len(body)}\r\nConnection: close\r\n\r\n").encode()
    return head + body


def response_complete(buf: bytes) -> bytes | None:
    """Body of a complete HTTP response in ``buf``, or None while still partial."""
    head, sep, rest = buf.partition(b"\r\n\r\n")
    if not sep:
        return None
    length = None
    for line in head.split(b"\r\n")[1:]:
        name, _, value = line.partition(b":")
        if name.strip().lower() == b"content-length":
            length = int(value.strip())
    if length is None or len(rest) < length:
        return None
    return rest[:length]


def request_complete(buf: bytes) -> bool:
    return b"\r\n\r\n" in buf


# -- certificate -----------------------------------------------------------

@functools.lru_cache(maxsize=1)
def server_certificate() -> tuple[str, str]:
    """Self-signed EC certificate for SERVER_NAME; returns (cert path, key path)."""
    from cryptography import x509
    from cryptography.hazmat.primitives import hashes, serialization
    from cryptography.hazmat.primitives.asymmetric import ec
    from cryptography.x509.oid import NameOID

    key = ec.generate_private_key(ec.SECP256R1())
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, SERVER_NAME)])
    now = datetime.datetime.now(datetime.timezone.utc)
    cert = (x509.CertificateBuilder().subject_name(name).issuer_name(name)
            .public_key(key.public_key()).serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(days=1))
            .not_valid_after(now + datetime.timedelta(days=30))
            .add_extension(x509.SubjectAlternativeName([x509.DNSName(SERVER_NAME)]), critical=False)
            .add_extension(x509.BasicConstraints(ca=True, path_length=None), critical=True)
            .sign(key, hashes.SHA256()))
    folder = tempfile.mkdtemp(prefix="tlora-cert-")
    cert_path, key_path = os.path.join(folder, "cert.pem"), os.path.join(folder, "key.pem")
    with open(cert_path, "wb") as fh:
        fh.write(cert.public_bytes(serialization.Encoding.PEM))
    with open(key_path, "wb") as fh:
        fh.write(key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                                   serialization.NoEncryption()))
    return cert_path, key_path


class TlsEndpoint:
    """Byte-in, byte-out TLS session.

    ``feed`` takes bytes from the peer and returns bytes to send back.
    Application plaintext piles up in ``received``.
    """

    handshake_done: bool = False

    def start(self) -> bytes:
        return b""

    def feed(self, data: bytes) -> bytes:
        raise NotImplementedError

    def send_app(self, data: bytes) -> bytes:
        raise NotImplementedError

    @property
    def version(self) -> str | None:
        return None


class RealTls(TlsEndpoint):
    def __init__(self, server_side: bool):
        cert, key = server_certificate()
        if server_side:
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            ctx.load_cert_chain(cert, key)
            ctx.num_tickets = 0
        else:
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
            ctx.load_verify_locations(cert)
        ctx.minimum_version = ctx.maximum_version = ssl.TLSVersion.TLSv1_3
        self._in, self._out = ssl.MemoryBIO(), ssl.MemoryBIO()
        self._obj = ctx.wrap_bio(self._in, self._out, server_side=server_side,
                                 server_hostname=None if server_side else SERVER_NAME)
        self.received = b""
        self.handshake_done = False

    def _pump(self) -> None:
        if not self.handshake_done:
            try:
                self._obj.do_handshake()
                self.handshake_done = True
            except ssl.SSLWantReadError:
                return
        while True:
            try:
                chunk = self._obj.read(16384)
            except (ssl.SSLWantReadError, ssl.SSLZeroReturnError):
                return
            if not chunk:
                return
            self.received += chunk

    def start(self) -> bytes:
        self._pump()
        return self._out.read()

    def feed(self, data: bytes) -> bytes:
        self._in.write(data)
        self._pump()
        return self._out.read()

    def send_app(self, data: bytes) -> bytes:
        self._obj.write(data)
        return self._out.read()

    @property
    def version(self) -> str | None:
        return self._obj.version() if self.handshake_done else None


@dataclass(frozen=True)
class FlightSizes:
    """Record body sizes of the scripted handshake, in bytes."""
    client_hello: int = 512
    server_hello: int = 122
    encrypted_extensions: int = 40
    certificate: int = 2000
    certificate_verify: int = 280
    finished: int = 53


def _record(ctype: int, body: bytes, version: int = 0x0303) -> bytes:
    return struct.pack("!BHH", ctype, version, len(body)) + body


class ScriptedTls(TlsEndpoint):
    """Deterministic stand-in that only reproduces record sizes and ordering.

    Application data is XOR-masked with a seeded keystream and padded with a
    16-byte tag, so it never crosses the link as plaintext.
    """

    def __init__(self, server_side: bool, seed: int, sizes: FlightSizes = FlightSizes()):
        self.server_side = server_side
        self.seed = seed
        self.sizes = sizes
        self.received = b""
        self.handshake_done = False
        self._buf = b""
        self._seen = 0
        self._sent_app = 0
        self._recv_app = 0

    def _noise(self, label: str, n: int) -> bytes:
        return random.Random(f"{self.seed}-{label}").randbytes(n)

    def _mask(self, direction: str, counter: int, data: bytes) -> bytes:
        ks = random.Random(f"{self.seed}-{direction}-{counter}").randbytes(len(data))
        return bytes(a ^ b for a, b in zip(data, ks))

    def _dir(self, sending: bool) -> str:
        return "s2c" if self.server_side == sending else "c2s"

    def start(self) -> bytes:
        if self.server_side:
            return b""
        body = b"\x01" + self._noise("ch", self.sizes.client_hello - 1)
        return _record(CT_HANDSHAKE, body, version=0x0301)

    def _server_flight(self) -> bytes:
        s = self.sizes
        return b"".join([
            _record(CT_HANDSHAKE, b"\x02" + self._noise("sh", s.server_hello - 1)),
            _record(CT_CCS, b"\x01"),
            _record(CT_APPDATA, self._noise("ee", s.encrypted_extensions)),
            _record(CT_APPDATA, self._noise("cert", s.certificate)),
            _record(CT_APPDATA, self._noise("cv", s.certificate_verify)),
            _record(CT_APPDATA, self._noise("sfin", s.finished)),
        ])

    def _client_flight(self) -> bytes:
        return _record(CT_CCS, b"\x01") + _record(CT_APPDATA, self._noise("cfin", self.sizes.finished))

    def feed(self, data: bytes) -> bytes:
        records, self._buf = tls_record_scan(self._buf + data)
        out = b""
        for rec in records:
            self._seen += 1
            if not self.handshake_done:
                out += self._handshake_record(rec)
            elif rec[0] == CT_APPDATA:
                body = rec[5:-AEAD_TAG - 1]
                self.received += self._mask(self._dir(False), self._recv_app, body)
                self._recv_app += 1
        return out

    def _handshake_record(self, rec: bytes) -> bytes:
        if self.server_side:
            # ClientHello, then CCS + Finished from the client
            if self._seen == 1:
                return self._server_flight()
            if self._seen == 3:
                self.handshake_done = True
            return b""
        if self._seen == 6:  # SH, CCS, EE, Cert, CV, Finished
            self.handshake_done = True
            return self._client_flight()
        return b""

    def send_app(self, data: bytes) -> bytes:
        masked = self._mask(self._dir(True), self._sent_app, data)
        self._sent_app += 1
        tag = self._noise(f"tag-{self._dir(True)}-{self._sent_app}", AEAD_TAG)
        return _record(CT_APPDATA, masked + b"\x17" + tag)

    @property
    def version(self) -> str | None:
        return "TLSv1.3-scripted" if self.handshake_done else None


def make_pair(mode: str, seed: int, sizes: FlightSizes = FlightSizes()) -> tuple[TlsEndpoint, TlsEndpoint]:
    """(client, server) endpoints for ``mode`` in {"real_tls", "simulated_tls"}."""
    if mode == "real_tls":
        return RealTls(server_side=False), RealTls(server_side=True)
    if mode == "simulated_tls":
        return ScriptedTls(False, seed, sizes), ScriptedTls(True, seed, sizes)
    raise ValueError(f"unknown TLS mode {mode!r}")
