"""IPv4/TCP/UDP/DNS parsing and in-place header rewriting.

Rewrites patch the original bytes and recompute checksums, so every byte a
rewrite is not meant to touch stays identical.
"""

from __future__ import annotations

import enum
import ipaddress
import struct
from dataclasses import dataclass, field, replace

IPPROTO_TCP = 6
IPPROTO_UDP = 17
TCPOPT_EOL = 0
TCPOPT_NOP = 1
TCPOPT_MSS = 2
TCPOPT_WSCALE = 3
TCPOPT_SACK_PERM = 4
TCPOPT_TIMESTAMP = 8
DNS_PORT = 53
QTYPE_A = 1
QCLASS_IN = 1
TLS_MAX_RECORD = 16384 + 256
TLS_HEADER_LEN = 5


class PacketError(ValueError):
    pass


class Malformed(PacketError):
    pass


class UnsupportedProtocol(PacketError):
    pass


class MappingMismatch(PacketError):
    pass


class NoTimestampOption(PacketError):
    pass


class NotSynAck(PacketError):
    pass


class NotDns(PacketError):
    pass


class UnsupportedQtype(PacketError):
    pass


class NotTlsFraming(ValueError):
    pass


class Protocol(enum.IntEnum):
    TCP = IPPROTO_TCP
    UDP = IPPROTO_UDP


class TcpFlags(enum.IntFlag):
    NONE = 0
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20


class Direction(enum.Enum):
    OUTBOUND = "outbound"
    INBOUND = "inbound"


@dataclass(frozen=True)
class PacketView:
    src_ip: str
    dst_ip: str
    protocol: Protocol
    src_port: int
    dst_port: int
    payload: bytes = b""
    tcp_flags: TcpFlags = TcpFlags.NONE
    seq: int = 0
    ack_no: int = 0
    tcp_options: tuple[tuple[int, bytes], ...] = ()
    window: int = 64240
    urgent: int = 0
    ttl: int = 64
    ip_id: int = 0
    tos: int = 0
    dont_fragment: bool = True
    raw: bytes = field(default=b"", compare=False, repr=False)

    @property
    def is_tcp(self) -> bool:
        return self.protocol is Protocol.TCP

    def has(self, flags: TcpFlags) -> bool:
        return self.is_tcp and (self.tcp_flags & flags) == flags

    @property
    def timestamp(self) -> tuple[int, int] | None:
        for kind, data in self.tcp_options:
            if kind == TCPOPT_TIMESTAMP and len(data) == 8:
                return struct.unpack("!II", data)
        return None


@dataclass(frozen=True)
class NatMapping:
    client_ip: str
    client_port: int
    relay_ip: str
    relay_port: int

    def __post_init__(self):
        if not (0 < self.client_port <= 0xFFFF and 0 < self.relay_port <= 0xFFFF):
            raise ValueError("NAT ports must be non-zero 16-bit values")


@dataclass(frozen=True)
class TlsRecordHeader:
    content_type: int
    legacy_version: bytes
    length: int


# --------------------------------------------------------------------------
# checksums


def internet_checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _ip_bytes(addr: str) -> bytes:
    return ipaddress.IPv4Address(addr).packed


def _pseudo_header(src: bytes, dst: bytes, proto: int, length: int) -> bytes:
    return src + dst + struct.pack("!BBH", 0, proto, length)


def _transport_checksum(src: bytes, dst: bytes, proto: int, segment: bytes) -> int:
    csum = internet_checksum(_pseudo_header(src, dst, proto, len(segment)) + segment)
    if proto == IPPROTO_UDP and csum == 0:
        return 0xFFFF
    return csum


def _csum_offset(proto: int) -> int:
    return 16 if proto == IPPROTO_TCP else 6


def _refresh_checksums(buf: bytearray) -> bytes:
    ihl = (buf[0] & 0x0F) * 4
    buf[10:12] = b"\x00\x00"
    buf[10:12] = internet_checksum(bytes(buf[:ihl])).to_bytes(2, "big")
    proto = buf[9]
    off = ihl + _csum_offset(proto)
    buf[off:off + 2] = b"\x00\x00"
    csum = _transport_checksum(bytes(buf[12:16]), bytes(buf[16:20]), proto, bytes(buf[ihl:]))
    buf[off:off + 2] = csum.to_bytes(2, "big")
    return bytes(buf)


def checksums_ok(raw: bytes) -> bool:
    ihl = (raw[0] & 0x0F) * 4
    if internet_checksum(raw[:ihl]) != 0:
        return False
    proto = raw[9]
    segment = raw[ihl:]
    if proto == IPPROTO_UDP and segment[6:8] == b"\x00\x00":
        return True
    return internet_checksum(_pseudo_header(raw[12:16], raw[16:20], proto, len(segment)) + segment) == 0


# --------------------------------------------------------------------------
# parse / build


def _parse_options(data: bytes) -> tuple[tuple[int, bytes], ...]:
    opts = []
    i = 0
    while i < len(data):
        kind = data[i]
        if kind == TCPOPT_EOL:
            break  # the rest is padding
        if kind == TCPOPT_NOP:
            opts.append((kind, b""))
            i += 1
            continue
        if i + 1 >= len(data):
            raise Malformed("truncated TCP option")
        length = data[i + 1]
        if length < 2 or i + length > len(data):
            raise Malformed(f"bad TCP option length {length}")
        opts.append((kind, bytes(data[i + 2:i + length])))
        i += length
    return tuple(opts)


def _encode_options(opts) -> bytes:
    out = bytearray()
    for kind, data in opts:
        if kind == TCPOPT_EOL:
            break
        if kind == TCPOPT_NOP:
            out.append(kind)
        else:
            out += bytes([kind, len(data) + 2]) + data
    if len(out) % 4:
        out += b"\x00" * (4 - len(out) % 4)
    if len(out) > 40:
        raise Malformed("TCP options exceed 40 bytes")
    return bytes(out)


def parse_packet(raw: bytes) -> PacketView:
    raw = bytes(raw)
    if len(raw) < 20:
        raise Malformed(f"{len(raw)} bytes is shorter than an IPv4 header")
    version, ihl = raw[0] >> 4, (raw[0] & 0x0F) * 4
    if version != 4:
        raise UnsupportedProtocol(f"IP version {version}")
    if ihl < 20 or ihl > len(raw):
        raise Malformed(f"bad IHL {ihl}")
    tos, total_len, ip_id, frag, ttl, proto = struct.unpack_from("!BHHHBB", raw, 1)
    if total_len != len(raw):
        raise Malformed(f"IPv4 total length {total_len} != buffer {len(raw)}")
    src, dst = str(ipaddress.IPv4Address(raw[12:16])), str(ipaddress.IPv4Address(raw[16:20]))
    seg = raw[ihl:]
    common = dict(src_ip=src, dst_ip=dst, ttl=ttl, ip_id=ip_id, tos=tos,
                  dont_fragment=bool(frag & 0x4000), raw=raw)
    if proto == IPPROTO_TCP:
        if len(seg) < 20:
            raise Malformed("truncated TCP header")
        sport, dport, seq, ack, off_flags, window, _csum, urg = struct.unpack_from("!HHIIHHHH", seg)
        doff = (off_flags >> 12) * 4
        if doff < 20 or doff > len(seg):
            raise Malformed(f"bad TCP data offset {doff}")
        return PacketView(protocol=Protocol.TCP, src_port=sport, dst_port=dport, payload=seg[doff:],
                          tcp_flags=TcpFlags(off_flags & 0x3F), seq=seq, ack_no=ack,
                          tcp_options=_parse_options(seg[20:doff]), window=window, urgent=urg, **common)
    if proto == IPPROTO_UDP:
        if len(seg) < 8:
            raise Malformed("truncated UDP header")
        sport, dport, ulen, _csum = struct.unpack_from("!HHHH", seg)
        if ulen != len(seg):
            raise Malformed(f"UDP length {ulen} != {len(seg)}")
        return PacketView(protocol=Protocol.UDP, src_port=sport, dst_port=dport, payload=seg[8:],
                          window=0, **common)
    raise UnsupportedProtocol(f"IP protocol {proto}")


def build_packet(view: PacketView) -> PacketView:
    """Serialize ``view`` with fresh checksums; returns the re-parsed view."""
    src, dst = _ip_bytes(view.src_ip), _ip_bytes(view.dst_ip)
    if view.protocol is Protocol.TCP:
        opts = _encode_options(view.tcp_options)
        doff = 20 + len(opts)
        seg = struct.pack("!HHIIHHHH", view.src_port, view.dst_port, view.seq & 0xFFFFFFFF,
                          view.ack_no & 0xFFFFFFFF, ((doff // 4) << 12) | int(view.tcp_flags),
                          view.window, 0, view.urgent) + opts + view.payload
    else:
        seg = struct.pack("!HHHH", view.src_port, view.dst_port, 8 + len(view.payload), 0) + view.payload
    total = 20 + len(seg)
    if total > 0xFFFF:
        raise Malformed("packet exceeds 65535 bytes")
    frag = 0x4000 if view.dont_fragment else 0
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, view.tos, total, view.ip_id, frag, view.ttl,
                     int(view.protocol), 0, src, dst)
    return parse_packet(_refresh_checksums(bytearray(ip + seg)))


def tcp_packet(src_ip: str, src_port: int, dst_ip: str, dst_port: int, *, flags: TcpFlags,
               seq: int = 0, ack_no: int = 0, payload: bytes = b"", options=(), window: int = 64240,
               ip_id: int = 0) -> PacketView:
    return build_packet(PacketView(src_ip, dst_ip, Protocol.TCP, src_port, dst_port, payload=payload,
                                   tcp_flags=flags, seq=seq, ack_no=ack_no, tcp_options=tuple(options),
                                   window=window, ip_id=ip_id))


def udp_packet(src_ip: str, src_port: int, dst_ip: str, dst_port: int, payload: bytes,
               ip_id: int = 0) -> PacketView:
    return build_packet(PacketView(src_ip, dst_ip, Protocol.UDP, src_port, dst_port,
                                   payload=payload, window=0, ip_id=ip_id))


def timestamp_option(tsval: int, tsecr: int) -> tuple[int, bytes]:
    return (TCPOPT_TIMESTAMP, struct.pack("!II", tsval & 0xFFFFFFFF, tsecr & 0xFFFFFFFF))


def syn_options(tsval: int, tsecr: int = 0, mss: int = 1460, wscale: int = 7):
    """Linux-style SYN option block: MSS, SACK-permitted, timestamps, NOP, window scale."""
    return (
        (TCPOPT_MSS, struct.pack("!H", mss)),
        (TCPOPT_SACK_PERM, b""),
        timestamp_option(tsval, tsecr),
        (TCPOPT_NOP, b""),
        (TCPOPT_WSCALE, bytes([wscale])),
    )


# --------------------------------------------------------------------------
# rewrites


def _patch(view: PacketView, edits: dict[int, bytes]) -> PacketView:
    buf = bytearray(view.raw or build_packet(view).raw)
    for off, data in edits.items():
        buf[off:off + len(data)] = data
    return parse_packet(_refresh_checksums(buf))


def nat_rewrite(packet: PacketView, mapping: NatMapping, direction: Direction) -> PacketView:
    """Outbound: client source -> relay source. Inbound: relay destination -> client destination."""
    raw = packet.raw or build_packet(packet).raw
    ihl = (raw[0] & 0x0F) * 4
    if direction is Direction.OUTBOUND:
        if (packet.src_ip, packet.src_port) != (mapping.client_ip, mapping.client_port):
            raise MappingMismatch(f"{packet.src_ip}:{packet.src_port} is not the mapped client")
        return _patch(packet, {12: _ip_bytes(mapping.relay_ip), ihl: mapping.relay_port.to_bytes(2, "big")})
    if (packet.dst_ip, packet.dst_port) != (mapping.relay_ip, mapping.relay_port):
        raise MappingMismatch(f"{packet.dst_ip}:{packet.dst_port} is not the mapped relay")
    return _patch(packet, {16: _ip_bytes(mapping.client_ip), ihl + 2: mapping.client_port.to_bytes(2, "big")})


def _timestamp_offset(raw: bytes) -> int | None:
    """Absolute byte offset of the timestamp option's TSval field, if present."""
    ihl = (raw[0] & 0x0F) * 4
    doff = (raw[ihl + 12] >> 4) * 4
    i, end = ihl + 20, ihl + doff
    while i < end:
        kind = raw[i]
        if kind == TCPOPT_EOL:
            return None
        if kind == TCPOPT_NOP:
            i += 1
            continue
        length = raw[i + 1]
        if kind == TCPOPT_TIMESTAMP and length == 10:
            return i + 2
        i += max(length, 2)
    return None


def replace_tsval(packet: PacketView, tsval: int) -> PacketView:
    raw = packet.raw or build_packet(packet).raw
    off = _timestamp_offset(raw)
    if off is None:
        raise NoTimestampOption("packet carries no timestamp option")
    return _patch(packet, {off: (tsval & 0xFFFFFFFF).to_bytes(4, "big")})


def correct_syn_ack_timestamp(syn_ack: PacketView, tsval_orig: int) -> PacketView:
    """Set the SYN-ACK's echoed timestamp (TSecr) to the client's original TSval."""
    if not syn_ack.has(TcpFlags.SYN | TcpFlags.ACK):
        raise NotSynAck("packet is not a SYN-ACK")
    raw = syn_ack.raw or build_packet(syn_ack).raw
    off = _timestamp_offset(raw)
    if off is None:
        raise NoTimestampOption("SYN-ACK carries no timestamp option")
    return _patch(syn_ack, {off + 4: (tsval_orig & 0xFFFFFFFF).to_bytes(4, "big")})


# --------------------------------------------------------------------------
# DNS


def encode_qname(name: str) -> bytes:
    out = bytearray()
    for label in name.rstrip(".").split("."):
        raw = label.encode("ascii")
        if not 0 < len(raw) < 64:
            raise ValueError(f"bad DNS label {label!r}")
        out += bytes([len(raw)]) + raw
    return bytes(out + b"\x00")


def decode_name(msg: bytes, offset: int) -> tuple[str, int]:
    """Decode a possibly compressed name; returns (name, offset after the name in place)."""
    labels = []
    end = None
    seen = set()
    while True:
        if offset >= len(msg):
            raise NotDns("name runs past end of message")
        length = msg[offset]
        if length & 0xC0 == 0xC0:
            if offset + 1 >= len(msg):
                raise NotDns("truncated compression pointer")
            target = ((length & 0x3F) << 8) | msg[offset + 1]
            if target in seen:
                raise NotDns("compression loop")
            seen.add(target)
            if end is None:
                end = offset + 2
            offset = target
            continue
        if length & 0xC0:
            raise NotDns("reserved label type")
        offset += 1
        if length == 0:
            break
        labels.append(msg[offset:offset + length].decode("ascii", "replace"))
        offset += length
    return ".".join(labels).lower(), (end if end is not None else offset)


@dataclass(frozen=True)
class DnsQuery:
    transaction_id: int
    qname: str
    qtype: int
    flags: int


def _parse_dns_query(packet: PacketView) -> DnsQuery:
    if packet.protocol is not Protocol.UDP or packet.dst_port != DNS_PORT:
        raise NotDns("not UDP to port 53")
    msg = packet.payload
    if len(msg) < 12:
        raise NotDns("DNS header truncated")
    txid, flags, qdcount = struct.unpack_from("!HHH", msg)
    if flags & 0x8000:
        raise NotDns("QR=1 (response)")
    if qdcount < 1:
        raise NotDns("no question")
    qname, off = decode_name(msg, 12)
    if off + 4 > len(msg):
        raise NotDns("question truncated")
    qtype, _qclass = struct.unpack_from("!HH", msg, off)
    return DnsQuery(txid, qname, qtype, flags)


def extract_dns_query(packet: PacketView) -> tuple[int, str]:
    q = _parse_dns_query(packet)
    if q.qtype != QTYPE_A:
        raise UnsupportedQtype(f"QTYPE {q.qtype}")
    return q.transaction_id, q.qname


def dns_query_payload(txid: int, qname: str, qtype: int = QTYPE_A, rd: bool = True) -> bytes:
    flags = 0x0100 if rd else 0
    return struct.pack("!HHHHHH", txid, flags, 1, 0, 0, 0) + encode_qname(qname) + struct.pack("!HH", qtype, QCLASS_IN)


def build_dns_response(query: PacketView, resolved_ip: str, ttl: int = 60) -> PacketView:
    q = _parse_dns_query(query)
    flags = 0x8000 | (q.flags & 0x7800) | 0x0400 | (q.flags & 0x0100) | 0x0080
    body = (
        struct.pack("!HHHHHH", q.transaction_id, flags, 1, 1, 0, 0)
        + encode_qname(q.qname) + struct.pack("!HH", q.qtype, QCLASS_IN)
        + struct.pack("!HHHIH", 0xC00C, QTYPE_A, QCLASS_IN, ttl, 4) + _ip_bytes(resolved_ip)
    )
    return udp_packet(query.dst_ip, query.dst_port, query.src_ip, query.src_port, body, ip_id=query.ip_id)


def parse_dns_answer(packet: PacketView) -> tuple[int, str | None]:
    """(transaction id, first A record) from a response; used by virtual clients."""
    msg = packet.payload
    txid, flags, qd, an = struct.unpack_from("!HHHH", msg)
    if not flags & 0x8000:
        raise NotDns("not a response")
    off = 12
    for _ in range(qd):
        _, off = decode_name(msg, off)
        off += 4
    for _ in range(an):
        _, off = decode_name(msg, off)
        rtype, _rclass, _ttl, rdlen = struct.unpack_from("!HHIH", msg, off)
        off += 10
        if rtype == QTYPE_A and rdlen == 4:
            return txid, str(ipaddress.IPv4Address(msg[off:off + 4]))
        off += rdlen
    return txid, None


# --------------------------------------------------------------------------
# TLS record framing


def parse_tls_header(buf: bytes) -> TlsRecordHeader:
    return TlsRecordHeader(buf[0], bytes(buf[1:3]), int.from_bytes(buf[3:5], "big"))


def tls_record_scan(buffer: bytes) -> tuple[list[bytes], bytes]:
    """Split a byte stream on TLS record edges: (complete records, trailing partial)."""
    buffer = bytes(buffer)
    records = []
    i = 0
    n = len(buffer)
    while i < n:
        if not 20 <= buffer[i] <= 23:
            raise NotTlsFraming(f"content type {buffer[i]} at offset {i}")
        if n - i < TLS_HEADER_LEN:
            break
        length = int.from_bytes(buffer[i + 3:i + 5], "big")
        if length > TLS_MAX_RECORD:
            raise NotTlsFraming(f"record length {length} at offset {i}")
        end = i + TLS_HEADER_LEN + length
        if end > n:
            break
        records.append(buffer[i:end])
        i = end
    return records, buffer[i:]


def with_payload(view: PacketView, payload: bytes) -> PacketView:
    return build_packet(replace(view, payload=payload))
