"""The mesh reference node: answers probes, measures neighbors, issues
signed measurement bundles, and flags location shifts.

A node runs three logical tasks: the ping responder, the periodic neighbor
sweeper, and the control-channel handler. The signed direct delay in an SM
is measured by the GeoClient itself (it probes the requester after serving
as echo target), so the signature always covers a value the signer
observed; the requester's own measurement is advisory.
"""

from __future__ import annotations

import logging
import random
from collections import deque
from dataclasses import dataclass, field

from . import wire
from .crypto import (
    AttestationReport,
    KexPair,
    KeyPair,
    Nonce,
    PkiRegistry,
    SecureChannel,
    TeeKind,
    VerificationOutcome,
    attest,
    kex_binding_payload,
    sign,
    verify,
    verify_ar,
)
from .links import FrameService
from .model import KM_PER_US_RTT, NodeId
from .probe import (
    AllSamplesLost,
    Endpoint,
    MinDelayRecord,
    Transport,
    measure_min_delay,
)

log = logging.getLogger("dgate.geoclient")

DEFAULT_NEIGHBOR_EXCERPT = 8  # K
DEFAULT_HISTORY_DEPTH = 32  # H
DEFAULT_SWEEP_PERIOD_US = 60_000_000
DEFAULT_SHIFT_THRESHOLD_KM = 10.0
NONCE_REPLAY_WINDOW = 1024


class GeoClientError(Exception):
    pass


class NotAttested(GeoClientError):
    pass


class StaleNonce(GeoClientError):
    pass


class InsufficientHistory(GeoClientError):
    pass


@dataclass
class NeighborEntry:
    """Latest measurement to one neighbor plus a bounded history."""

    peer: NodeId
    record: MinDelayRecord
    history: list[MinDelayRecord] = field(default_factory=list)

    def floor_min_us(self) -> int:
        """Lowest RTT ever observed (monotone floor discovery)."""
        return min(r.min_rtt_us for r in self.history)


@dataclass(frozen=True)
class ShiftAlert:
    """Evidence that a reference node's delay floor moved."""

    subject: NodeId
    evidence: tuple[tuple[NodeId, int, int], ...]  # (neighbor, historical, new)
    severity_km: float

    def to_dict(self) -> dict:
        return {
            "subject": self.subject.hex,
            "evidence": [
                {"neighbor": n.hex, "historical_us": h, "new_us": w} for n, h, w in self.evidence
            ],
            "severity_km": self.severity_km,
        }


def detect_shift(entry: NeighborEntry, threshold_km: float) -> ShiftAlert | None:
    """Compare the newest minimum against the floor of all earlier records.

    Fires on deviation in either direction: an increase suggests the peer
    moved away; a decrease is physically impossible without relocation or a
    new faster path, and both warrant review.
    """
    if len(entry.history) < 2:
        raise InsufficientHistory(f"need >= 2 records for {entry.peer}")
    new_min = entry.history[-1].min_rtt_us
    historical_floor = min(r.min_rtt_us for r in entry.history[:-1])
    deviation_km = KM_PER_US_RTT * abs(new_min - historical_floor)
    if deviation_km <= threshold_km:
        return None
    return ShiftAlert(
        subject=entry.peer,
        evidence=((entry.peer, historical_floor, new_min),),
        severity_km=deviation_km,
    )


@dataclass(frozen=True)
class SignedMeasurements:
    """One GeoClient's signed bundle for a measurement request."""

    issuer: NodeId
    direct: MinDelayRecord
    neighbors: tuple[MinDelayRecord, ...]
    system_time_us: int
    nonce: Nonce
    signature: bytes

    def to_wire(self) -> dict:
        return {
            "type": "SM",
            "issuer": self.issuer.hex,
            "direct": self.direct.to_dict(),
            "neighbors": [r.to_dict() for r in self.neighbors],
            "system_time_us": self.system_time_us,
            "nonce": self.nonce.hex,
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_wire(cls, msg: dict) -> "SignedMeasurements":
        return cls(
            issuer=NodeId.from_hex(msg["issuer"]),
            direct=MinDelayRecord.from_dict(msg["direct"]),
            neighbors=tuple(MinDelayRecord.from_dict(d) for d in msg["neighbors"]),
            system_time_us=int(msg["system_time_us"]),
            nonce=Nonce(bytes.fromhex(msg["nonce"])),
            signature=bytes.fromhex(msg["signature"]),
        )

    def verify_signature(self, public_key: bytes) -> bool:
        return verify(wire.signing_bytes(self.to_wire()), self.signature, public_key)


@dataclass
class GeoClientConfig:
    neighbor_excerpt: int = DEFAULT_NEIGHBOR_EXCERPT
    history_depth: int = DEFAULT_HISTORY_DEPTH
    shift_threshold_km: float = DEFAULT_SHIFT_THRESHOLD_KM
    sweep_repetitions: int = 64
    probe_timeout_us: int = 250_000
    require_mutual_attestation: bool = False


class GeoClientNode:
    """State and behaviour of one reference node."""

    def __init__(
        self,
        node_id: NodeId,
        keypair: KeyPair,
        platform: KeyPair,
        code_identity: bytes,
        registry: PkiRegistry,
        tee_kind: TeeKind = TeeKind.NONE,
        config: GeoClientConfig | None = None,
        rng: random.Random | None = None,
    ):
        self.node_id = node_id
        self.keypair = keypair
        self.platform = platform
        self.code_identity = code_identity
        self.registry = registry
        self.tee_kind = tee_kind
        self.config = config or GeoClientConfig()
        self.rng = rng or random.Random()
        self.neighbor_table: dict[NodeId, NeighborEntry] = {}
        self.alerts: list[ShiftAlert] = []
        self._seen_nonces: dict[str, deque] = {}
        self.tamper_sm = False  # test/adversary hook: corrupt outgoing SMs

    # -- neighbor sweeping ---------------------------------------------------

    def periodic_neighbor_sweep(
        self,
        peers: list[tuple[NodeId, Endpoint]],
        transport: Transport,
        repetitions: int | None = None,
    ) -> tuple[list[NodeId], list[ShiftAlert]]:
        """Measure every peer once; update table and history; detect shifts.

        Unreachable peers are recorded as gaps and do not abort the sweep.
        """
        reps = repetitions or self.config.sweep_repetitions
        updated: list[NodeId] = []
        new_alerts: list[ShiftAlert] = []
        for peer_id, endpoint in peers:
            sid = self.rng.getrandbits(128).to_bytes(16, "big")
            try:
                record = measure_min_delay(
                    transport,
                    endpoint,
                    peer_id,
                    repetitions=reps,
                    timeout_us=self.config.probe_timeout_us,
                    session_id=sid,
                )
            except AllSamplesLost:
                log.warning("sweep gap: no echoes from %s at %s", peer_id, endpoint)
                continue
            entry = self.neighbor_table.get(peer_id)
            if entry is None:
                entry = NeighborEntry(peer=peer_id, record=record, history=[record])
                self.neighbor_table[peer_id] = entry
            else:
                entry.record = record
                entry.history.append(record)
                del entry.history[: -self.config.history_depth]
            updated.append(peer_id)
            if len(entry.history) >= 2:
                alert = detect_shift(entry, self.config.shift_threshold_km)
                if alert is not None:
                    new_alerts.append(alert)
        self.alerts.extend(new_alerts)
        return updated, new_alerts

    def neighbor_excerpt(self) -> list[MinDelayRecord]:
        """The K current records with the smallest minimum delays, ascending."""
        records = [e.record for e in self.neighbor_table.values()]
        records.sort(key=lambda r: (r.min_rtt_us, r.peer.hex))
        return records[: self.config.neighbor_excerpt]

    # -- measurement requests --------------------------------------------------

    def _check_nonce_fresh(self, requester: str, nonce: Nonce) -> None:
        seen = self._seen_nonces.setdefault(requester, deque(maxlen=NONCE_REPLAY_WINDOW))
        if nonce.value in seen:
            raise StaleNonce(f"nonce replayed by {requester}")
        seen.append(nonce.value)

    def handle_measurement_request(
        self,
        mr: dict,
        prober: Transport,
        attested: bool = True,
    ) -> SignedMeasurements:
        """Serve an MR: probe the requester ourselves and sign the bundle.

        The requester must have completed native attestation over this
        connection; its own probe of us runs against the standing ping
        responder and needs no action here.
        """
        if not attested:
            raise NotAttested("measurement request before attestation")
        nonce = Nonce(bytes.fromhex(mr["nonce"]))
        requester_hex = mr["requester"]
        self._check_nonce_fresh(requester_hex, nonce)
        repetitions = int(mr["repetitions"])
        target: Endpoint = (mr["probe_host"], int(mr["probe_port"]))
        sid = self.rng.getrandbits(128).to_bytes(16, "big")
        direct = measure_min_delay(
            prober,
            target,
            NodeId.from_hex(requester_hex),
            repetitions=repetitions,
            timeout_us=self.config.probe_timeout_us,
            session_id=sid,
        )
        return self.build_sm(direct, nonce, prober.wall_us())

    def build_sm(self, direct: MinDelayRecord, nonce: Nonce, system_time_us: int) -> SignedMeasurements:
        excerpt = tuple(self.neighbor_excerpt())
        unsigned = {
            "type": "SM",
            "issuer": self.node_id.hex,
            "direct": direct.to_dict(),
            "neighbors": [r.to_dict() for r in excerpt],
            "system_time_us": system_time_us,
            "nonce": nonce.hex,
        }
        signature = sign(wire.canonical_body(unsigned), self.keypair)
        if self.tamper_sm:
            signature = bytes([signature[0] ^ 0x01]) + signature[1:]
        return SignedMeasurements(
            issuer=self.node_id,
            direct=direct,
            neighbors=excerpt,
            system_time_us=system_time_us,
            nonce=nonce,
            signature=signature,
        )


class GeoClientService(FrameService):
    """Control-channel endpoint: native attestation then encrypted MR -> SM."""

    def __init__(self, node: GeoClientNode, prober_factory):
        """`prober_factory() -> (transport, owned)`: a transport for outbound
        probing; when `owned` is true the service closes it after use."""
        self.node = node
        self._prober_factory = prober_factory
        self._sessions: dict = {}
        self._seen_ac_nonces: deque = deque(maxlen=NONCE_REPLAY_WINDOW)

    def handle(self, conn_key, frame: bytes) -> list[bytes]:
        session = self._sessions.setdefault(conn_key, {"phase": "await-ac"})
        try:
            if session["phase"] == "await-ac":
                return self._handle_ac(session, frame)
            return self._handle_secure(session, frame)
        except GeoClientError as exc:
            code = type(exc).__name__
            log.warning("session %s failed: %s: %s", conn_key, code, exc)
            reply = wire.canonical_body({"type": "Error", "code": code, "detail": str(exc)})
            session["phase"] = "aborted"
            return [reply]

    def _handle_ac(self, session: dict, frame: bytes) -> list[bytes]:
        try:
            msg = wire.decode_body(frame)
        except wire.CodecError as exc:
            raise GeoClientError(f"undecodable frame: {exc}") from exc
        if msg.get("type") != "AC":
            raise NotAttested("expected attestation command first")
        nonce = Nonce(bytes.fromhex(msg["nonce"]))
        if nonce.value in self._seen_ac_nonces:
            raise StaleNonce("attestation command nonce replayed")
        self._seen_ac_nonces.append(nonce.value)
        verifier_kex = bytes.fromhex(msg["kex_pub"])
        if self.node.config.require_mutual_attestation:
            peer_report = msg.get("requester_report")
            if peer_report is None:
                raise NotAttested("mutual attestation required but no report presented")
            expected = Nonce.derive(nonce.value, b"mutual")
            outcome, _ = verify_ar(
                AttestationReport.from_dict(peer_report), expected, self.node.registry
            )
            if not outcome.accepted:
                raise NotAttested(f"requester attestation rejected: {outcome.value}")
        report = attest(
            self.node.code_identity,
            nonce,
            self.node.keypair.public,
            self.node.platform,
            self.node.tee_kind,
        )
        kex = KexPair.generate() if self.node.rng is None else KexPair.from_seed(
            self.node.rng.getrandbits(256).to_bytes(32, "big")
        )
        binding = sign(
            kex_binding_payload(nonce, verifier_kex, kex.public), self.node.keypair
        )
        key = kex.derive_session_key(verifier_kex, nonce.value)
        session["channel"] = SecureChannel(key, initiator=False)
        session["phase"] = "secure"
        reply = {
            "type": "AR",
            "report": report.to_dict(),
            "kex_pub": kex.public.hex(),
            "binding_sig": binding.hex(),
        }
        return [wire.canonical_body(reply)]

    def _handle_secure(self, session: dict, frame: bytes) -> list[bytes]:
        if session["phase"] != "secure":
            raise NotAttested("session is not established")
        channel: SecureChannel = session["channel"]
        try:
            body = channel.open(frame)
            msg = wire.decode_body(body)
        except Exception as exc:
            raise GeoClientError(f"bad sealed frame: {exc}") from exc
        if msg.get("type") != "MR":
            raise GeoClientError(f"unexpected message type {msg.get('type')!r}")
        prober, owned = self._prober_factory()
        try:
            sm = self.node.handle_measurement_request(msg, prober, attested=True)
        finally:
            if owned:
                prober.close()
        return [channel.seal(wire.canonical_body(sm.to_wire()))]
