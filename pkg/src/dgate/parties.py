"""Protocol state machines for the Data Provider and the Data Processor.

Phases, driven end to end over framed links (simulated or TCP):

  A  initialization: keys, registry, directory.
  B  native attestation: provider sends an attestation command, processor
     answers with a platform-signed report bound to the key exchange; any
     verification failure aborts the session immediately.
  C  data sending: processor presents its subscription credential, provider
     answers with usage constraints followed by the payload, both over the
     established encrypted channel. Constraints always precede data.
  D  geolocation attestation: processor asks for a client list (chosen by
     the provider, never by the processor), attests and probes each listed
     GeoClient, collects signed measurements, and assembles a signed
     geolocation report. Per-reference nonces are derived from the round
     nonce so the provider can audit them later.
  E  release: outputs leave the processor only when the gate passes the
     freshness, trusted-time, and geofence checks. Everything except
     ProvenInside is a denial.

All traffic after phase B technically crosses the untrusted host; in the
simulator that path is the adversary-capable network itself.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import random
from dataclasses import dataclass, field

from . import wire
from .crypto import (
    AttestationReport,
    CryptoError,
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
from .geoclient import SignedMeasurements
from .geosolve import (
    DEFAULT_RESOLUTION_KM,
    DEFAULT_TIME_SPREAD_US,
    EmptyRegion,
    GeosolveError,
    OverheadBudget,
    RegionOutcome,
    RegionVerdict,
    ZERO_BUDGET,
    build_region,
    check_geofence,
    trusted_time,
)
from .links import FrameLink, FrameService
from .model import Geofence, GeoPoint, NodeId, TimeWindow, UsageConstraints
from .probe import Endpoint, MinDelayRecord, Transport, measure_min_delay

log = logging.getLogger("dgate.parties")

DEFAULT_MAX_REPORT_AGE_US = 120_000_000


class PartyError(Exception):
    pass


class ProtocolViolation(PartyError):
    """Out-of-order or malformed message; the session is aborted."""


class SessionAborted(PartyError):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}")
        self.code = code


class BadCredential(PartyError):
    pass


class InsufficientGeoClients(PartyError):
    pass


class BadSignatureChain(PartyError):
    pass


class RoundFailed(PartyError):
    pass


# -- shared wire helpers ----------------------------------------------------


def constraints_to_wire(c: UsageConstraints) -> dict:
    return {
        "type": "Constraints",
        "geofence": [[p.lat, p.lon] for p in c.geofence.vertices],
        "not_before_us": c.time_window.not_before,
        "not_after_us": c.time_window.not_after,
        "min_geoclients": c.min_geoclients,
        "repetitions": c.repetitions,
        "max_report_age_us": c.max_report_age_us,
    }


def constraints_from_wire(msg: dict) -> UsageConstraints:
    return UsageConstraints(
        geofence=Geofence.from_pairs(msg["geofence"]),
        time_window=TimeWindow(int(msg["not_before_us"]), int(msg["not_after_us"])),
        min_geoclients=int(msg["min_geoclients"]),
        repetitions=int(msg["repetitions"]),
        max_report_age_us=int(msg["max_report_age_us"]),
    )


@dataclass(frozen=True)
class ClientList:
    """Provider-chosen references for one attestation round."""

    entries: tuple[tuple[NodeId, Endpoint], ...]
    round_nonce: Nonce
    signature: bytes

    def to_wire(self) -> dict:
        return {
            "type": "CL",
            "geoclients": [
                {"node_id": n.hex, "host": ep[0], "port": ep[1]} for n, ep in self.entries
            ],
            "round_nonce": self.round_nonce.hex,
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_wire(cls, msg: dict) -> "ClientList":
        return cls(
            entries=tuple(
                (NodeId.from_hex(e["node_id"]), (e["host"], int(e["port"])))
                for e in msg["geoclients"]
            ),
            round_nonce=Nonce(bytes.fromhex(msg["round_nonce"])),
            signature=bytes.fromhex(msg["signature"]),
        )

    def verify_signature(self, provider_key: bytes) -> bool:
        return verify(wire.signing_bytes(self.to_wire()), self.signature, provider_key)

    def node_ids(self) -> set[NodeId]:
        return {n for n, _ in self.entries}


def build_client_list(entries, round_nonce: Nonce, key: KeyPair) -> ClientList:
    unsigned = {
        "type": "CL",
        "geoclients": [
            {"node_id": n.hex, "host": ep[0], "port": ep[1]} for n, ep in entries
        ],
        "round_nonce": round_nonce.hex,
    }
    return ClientList(tuple(entries), round_nonce, sign(wire.canonical_body(unsigned), key))


@dataclass(frozen=True)
class GeolocationReport:
    """The processor's signed aggregate of one round's measurements."""

    sms: tuple[SignedMeasurements, ...]
    assembled_at_us: int
    processor_id: NodeId
    round_nonce: Nonce
    signature: bytes

    def to_wire(self) -> dict:
        return {
            "type": "GR",
            "sms": [sm.to_wire() for sm in self.sms],
            "assembled_at_us": self.assembled_at_us,
            "processor_id": self.processor_id.hex,
            "round_nonce": self.round_nonce.hex,
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_wire(cls, msg: dict) -> "GeolocationReport":
        return cls(
            sms=tuple(SignedMeasurements.from_wire(s) for s in msg["sms"]),
            assembled_at_us=int(msg["assembled_at_us"]),
            processor_id=NodeId.from_hex(msg["processor_id"]),
            round_nonce=Nonce(bytes.fromhex(msg["round_nonce"])),
            signature=bytes.fromhex(msg["signature"]),
        )

    def verify_signature(self, public_key: bytes) -> bool:
        return verify(wire.signing_bytes(self.to_wire()), self.signature, public_key)


def assemble_gr(
    sms, assembled_at_us: int, processor_id: NodeId, round_nonce: Nonce, key: KeyPair
) -> GeolocationReport:
    unsigned = {
        "type": "GR",
        "sms": [sm.to_wire() for sm in sms],
        "assembled_at_us": assembled_at_us,
        "processor_id": processor_id.hex,
        "round_nonce": round_nonce.hex,
    }
    return GeolocationReport(
        tuple(sms), assembled_at_us, processor_id, round_nonce,
        sign(wire.canonical_body(unsigned), key),
    )


def issue_credential(provider_key: KeyPair, consumer_id: str, processor_key: bytes) -> dict:
    unsigned = {
        "consumer_id": consumer_id,
        "processor_key": processor_key.hex(),
    }
    return {**unsigned, "signature": sign(wire.canonical_body(unsigned), provider_key).hex()}


def credential_valid(credential: dict, provider_public: bytes, processor_key: bytes) -> bool:
    if not isinstance(credential, dict) or "signature" in credential is None:
        return False
    try:
        unsigned = {k: v for k, v in credential.items() if k != "signature"}
        if credential.get("processor_key") != processor_key.hex():
            return False
        return verify(
            wire.canonical_body(unsigned),
            bytes.fromhex(credential["signature"]),
            provider_public,
        )
    except (KeyError, ValueError):
        return False


# -- release gate -----------------------------------------------------------


class DenyReason(enum.Enum):
    STALE_REPORT = "StaleReport"
    OUTSIDE_TIME_WINDOW = "OutsideTimeWindow"
    REGION_NOT_PROVEN = "RegionNotProven"
    NO_REPORT = "NoReport"


@dataclass(frozen=True)
class GateDecision:
    allowed: bool
    reason: DenyReason | None = None
    trusted_time_us: int | None = None
    region_verdict: RegionVerdict | None = None

    def verdict_str(self) -> str:
        return "Allow" if self.allowed else f"Deny({self.reason.value})"


def release_gate(
    gr: GeolocationReport | None,
    constraints: UsageConstraints,
    registry: PkiRegistry,
    now_us: int,
    budget: OverheadBudget = ZERO_BUDGET,
    resolution_km: float = DEFAULT_RESOLUTION_KM,
    time_spread_us: int = DEFAULT_TIME_SPREAD_US,
) -> GateDecision:
    """Allow only on a fresh report, an in-window trusted time, and a region
    proven inside the fence. Every other outcome is a denial."""
    if gr is None or not gr.sms:
        return GateDecision(False, DenyReason.NO_REPORT)
    if now_us - gr.assembled_at_us > constraints.max_report_age_us:
        return GateDecision(False, DenyReason.STALE_REPORT)
    try:
        t_us = trusted_time(gr.sms, time_spread_us)
    except GeosolveError:
        return GateDecision(False, DenyReason.OUTSIDE_TIME_WINDOW)
    if not constraints.time_window.contains(t_us):
        return GateDecision(False, DenyReason.OUTSIDE_TIME_WINDOW, t_us)
    try:
        region = build_region(gr.sms, registry, budget)
        verdict = check_geofence(region, constraints.geofence, resolution_km)
    except GeosolveError:
        return GateDecision(False, DenyReason.REGION_NOT_PROVEN, t_us)
    if verdict.outcome is not RegionOutcome.PROVEN_INSIDE:
        return GateDecision(False, DenyReason.REGION_NOT_PROVEN, t_us, verdict)
    return GateDecision(True, None, t_us, verdict)


# -- provider ---------------------------------------------------------------


class ProviderPhase(enum.Enum):
    IDLE = "idle"
    AWAIT_AR = "await-ar"
    ATTESTED = "attested"
    DATA_SENT = "data-sent"
    ABORTED = "aborted"


@dataclass
class ProviderSession:
    phase: ProviderPhase = ProviderPhase.IDLE
    nonce: Nonce | None = None
    kex: KexPair | None = None
    channel: SecureChannel | None = None
    pinned_platform: bytes | None = None
    pinned_binding: bytes | None = None
    rounds: dict[str, ClientList] = field(default_factory=dict)
    last_area_km2: float | None = None


class ProviderNode:
    """Verifier party: owns the data, the constraints, and client selection."""

    def __init__(
        self,
        keypair: KeyPair,
        registry: PkiRegistry,
        constraints: UsageConstraints,
        payload: bytes,
        rng: random.Random | None = None,
        resolution_km: float = DEFAULT_RESOLUTION_KM,
    ):
        self.keypair = keypair
        self.registry = registry
        self.constraints = constraints
        self.payload = payload
        self.rng = rng or random.Random()
        self.resolution_km = resolution_km
        self.issued_nonces: set[bytes] = set()
        self.audit: list[dict] = []

    def new_session_nonce(self) -> Nonce:
        nonce = Nonce.generate(self.rng)
        self.issued_nonces.add(nonce.value)
        return nonce

    def select_client_list(self, round_nonce: Nonce) -> ClientList:
        """Uniform subset of the located directory, seeded from the provider
        secret and the round nonce: unpredictable to the processor, yet
        reproducible for audit."""
        located = sorted(self.registry.located_geoclients(), key=lambda e: e.node_id.hex)
        g = self.constraints.min_geoclients
        if len(located) < g:
            raise InsufficientGeoClients(f"directory has {len(located)}, need {g}")
        seed = hashlib.sha256(
            self.keypair.secret_fingerprint() + round_nonce.value
        ).digest()
        chooser = random.Random(seed)
        picked = chooser.sample(located, g)
        return build_client_list(
            [(e.node_id, e.endpoint) for e in picked], round_nonce, self.keypair
        )

    def refine_client_list(self, round_nonce: Nonce, center: GeoPoint) -> ClientList:
        """Next-round references: the G directory nodes nearest to `center`."""
        from .model import haversine_km

        located = sorted(self.registry.located_geoclients(), key=lambda e: e.node_id.hex)
        g = self.constraints.min_geoclients
        if len(located) < g:
            raise InsufficientGeoClients(f"directory has {len(located)}, need {g}")
        nearest = sorted(located, key=lambda e: (haversine_km(e.location, center), e.node_id.hex))
        return build_client_list(
            [(e.node_id, e.endpoint) for e in nearest[:g]], round_nonce, self.keypair
        )

    def review_gr(self, session: ProviderSession, gr: GeolocationReport) -> tuple[RegionVerdict, ClientList]:
        """Independent recomputation of the round's evidence.

        Verifies the signature chain (GR under the session-pinned attested
        key, every SM under its registered key, issuers within the round's
        client list, nonces derived from the round nonce) and recomputes the
        region and geofence verdict. Returns the verdict and a refined
        client list for the next round.
        """
        if session.pinned_binding is None:
            raise BadSignatureChain("no attested session key to validate against")
        if not gr.verify_signature(session.pinned_binding):
            raise BadSignatureChain("report signature does not match the attested key")
        cl = session.rounds.get(gr.round_nonce.hex)
        if cl is None:
            raise BadSignatureChain("report references an unknown round")
        listed = cl.node_ids()
        if len(gr.sms) < self.constraints.min_geoclients:
            raise BadSignatureChain("report carries fewer measurements than required")
        for sm in gr.sms:
            if sm.issuer not in listed:
                raise BadSignatureChain(f"issuer {sm.issuer} outside the round's client list")
            entry = self.registry.geoclient_directory.get(sm.issuer)
            if entry is None or not sm.verify_signature(entry.public_key):
                raise BadSignatureChain(f"bad measurement signature from {sm.issuer}")
            expected = Nonce.derive(gr.round_nonce.value, sm.issuer.value)
            if sm.nonce.value != expected.value:
                raise BadSignatureChain(f"nonce from {sm.issuer} not bound to this round")
        region = build_region(gr.sms, self.registry)
        verdict = check_geofence(region, self.constraints.geofence, self.resolution_km)
        session.last_area_km2 = verdict.area_km2
        # Refinement target: the centroid of the surviving region.
        lats = [c.lat for c, _ in region.disks]
        lons = [c.lon for c, _ in region.disks]
        if verdict.samples_total:
            from .geosolve import sample_region

            grid = sample_region(region, self.resolution_km)
            pts = grid.points_inside()
            if pts:
                lats = [p.lat for p in pts]
                lons = [p.lon for p in pts]
        center = GeoPoint(sum(lats) / len(lats), sum(lons) / len(lons))
        refined = self.refine_client_list(self.new_session_nonce(), center)
        self.audit.append(
            {
                "round_nonce": gr.round_nonce.hex,
                "verdict": verdict.outcome.value,
                "area_km2": verdict.area_km2,
                "sms": len(gr.sms),
            }
        )
        return verdict, refined


class ProviderService(FrameService):
    """Framed control endpoint for a provider."""

    def __init__(self, provider: ProviderNode):
        self.provider = provider
        self.sessions: dict = {}

    def session_for(self, conn_key) -> ProviderSession:
        return self.sessions.setdefault(conn_key, ProviderSession())

    def _abort(self, session: ProviderSession, code: str, detail: str = "") -> list[bytes]:
        session.phase = ProviderPhase.ABORTED
        log.warning("provider session aborted: %s %s", code, detail)
        return [wire.canonical_body({"type": "Error", "code": code, "detail": detail})]

    def handle(self, conn_key, frame: bytes) -> list[bytes]:
        session = self.session_for(conn_key)
        if session.phase is ProviderPhase.ABORTED:
            return self._abort(session, "SessionAborted", "session already aborted")
        if session.phase in (ProviderPhase.IDLE, ProviderPhase.AWAIT_AR):
            try:
                msg = wire.decode_body(frame)
            except wire.CodecError as exc:
                return self._abort(session, "ProtocolViolation", str(exc))
            if session.phase is ProviderPhase.IDLE:
                return self._handle_hello(session, msg)
            return self._handle_ar(session, msg)
        # established channel: everything is sealed
        try:
            body = session.channel.open(frame)
            msg = wire.decode_body(body)
        except (CryptoError, wire.CodecError) as exc:
            return self._abort(session, "ProtocolViolation", f"bad sealed frame: {exc}")
        if msg["type"] == "DR":
            return self._handle_dr(session, msg)
        if msg["type"] == "GR":
            return self._handle_gr(session, msg)
        return self._abort(session, "ProtocolViolation", f"unexpected {msg['type']} in phase {session.phase.value}")

    def _handle_hello(self, session: ProviderSession, msg: dict) -> list[bytes]:
        if msg.get("type") != "DR" or msg.get("purpose") != "hello":
            return self._abort(session, "ProtocolViolation", "expected hello request")
        session.nonce = self.provider.new_session_nonce()
        session.kex = KexPair.from_seed(
            self.provider.rng.getrandbits(256).to_bytes(32, "big")
        )
        session.phase = ProviderPhase.AWAIT_AR
        ac = {
            "type": "AC",
            "nonce": session.nonce.hex,
            "kex_pub": session.kex.public.hex(),
        }
        return [wire.canonical_body(ac)]

    def _handle_ar(self, session: ProviderSession, msg: dict) -> list[bytes]:
        if msg.get("type") != "AR":
            return self._abort(session, "ProtocolViolation", "expected attestation report")
        try:
            report = AttestationReport.from_dict(msg["report"])
            peer_kex = bytes.fromhex(msg["kex_pub"])
            binding_sig = bytes.fromhex(msg["binding_sig"])
        except (KeyError, ValueError) as exc:
            return self._abort(session, "ProtocolViolation", f"malformed report: {exc}")
        outcome, platform_key = verify_ar(report, session.nonce, self.provider.registry)
        if not outcome.accepted:
            return self._abort(session, outcome_code(outcome))
        payload = kex_binding_payload(session.nonce, session.kex.public, peer_kex)
        if not verify(payload, binding_sig, report.key_binding):
            return self._abort(session, "BadSignature", "key exchange binding")
        key = session.kex.derive_session_key(peer_kex, session.nonce.value)
        session.channel = SecureChannel(key, initiator=True)
        session.pinned_platform = platform_key
        session.pinned_binding = report.key_binding
        session.phase = ProviderPhase.ATTESTED
        return []

    def _handle_dr(self, session: ProviderSession, msg: dict) -> list[bytes]:
        purpose = msg.get("purpose")
        if purpose == "data":
            if session.phase is not ProviderPhase.ATTESTED:
                return self._abort(session, "ProtocolViolation", "data request out of order")
            credential = msg.get("credential")
            if not credential_valid(
                credential, self.provider.keypair.public, session.pinned_binding
            ):
                return self._abort(session, "BadCredential", "subscription check failed")
            session.phase = ProviderPhase.DATA_SENT
            constraints = constraints_to_wire(self.provider.constraints)
            data = {"type": "Data", "payload_hex": self.provider.payload.hex()}
            return [
                session.channel.seal(wire.canonical_body(constraints)),
                session.channel.seal(wire.canonical_body(data)),
            ]
        if purpose == "client_list":
            if session.phase is not ProviderPhase.DATA_SENT:
                return self._abort(session, "ProtocolViolation", "client list request out of order")
            round_nonce = self.provider.new_session_nonce()
            try:
                cl = self.provider.select_client_list(round_nonce)
            except InsufficientGeoClients as exc:
                return self._abort(session, "InsufficientGeoClients", str(exc))
            session.rounds[round_nonce.hex] = cl
            return [session.channel.seal(wire.canonical_body(cl.to_wire()))]
        return self._abort(session, "ProtocolViolation", f"unknown purpose {purpose!r}")

    def _handle_gr(self, session: ProviderSession, msg: dict) -> list[bytes]:
        if session.phase is not ProviderPhase.DATA_SENT:
            return self._abort(session, "ProtocolViolation", "report before data phase")
        try:
            gr = GeolocationReport.from_wire(msg)
            verdict, refined = self.provider.review_gr(session, gr)
        except (BadSignatureChain, KeyError, ValueError, EmptyRegion) as exc:
            return self._abort(session, "BadSignatureChain", str(exc))
        session.rounds[refined.round_nonce.hex] = refined
        return [session.channel.seal(wire.canonical_body(refined.to_wire()))]


def outcome_code(outcome: VerificationOutcome) -> str:
    return {
        VerificationOutcome.BAD_SIGNATURE: "BadSignature",
        VerificationOutcome.UNTRUSTED_PLATFORM: "UntrustedPlatform",
        VerificationOutcome.CODE_MISMATCH: "CodeMismatch",
        VerificationOutcome.NONCE_MISMATCH: "NonceMismatch",
        VerificationOutcome.ACCEPTED: "Accepted",
    }[outcome]


# -- processor ---------------------------------------------------------------


@dataclass
class RoundResult:
    client_list: ClientList
    gr: GeolocationReport | None
    dropped: list[str]
    advisory: dict[str, MinDelayRecord]


class ProcessorNode:
    """Prover-side service: processes data, gates every release."""

    def __init__(
        self,
        node_id: NodeId,
        keypair: KeyPair,
        platform: KeyPair,
        code_identity: bytes,
        registry: PkiRegistry,
        provider_public: bytes,
        clock,
        tee_kind: TeeKind = TeeKind.NONE,
        rng: random.Random | None = None,
        time_spread_us: int = DEFAULT_TIME_SPREAD_US,
        resolution_km: float = DEFAULT_RESOLUTION_KM,
    ):
        self.node_id = node_id
        self.keypair = keypair
        self.platform = platform
        self.code_identity = code_identity
        self.registry = registry
        self.provider_public = provider_public
        self.clock = clock  # callable -> wall us
        self.tee_kind = tee_kind
        self.rng = rng or random.Random()
        self.time_spread_us = time_spread_us
        self.resolution_km = resolution_km
        self.attested = False
        self.constraints: UsageConstraints | None = None
        self.payload: bytes | None = None
        self.pending_outputs: list[bytes] = []
        self.release_sink: list[bytes] = []
        self.last_gr: tuple[GeolocationReport, int] | None = None  # (gr, obtained_at)
        self.next_client_list: ClientList | None = None
        self.rounds: list[RoundResult] = []
        self.replay_ar_msg: dict | None = None  # adversary hook: replay this AR

    # -- phase B ---------------------------------------------------------

    def handshake(self, link: FrameLink, timeout_us: int = 30_000_000) -> SecureChannel:
        """Run the prover side of native attestation; returns the channel."""
        link.send_frame(wire.canonical_body({"type": "DR", "purpose": "hello"}))
        msg = self._recv_plain(link, timeout_us)
        if msg.get("type") != "AC":
            raise ProtocolViolation(f"expected AC, got {msg.get('type')!r}")
        nonce = Nonce(bytes.fromhex(msg["nonce"]))
        verifier_kex = bytes.fromhex(msg["kex_pub"])
        if self.replay_ar_msg is not None:
            link.send_frame(wire.canonical_body(self.replay_ar_msg))
            # a replayed report carries a stale nonce; the provider aborts
            reply = self._recv_plain(link, timeout_us)
            raise SessionAborted(reply.get("code", "Aborted"), reply.get("detail", ""))
        kex = KexPair.from_seed(self.rng.getrandbits(256).to_bytes(32, "big"))
        report = attest(self.code_identity, nonce, self.keypair.public, self.platform, self.tee_kind)
        binding = sign(kex_binding_payload(nonce, verifier_kex, kex.public), self.keypair)
        ar_msg = {
            "type": "AR",
            "report": report.to_dict(),
            "kex_pub": kex.public.hex(),
            "binding_sig": binding.hex(),
        }
        link.send_frame(wire.canonical_body(ar_msg))
        self.last_ar_msg = ar_msg
        key = kex.derive_session_key(verifier_kex, nonce.value)
        self.attested = True
        return SecureChannel(key, initiator=False)

    def _recv_plain(self, link: FrameLink, timeout_us: int) -> dict:
        frame = link.recv_frame(timeout_us)
        if frame is None:
            raise ProtocolViolation("timed out waiting for the provider")
        msg = wire.decode_body(frame)
        if msg.get("type") == "Error":
            raise SessionAborted(msg.get("code", "Error"), msg.get("detail", ""))
        return msg

    def _recv_sealed(self, link: FrameLink, channel: SecureChannel, timeout_us: int = 30_000_000) -> dict:
        frame = link.recv_frame(timeout_us)
        if frame is None:
            raise ProtocolViolation("timed out waiting for a sealed frame")
        try:
            msg = wire.decode_body(channel.open(frame))
        except CryptoError:
            # plaintext Error frames are how aborts surface mid-channel
            msg = wire.decode_body(frame)
        if msg.get("type") == "Error":
            raise SessionAborted(msg.get("code", "Error"), msg.get("detail", ""))
        return msg

    # -- phase C ---------------------------------------------------------

    def request_data(self, link: FrameLink, channel: SecureChannel, credential: dict) -> None:
        dr = {"type": "DR", "purpose": "data", "credential": credential}
        link.send_frame(channel.seal(wire.canonical_body(dr)))
        first = self._recv_sealed(link, channel)
        if first.get("type") == "Data":
            raise ProtocolViolation("data arrived before constraints")
        if first.get("type") != "Constraints":
            raise ProtocolViolation(f"expected constraints, got {first.get('type')!r}")
        self.constraints = constraints_from_wire(first)
        second = self._recv_sealed(link, channel)
        if second.get("type") != "Data":
            raise ProtocolViolation(f"expected data, got {second.get('type')!r}")
        self.payload = bytes.fromhex(second["payload_hex"])
        self.process_payload()

    def process_payload(self) -> None:
        """Stand-in computation: queue a digest of the payload for release."""
        if self.payload is None:
            return
        digest = hashlib.sha256(self.payload).hexdigest().encode("ascii")
        self.pending_outputs.append(b"result:" + digest)

    # -- phase D ---------------------------------------------------------

    def request_client_list(self, link: FrameLink, channel: SecureChannel) -> ClientList:
        dr = {"type": "DR", "purpose": "client_list"}
        link.send_frame(channel.seal(wire.canonical_body(dr)))
        msg = self._recv_sealed(link, channel)
        if msg.get("type") != "CL":
            raise ProtocolViolation(f"expected client list, got {msg.get('type')!r}")
        cl = ClientList.from_wire(msg)
        if not cl.verify_signature(self.provider_public):
            raise ProtocolViolation("client list signature invalid")
        if self.constraints and len(cl.entries) != self.constraints.min_geoclients:
            raise ProtocolViolation("client list size does not match constraints")
        return cl

    def attest_geoclient(
        self, link: FrameLink, entry_key: bytes, timeout_us: int = 30_000_000
    ) -> SecureChannel:
        """Verifier side of a GeoClient's native attestation (phase B, role
        reversed). `entry_key` is the directory key the report must bind."""
        nonce = Nonce.generate(self.rng)
        kex = KexPair.from_seed(self.rng.getrandbits(256).to_bytes(32, "big"))
        ac = {"type": "AC", "nonce": nonce.hex, "kex_pub": kex.public.hex()}
        if self.next_mutual_report is not None:
            ac["requester_report"] = self.next_mutual_report
        link.send_frame(wire.canonical_body(ac))
        frame = link.recv_frame(timeout_us)
        if frame is None:
            raise SessionAborted("Timeout", "no attestation report")
        msg = wire.decode_body(frame)
        if msg.get("type") == "Error":
            raise SessionAborted(msg.get("code", "Error"), msg.get("detail", ""))
        if msg.get("type") != "AR":
            raise SessionAborted("ProtocolViolation", f"expected AR, got {msg.get('type')!r}")
        report = AttestationReport.from_dict(msg["report"])
        outcome, _ = verify_ar(report, nonce, self.registry)
        if not outcome.accepted:
            raise SessionAborted(outcome_code(outcome), "reference attestation failed")
        if report.key_binding != entry_key:
            raise SessionAborted("BadSignature", "report key does not match the directory")
        peer_kex = bytes.fromhex(msg["kex_pub"])
        if not verify(
            kex_binding_payload(nonce, kex.public, peer_kex),
            bytes.fromhex(msg["binding_sig"]),
            report.key_binding,
        ):
            raise SessionAborted("BadSignature", "key exchange binding")
        return SecureChannel(kex.derive_session_key(peer_kex, nonce.value), initiator=True)

    next_mutual_report: dict | None = None

    def enable_mutual_attestation(self, verifier_nonce: Nonce) -> None:
        """Present our own report alongside the AC (mutual attestation)."""
        expected = Nonce.derive(verifier_nonce.value, b"mutual")
        report = attest(self.code_identity, expected, self.keypair.public, self.platform, self.tee_kind)
        self.next_mutual_report = report.to_dict()

    def run_round(
        self,
        provider_link: FrameLink,
        provider_channel: SecureChannel,
        connect_geoclient,
        prober: Transport,
        probe_endpoint: Endpoint,
        repetitions: int | None = None,
        client_list: ClientList | None = None,
        advisory_repetitions: int | None = None,
        mutual: bool = False,
    ) -> RoundResult:
        """Phase D: gather one geolocation report.

        `connect_geoclient(endpoint) -> FrameLink` attaches to a reference's
        control port. Per-reference failures are collected; the round fails
        only when fewer than min_geoclients valid measurements remain.
        """
        if not self.attested:
            raise ProtocolViolation("geolocation round before attestation")
        if self.constraints is None:
            raise ProtocolViolation("no constraints installed")
        cl = client_list or self.request_client_list(provider_link, provider_channel)
        reps = repetitions or self.constraints.repetitions
        adv_reps = advisory_repetitions or reps
        sms: list[SignedMeasurements] = []
        dropped: list[str] = []
        advisory: dict[str, MinDelayRecord] = {}
        for node_id, endpoint in cl.entries:
            try:
                sm, adv = self._measure_one(
                    node_id, endpoint, cl.round_nonce, reps, adv_reps,
                    connect_geoclient, prober, probe_endpoint, mutual,
                )
                sms.append(sm)
                if adv is not None:
                    advisory[node_id.hex] = adv
            except (PartyError, wire.CodecError, CryptoError, ValueError, KeyError) as exc:
                log.warning("reference %s dropped: %s", node_id, exc)
                dropped.append(node_id.hex)
        gr: GeolocationReport | None = None
        if len(sms) >= self.constraints.min_geoclients:
            gr = assemble_gr(sms, self.clock(), self.node_id, cl.round_nonce, self.keypair)
            self.last_gr = (gr, self.clock())
        result = RoundResult(cl, gr, dropped, advisory)
        self.rounds.append(result)
        if gr is None:
            raise RoundFailed(
                f"only {len(sms)} valid measurements, need {self.constraints.min_geoclients}"
            )
        return result

    def _measure_one(
        self,
        node_id: NodeId,
        endpoint: Endpoint,
        round_nonce: Nonce,
        reps: int,
        adv_reps: int,
        connect_geoclient,
        prober: Transport,
        probe_endpoint: Endpoint,
        mutual: bool,
    ):
        entry = self.registry.geoclient_directory.get(node_id)
        if entry is None:
            raise SessionAborted("UnknownReference", node_id.hex)
        link = connect_geoclient(endpoint)
        try:
            if mutual:
                # mutual nonce is derived from our AC nonce inside attest_geoclient;
                # prepared lazily there via enable_mutual_attestation
                pass
            channel = self.attest_geoclient(link, entry.public_key)
            mr_nonce = Nonce.derive(round_nonce.value, node_id.value)
            advisory = None
            try:
                sid = self.rng.getrandbits(128).to_bytes(16, "big")
                ping_ep = (endpoint[0], entry.endpoint[1] - 1) if False else None
                advisory = measure_min_delay(
                    prober,
                    (endpoint[0], PROBE_PORT_FOR(endpoint)),
                    node_id,
                    repetitions=adv_reps,
                    session_id=sid,
                )
            except Exception:
                advisory = None  # advisory only; the signed value is the peer's
            mr = {
                "type": "MR",
                "nonce": mr_nonce.hex,
                "repetitions": reps,
                "probe_host": probe_endpoint[0],
                "probe_port": probe_endpoint[1],
                "requester": self.node_id.hex,
            }
            link.send_frame(channel.seal(wire.canonical_body(mr)))
            reply = self._recv_sealed(link, channel)
            if reply.get("type") != "SM":
                raise SessionAborted("ProtocolViolation", f"expected SM, got {reply.get('type')!r}")
            sm = SignedMeasurements.from_wire(reply)
            if sm.issuer != node_id:
                raise BadSignatureChain("measurement issuer mismatch")
            if not sm.verify_signature(entry.public_key):
                raise BadSignatureChain("measurement signature invalid")
            if sm.nonce.value != mr_nonce.value:
                raise BadSignatureChain("measurement nonce mismatch")
            return sm, advisory
        finally:
            link.close()

    # -- phase E ---------------------------------------------------------

    def release_gate(self, now_us: int | None = None) -> GateDecision:
        if self.constraints is None:
            raise ProtocolViolation("no constraints installed")
        now = self.clock() if now_us is None else now_us
        gr = self.last_gr[0] if self.last_gr else None
        return release_gate(
            gr,
            self.constraints,
            self.registry,
            now,
            resolution_km=self.resolution_km,
            time_spread_us=self.time_spread_us,
        )

    def release(self, now_us: int | None = None) -> GateDecision:
        """Flush queued outputs through the gate; nothing crosses on a deny."""
        decision = self.release_gate(now_us)
        if decision.allowed:
            self.release_sink.extend(self.pending_outputs)
            self.pending_outputs.clear()
        return decision
