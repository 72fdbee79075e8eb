"""Alice and Bob session loops over a framed classical channel.

Message flow, one session per pulse train::

    Alice                                   Bob
    HELLO            ----------------->
    QUANTUM_OUTCOME  ----------------->     (simulated fiber output)
                     <-----------------     DETECTION_INDICES  (clicked pairs)
    DETECTION_INDICES ---------------->     (non-decoy subset)
    DISCLOSE_REQUEST ----------------->
                     <-----------------     DISCLOSE_BITS
    QBER_REPORT | ABORT -------------->
    SYNDROME(k)      ----------------->
                     <-----------------     VERIFY_TAG(k)        for each block
    TOEPLITZ_SEED    ----------------->
                     <-----------------     FINAL_ACK

Phases only move forward: Init, Quantum, Sift, Disclose, Reconcile,
Amplify, Done (or Aborted).  A message arriving out of order aborts the
session.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .. import detection
from ..errors import CowQkdError, ProtocolError, SessionAbort
from ..optics import KeyRateReport, OpticalBudget
from ..protocol import LogicalSymbol, SymbolFrame, disclose_positions, encode_sequence, \
    sift_indices, single_clicks
from ..privacy import amplify
from ..reconciliation import block_tag, choose_code_rate, decode, estimate_qber, ldpc_generate, \
    syndrome
from .wire import MsgType, WireMessage, pack_bits, pack_ints, pack_payload, unpack_bits, \
    unpack_ints, unpack_payload

PROTOCOL_VERSION = 1
FINAL_TAG_BLOCK = 0xFFFFFFFF
MIN_CROSSOVER = 0.01


class Role(enum.Enum):
    ALICE = "alice"
    BOB = "bob"


class Phase(enum.IntEnum):
    INIT = 0
    QUANTUM = 1
    SIFT = 2
    DISCLOSE = 3
    RECONCILE = 4
    AMPLIFY = 5
    DONE = 6
    ABORTED = 7


@dataclass(frozen=True)
class IdealChannel:
    """Quantum-channel stub.

    Each pair is detected with probability ``detect_prob``.  Bit pairs click
    in their own slot, moved to the other slot with probability
    ``error_rate``; decoy pairs click in a random slot.
    """

    detect_prob: float = 1.0
    error_rate: float = 0.0

    def __call__(self, frame: SymbolFrame, budget: OpticalBudget, seed) -> detection.DetectionRecord:
        rng = np.random.default_rng(seed)
        n = len(frame)
        hit = np.flatnonzero(rng.random(n) < self.detect_prob)
        sym = frame.symbols[hit]
        slot = np.where(sym == LogicalSymbol.DECOY, rng.integers(0, 2, len(hit)), sym).astype(np.int8)
        flip = (rng.random(len(hit)) < self.error_rate) & (sym != LogicalSymbol.DECOY)
        slot = np.where(flip, 1 - slot, slot).astype(np.int8)
        times = (2 * hit + slot) * budget.pulse_gap_s
        return detection.DetectionRecord(times, hit, slot, np.zeros(len(hit), bool))


@dataclass(frozen=True)
class PhysicalChannel:
    """Full Monte Carlo channel: loss, detector, dead time, dark counts, jitter."""

    detector: Optional[detection.DetectorParams] = None

    def __call__(self, frame: SymbolFrame, budget: OpticalBudget, seed) -> detection.DetectionRecord:
        det = self.detector or detection.detector_for(budget)
        _, _, window, _ = detection.detect(frame, budget, det, seed)
        return window


@dataclass
class SessionConfig:
    n_pairs: int = 65536
    f: float = 0.5
    dr: float = 0.03125
    cr: float = 0.5
    qber_ceiling: float = 0.06
    block_size: int = 1024
    code_rate: object = "auto"
    max_iter: int = 60
    budget: OpticalBudget = field(default_factory=OpticalBudget)
    quantum: Callable = field(default_factory=IdealChannel)

    def hello_fields(self) -> dict:
        return {"version": PROTOCOL_VERSION, "n_pairs": self.n_pairs, "f": self.f, "dr": self.dr,
                "cr": self.cr, "qber_ceiling": self.qber_ceiling, "block_size": self.block_size,
                "code_rate": str(self.code_rate), "max_iter": self.max_iter,
                "pulse_rate_hz": self.budget.pulse_rate_hz}


@dataclass
class SessionResult:
    role: Role
    key: np.ndarray
    report: KeyRateReport
    blocks_total: int
    blocks_ok: int
    phase: Phase
    transcript: list = field(default_factory=list, repr=False)


def _session_seeds(seed: int) -> dict:
    names = ("sid", "frame", "quantum", "disclose", "matrix", "tag", "toeplitz")
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {k: int(s.generate_state(1, np.uint64)[0]) for k, s in zip(names, kids)} | {
        "sid_bytes": kids[0].generate_state(4, np.uint32).astype("<u4").tobytes()}


class _Party:
    def __init__(self, role: Role, channel, session_id: bytes = b"\0" * 16):
        self.role = role
        self.channel = channel
        self.sid = session_id
        self.phase = Phase.INIT

    def enter(self, phase: Phase) -> None:
        if phase < self.phase:
            raise ProtocolError(f"phase cannot go back from {self.phase.name} to {phase.name}")
        self.phase = phase

    def send(self, mtype: MsgType, fields: dict | None = None, *blobs: bytes) -> None:
        self.channel.send(WireMessage(mtype, self.sid, pack_payload(fields, *blobs)))

    def recv(self, *expected: MsgType):
        msg = self.channel.recv()
        if msg.session_id != self.sid:
            raise SessionAbort("protocol", "foreign session id")
        fields, blobs = unpack_payload(msg.payload)
        if msg.type is MsgType.ABORT:
            self.phase = Phase.ABORTED
            raise SessionAbort(fields.get("reason", "remote"), fields.get("detail", "peer aborted"))
        if msg.type not in expected:
            raise SessionAbort("out_of_order", f"got {msg.type.name} in phase {self.phase.name}")
        return msg.type, fields, blobs

    def abort(self, reason: str, detail: str = "", **extra) -> SessionAbort:
        """Tell the peer (best effort) and return the exception to raise."""
        self.phase = Phase.ABORTED
        try:
            self.send(MsgType.ABORT, {"reason": reason, "detail": detail, **extra})
        except CowQkdError:
            pass
        return SessionAbort(reason, detail)


def _report(budget, dr, cr, n_pairs, clicks, key_bits, qber) -> KeyRateReport:
    duration = 2 * n_pairs * budget.pulse_gap_s
    rate = clicks / duration
    return KeyRateReport(budget=budget, dr=dr, cr=cr, total_clicks_hz=rate, effective_clicks_hz=rate,
                         qber=qber, secret_kr_bps=key_bits / duration,
                         extras={"duration_s": duration, "final_bits": key_bits})


def _final_tag(key: np.ndarray, tag_seed: int) -> int:
    return block_tag(key, FINAL_TAG_BLOCK, tag_seed).value if len(key) else 0


def _guard(party: _Party, body):
    try:
        return body()
    except SessionAbort:
        party.phase = Phase.ABORTED
        raise
    except (ProtocolError, ValueError) as exc:
        raise party.abort("protocol", str(exc)) from exc


def run_alice(config: SessionConfig, channel, seed: int) -> SessionResult:
    """Alice's side: source, sifting announcements, syndromes and hashing seed."""
    seeds = _session_seeds(seed)
    party = _Party(Role.ALICE, channel, seeds["sid_bytes"])

    def body():
        cfg = config
        party.send(MsgType.HELLO, cfg.hello_fields())

        party.enter(Phase.QUANTUM)
        frame = encode_sequence(seeds["frame"], cfg.n_pairs, cfg.f,
                                detection.nonempty_mu(cfg.budget, cfg.f))
        rec = cfg.quantum(frame, cfg.budget, seeds["quantum"])
        party.send(MsgType.QUANTUM_OUTCOME, {"n_pairs": cfg.n_pairs},
                   pack_ints(rec.pair_index), rec.slot.astype(np.uint8).tobytes())

        party.enter(Phase.SIFT)
        _, fields, blobs = party.recv(MsgType.DETECTION_INDICES)
        clicked = unpack_ints(blobs[0])
        kept = sift_indices(frame, clicked)
        party.send(MsgType.DETECTION_INDICES, {"count": len(kept)}, pack_ints(kept))
        key = frame.symbols[kept].astype(np.uint8)
        if len(key) == 0:
            raise party.abort("no_key", "nothing left after sifting")

        party.enter(Phase.DISCLOSE)
        pos = disclose_positions(len(key), cfg.dr, seeds["disclose"])
        if len(pos) == 0:
            raise party.abort("no_disclosure", "disclose rate leaves no sample")
        party.send(MsgType.DISCLOSE_REQUEST, {"seed": seeds["disclose"], "dr": cfg.dr, "n": len(key)})
        _, _, blobs = party.recv(MsgType.DISCLOSE_BITS)
        bob_sample = unpack_bits(blobs[0])
        qber = estimate_qber(key[pos], bob_sample)
        if qber > cfg.qber_ceiling:
            raise party.abort("qber_exceeded", f"QBER {qber:.4f} > {cfg.qber_ceiling}", qber=qber)
        party.send(MsgType.QBER_REPORT, {"qber": qber, "n_disclosed": len(pos)})
        key = np.delete(key, pos)

        party.enter(Phase.RECONCILE)
        rate = choose_code_rate(qber, cfg.code_rate)
        matrix = ldpc_generate(cfg.block_size, rate, seeds["matrix"])
        p = max(qber, MIN_CROSSOVER)
        n_blocks = len(key) // cfg.block_size
        kept_blocks = []
        for k in range(n_blocks):
            xa = key[k * cfg.block_size:(k + 1) * cfg.block_size]
            tag = block_tag(xa, k, seeds["tag"])
            party.send(MsgType.SYNDROME,
                       {"block_id": k, "n": cfg.block_size, "rate": str(rate), "matrix_seed": seeds["matrix"],
                        "tag_seed": seeds["tag"], "crossover": p, "tag": tag.value, "blocks": n_blocks},
                       pack_bits(syndrome(matrix, xa)))
            _, vf, _ = party.recv(MsgType.VERIFY_TAG)
            if vf["block_id"] != k:
                raise ProtocolError(f"verify tag for block {vf['block_id']}, expected {k}")
            if vf["ok"] and vf["tag"] == tag.value:
                kept_blocks.append(xa)
        corrected = np.concatenate(kept_blocks) if kept_blocks else np.zeros(0, np.uint8)

        party.enter(Phase.AMPLIFY)
        party.send(MsgType.TOEPLITZ_SEED, {"seed": seeds["toeplitz"], "cr": cfg.cr,
                                           "block_size": cfg.block_size, "tag_seed": seeds["tag"]})
        final, _ = amplify(corrected, seeds["toeplitz"], cfg.cr, cfg.block_size)
        _, af, _ = party.recv(MsgType.FINAL_ACK)
        if af["n_bits"] != len(final) or af["key_tag"] != _final_tag(final, seeds["tag"]):
            raise party.abort("key_mismatch", "final key confirmation failed")
        party.enter(Phase.DONE)
        report = _report(cfg.budget, cfg.dr, cfg.cr, cfg.n_pairs, len(rec), len(final), qber)
        return SessionResult(Role.ALICE, final, report, n_blocks, len(kept_blocks), party.phase,
                             list(getattr(channel, "transcript", [])))

    return _guard(party, body)


def run_bob(config: SessionConfig, channel, seed: int) -> SessionResult:
    """Bob's side: detection announcements, disclosure replies and decoding.

    Session parameters come from Alice's HELLO; ``config`` only supplies the
    local budget used for rate reporting.
    """
    party = _Party(Role.BOB, channel)

    def body():
        msg = channel.recv()
        party.sid = msg.session_id
        if msg.type is not MsgType.HELLO:
            raise party.abort("out_of_order", f"expected HELLO, got {msg.type.name}")
        hello, _ = unpack_payload(msg.payload)
        if hello.get("version") != PROTOCOL_VERSION:
            raise party.abort("protocol", f"unsupported version {hello.get('version')}")
        n_pairs, block_size, dr, cr = hello["n_pairs"], hello["block_size"], hello["dr"], hello["cr"]

        party.enter(Phase.QUANTUM)
        _, _, blobs = party.recv(MsgType.QUANTUM_OUTCOME)
        pair_index = unpack_ints(blobs[0])
        slots = np.frombuffer(blobs[1], dtype=np.uint8).astype(np.int8)
        pairs, bits, _ = single_clicks(pair_index, slots, n_pairs)

        party.enter(Phase.SIFT)
        party.send(MsgType.DETECTION_INDICES, {"count": len(pairs)}, pack_ints(pairs))
        _, _, blobs = party.recv(MsgType.DETECTION_INDICES)
        kept = unpack_ints(blobs[0])
        lookup = np.searchsorted(pairs, kept)
        if len(kept) and (np.any(lookup >= len(pairs)) or np.any(pairs[np.minimum(lookup, len(pairs) - 1)] != kept)):
            raise ProtocolError("sifted indices are not a subset of announced detections")
        key = bits[lookup].astype(np.uint8)

        party.enter(Phase.DISCLOSE)
        _, req, _ = party.recv(MsgType.DISCLOSE_REQUEST)
        if req["n"] != len(key):
            raise ProtocolError(f"sifted length mismatch ({req['n']} vs {len(key)})")
        pos = disclose_positions(len(key), req["dr"], req["seed"])
        party.send(MsgType.DISCLOSE_BITS, {"count": len(pos)}, pack_bits(key[pos]))
        _, qf, _ = party.recv(MsgType.QBER_REPORT)
        qber = qf["qber"]
        key = np.delete(key, pos)

        party.enter(Phase.RECONCILE)
        n_blocks = len(key) // block_size
        kept_blocks = []
        matrix = None
        for k in range(n_blocks):
            _, sf, blobs = party.recv(MsgType.SYNDROME)
            if sf["block_id"] != k or sf["n"] != block_size:
                raise ProtocolError(f"unexpected syndrome header {sf}")
            if matrix is None:
                matrix = ldpc_generate(block_size, choose_code_rate(qber, sf["rate"]), sf["matrix_seed"])
            xb = key[k * block_size:(k + 1) * block_size]
            res = decode(matrix, xb, unpack_bits(blobs[0]), sf["crossover"], hello["max_iter"])
            tag = block_tag(res.bits, k, sf["tag_seed"]).value if res.ok else None
            ok = res.ok and tag == sf["tag"]
            party.send(MsgType.VERIFY_TAG, {"block_id": k, "ok": bool(ok), "tag": tag})
            if ok:
                kept_blocks.append(res.bits)
        corrected = np.concatenate(kept_blocks) if kept_blocks else np.zeros(0, np.uint8)

        party.enter(Phase.AMPLIFY)
        _, tf, _ = party.recv(MsgType.TOEPLITZ_SEED)
        final, _ = amplify(corrected, tf["seed"], tf["cr"], tf["block_size"])
        party.send(MsgType.FINAL_ACK, {"n_bits": len(final), "key_tag": _final_tag(final, tf["tag_seed"])})
        party.enter(Phase.DONE)
        report = _report(config.budget, dr, cr, n_pairs, len(pair_index), len(final), qber)
        return SessionResult(Role.BOB, final, report, n_blocks, len(kept_blocks), party.phase,
                             list(getattr(channel, "transcript", [])))

    return _guard(party, body)


def run_loopback(config: SessionConfig, seed: int, timeout: Optional[float] = 60.0):
    """Run both roles in one process over a socketpair.

    Returns ``(alice, bob)``; each entry is a :class:`SessionResult` or the
    :class:`SessionAbort` that role ended with.
    """
    import threading

    from .transport import loopback_pair

    a, b = loopback_pair(timeout)
    out = {}

    def play(name, fn, chan):
        try:
            out[name] = fn(config, chan, seed)
        except SessionAbort as exc:
            out[name] = exc

    t = threading.Thread(target=play, args=("bob", run_bob, b))
    t.start()
    try:
        play("alice", run_alice, a)
    finally:
        # Bob has sent his last frame once Alice returns; closing unblocks him otherwise
        a.close()
        t.join()
        b.close()
    return out["alice"], out["bob"]
