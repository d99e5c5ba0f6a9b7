"""Flow and retransmission control: reliable, ordered, fragmenting transport.

The protocol machines here are passive: they hold no timers and spawn no
threads.  All time enters through the ``now`` argument (integer
milliseconds) and the caller is responsible for invoking :func:`frcp_tick`
at (or before) the deadline reported by :func:`next_deadline`.

Reliability rests on bounding three timers: the maximum packet lifetime
of the flow (MPL), the time within which a packet may be acknowledged (A)
and the time after which it may no longer be retransmitted (R).  A and R
are strict cut-offs, not deadlines.
"""

import struct

from .core import (PacketBuffer, FrcpConfig, add_integrity, check_integrity,
                   RecnetError)

# Flag bits, in wire order from bit 0.
FLAG_DRF = 0x01   # data run flag: no unacknowledged packets outstanding
FLAG_RDVZ = 0x02  # rendez-vous probe resolving a zero window
FLAG_FFGM = 0x04  # first fragment
FLAG_MFGM = 0x08  # more fragments follow
FLAG_SEQ = 0x10   # SEQNO field in use
FLAG_ACK = 0x20   # ACKNO field in use
FLAG_DATA = 0x40  # payload present

HEADER_LEN = 14
_HDR = struct.Struct(">HIII")

WINDOW_CAPACITY = 64      # receive buffer, in packets
RTO_DIVISOR = 8           # RTO = R / 8
MAX_RETRIES = 7


class FlowControlBlocked(RecnetError):
    """The send window cannot take the whole message right now."""


class MessageTooLarge(RecnetError):
    """Message exceeds the usable packet size and fragmentation is off."""


class ShortBuffer(RecnetError):
    pass


class FrcpHeader:
    __slots__ = ("flags", "seqno", "ackno", "wnd")

    def __init__(self, flags=0, seqno=0, ackno=0, wnd=0):
        self.flags = flags
        self.seqno = seqno
        self.ackno = ackno
        self.wnd = wnd

    def encode(self) -> bytes:
        seq = self.seqno if self.flags & FLAG_SEQ else 0
        return _HDR.pack(self.flags, seq & 0xFFFFFFFF,
                         self.ackno & 0xFFFFFFFF, self.wnd & 0xFFFFFFFF)

    @classmethod
    def decode(cls, data: bytes) -> "FrcpHeader":
        if len(data) < HEADER_LEN:
            raise ShortBuffer("frcp header needs %d bytes" % HEADER_LEN)
        flags, seq, ack, wnd = _HDR.unpack(data[:HEADER_LEN])
        return cls(flags, seq, ack, wnd)

    def frag_bits(self):
        return (1 if self.flags & FLAG_FFGM else 0,
                1 if self.flags & FLAG_MFGM else 0)

    def __repr__(self):
        return "FrcpHeader(flags=0x%02x, seq=%d, ack=%d, wnd=%d)" % (
            self.flags, self.seqno, self.ackno, self.wnd)


class SenderState:
    def __init__(self):
        self.next_seq = 0
        self.rwe = WINDOW_CAPACITY      # receiver-granted right window edge
        self.unacked = {}               # seqno -> [pkt, first_sent, last_sent, tries]
        self.last_activity = 0
        self.drf_pending = True
        self.zero_window_since = None
        self.rdvz_sent = None


class ReceiverState:
    def __init__(self, capacity=WINDOW_CAPACITY):
        self.next_expected = 0
        self.out_of_order = {}          # seqno -> (flags, payload bytes)
        self.partial = None             # (first_seqno, [fragment bytes])
        self.capacity = capacity
        self.app_backlog = 0            # packets delivered but not yet read
        self.last_ack_sent = 0
        self.last_activity = 0
        self.ack_pending = False
        self.oldest_unacked_arrival = None
        self.gap_since = None           # first moment delivery stalled
        self.synced = False             # has seen any packet this record
        # counters
        self.duplicates = 0
        self.stale = 0
        self.integrity_failures = 0
        self.skipped = 0                # seqnos abandoned by gap skip


def frcp_window_update(state: ReceiverState) -> int:
    """Current right window edge: what the receive buffer can still take."""
    buffered = len(state.out_of_order) + state.app_backlog
    if state.partial is not None:
        buffered += len(state.partial[1])
    free = state.capacity - buffered
    if free < 0:
        free = 0
    return state.next_expected + free


def _usable(cfg: FrcpConfig, mps: int) -> int:
    room = mps - HEADER_LEN
    if cfg.integrity_check:
        room -= 4
    if room <= 0:
        raise ValueError("mps too small for transport headers")
    return room


def _emit(hdr: FrcpHeader, payload: bytes, cfg: FrcpConfig,
          head_room: int = 64) -> PacketBuffer:
    pkt = PacketBuffer.for_payload(payload, head_room=head_room)
    pkt.prepend(hdr.encode())
    if cfg.integrity_check:
        add_integrity(pkt)
    return pkt


def frcp_write(sender: SenderState, receiver: ReceiverState, cfg: FrcpConfig,
               data: bytes, mps: int, now: int) -> list:
    """Fragment and encapsulate one message; returns the wire packets.

    Copies are retained for retransmission when ARQ is on.  Raises
    FlowControlBlocked when the window cannot take every fragment; the
    caller must wait for a window update before retrying.
    """
    usable = _usable(cfg, mps)
    if len(data) > usable and not cfg.fragmentation:
        raise MessageTooLarge("%d > %d" % (len(data), usable))
    nfrags = max(1, -(-len(data) // usable))
    if cfg.flow_control and sender.next_seq + nfrags > sender.rwe:
        raise FlowControlBlocked()

    new_run = sender.drf_pending or (cfg.arq and not sender.unacked)
    wnd = frcp_window_update(receiver)
    ack = receiver.synced
    out = []
    for i in range(nfrags):
        chunk = data[i * usable:(i + 1) * usable]
        flags = FLAG_SEQ | FLAG_DATA
        if nfrags == 1:
            flags |= FLAG_FFGM
        elif i == 0:
            flags |= FLAG_FFGM | FLAG_MFGM
        elif i < nfrags - 1:
            flags |= FLAG_MFGM
        if i == 0 and new_run:
            flags |= FLAG_DRF
        if ack:
            flags |= FLAG_ACK
        hdr = FrcpHeader(flags, sender.next_seq, receiver.next_expected, wnd)
        pkt = _emit(hdr, chunk, cfg)
        if cfg.arq:
            sender.unacked[sender.next_seq] = [pkt.copy(), now, now, 0]
        sender.next_seq += 1
        out.append(pkt)
    sender.drf_pending = False
    sender.last_activity = now
    if ack:
        receiver.ack_pending = False
        receiver.oldest_unacked_arrival = None
    return out


def make_ack(sender: SenderState, receiver: ReceiverState, cfg: FrcpConfig,
             rdvz: bool = False) -> PacketBuffer:
    """Standalone acknowledgment / window update (or rendez-vous probe)."""
    flags = FLAG_RDVZ if rdvz else FLAG_ACK
    hdr = FrcpHeader(flags, 0, receiver.next_expected,
                     frcp_window_update(receiver))
    receiver.ack_pending = False
    receiver.oldest_unacked_arrival = None
    return _emit(hdr, b"", cfg)


def _process_ack(sender: SenderState, ackno: int):
    for seq in [s for s in sender.unacked if s < ackno]:
        del sender.unacked[seq]
    if not sender.unacked and sender.next_seq <= ackno:
        # everything out was acknowledged: next burst starts a data run
        pass


def _deliver_in_order(receiver: ReceiverState, cfg: FrcpConfig, out: list,
                      now: int):
    """Drain the contiguous run at next_expected into ``out``.

    Buffered packets older than A may no longer be acknowledged, so they
    are treated as never received: with ARQ the sender still holds a copy
    and will retransmit.
    """
    ackable = cfg.arq or cfg.flow_control
    while receiver.next_expected in receiver.out_of_order:
        flags, payload, arrived = receiver.out_of_order[receiver.next_expected]
        if ackable and now - arrived > cfg.a_timer:
            del receiver.out_of_order[receiver.next_expected]
            if not cfg.arq:
                receiver.skipped += 1
                receiver.next_expected += 1
                continue
            break
        del receiver.out_of_order[receiver.next_expected]
        receiver.next_expected += 1
        first, more = bool(flags & FLAG_FFGM), bool(flags & FLAG_MFGM)
        if not cfg.reassembly:
            out.append(payload)         # partial delivery, MFGM ignored
            receiver.app_backlog += 1
            continue
        if first and not more:
            out.append(payload)
            receiver.app_backlog += 1
        elif first:
            receiver.partial = (receiver.next_expected - 1, [payload])
        elif receiver.partial is not None:
            receiver.partial[1].append(payload)
            if not more:
                out.append(b"".join(receiver.partial[1]))
                receiver.app_backlog += 1
                receiver.partial = None
        else:
            # orphan fragment: its first fragment was abandoned
            receiver.skipped += 1
    receiver.gap_since = None


def frcp_receive(sender: SenderState, receiver: ReceiverState,
                 cfg: FrcpConfig, pkt: PacketBuffer, now: int):
    """Process one incoming packet.

    Returns (deliverable, ack_due): the list of complete messages now
    deliverable in order, and whether an acknowledgment should go out.
    """
    if cfg.integrity_check and not check_integrity(pkt):
        receiver.integrity_failures += 1
        return [], False
    try:
        hdr = FrcpHeader.decode(pkt.peek(HEADER_LEN))
    except ShortBuffer:
        receiver.integrity_failures += 1
        return [], False
    pkt.strip_head(HEADER_LEN)
    receiver.last_activity = now

    # window update rides on every packet
    if hdr.wnd > sender.rwe:
        sender.rwe = hdr.wnd
        sender.zero_window_since = None
        sender.rdvz_sent = None
    if hdr.flags & FLAG_ACK:
        _process_ack(sender, hdr.ackno)

    ack_due = False
    if hdr.flags & FLAG_RDVZ:
        ack_due = True          # answer with a window update

    out = []
    if hdr.flags & FLAG_DATA and hdr.flags & FLAG_SEQ:
        seq = hdr.seqno
        if not receiver.synced:
            # first packet of this connection record sets the base
            receiver.synced = True
            if hdr.flags & FLAG_DRF or not cfg.arq:
                receiver.next_expected = seq
        if hdr.flags & FLAG_DRF and seq > receiver.next_expected:
            # new data run: anything older was acknowledged long ago
            for s in [s for s in receiver.out_of_order if s < seq]:
                del receiver.out_of_order[s]
            receiver.skipped += seq - receiver.next_expected
            receiver.next_expected = seq
            receiver.partial = None
        if seq < receiver.next_expected:
            receiver.stale += 1
            receiver.duplicates += 1
            ack_due = True      # re-ack so a lost ack cannot stall the peer
        elif seq in receiver.out_of_order:
            receiver.duplicates += 1
        elif seq >= frcp_window_update(receiver) and cfg.flow_control:
            receiver.stale += 1  # beyond what we granted; drop
        else:
            receiver.out_of_order[seq] = (hdr.flags, pkt.payload(), now)
            before = receiver.next_expected
            _deliver_in_order(receiver, cfg, out, now)
            if receiver.next_expected > before:
                ack_due = True
                receiver.ack_pending = True
                if receiver.oldest_unacked_arrival is None:
                    receiver.oldest_unacked_arrival = now
            elif receiver.out_of_order and receiver.gap_since is None:
                receiver.gap_since = now
    if not (cfg.arq or cfg.flow_control):
        ack_due = False
    return out, ack_due


def frcp_tick(sender: SenderState, receiver: ReceiverState, cfg: FrcpConfig,
              now: int, gap_timeout=None):
    """Run the clock forward: retransmit, purge, probe, skip stale gaps.

    Returns (packets, deliverable): packets to transmit and messages freed
    for delivery by a gap skip.  Hard guarantees: nothing is retransmitted
    at or after R past its first transmission, and entries older than R
    are purged.
    """
    packets = []
    deliverable = []
    rto = max(1, cfg.r_timer // RTO_DIVISOR)

    if cfg.arq:
        for seq in list(sender.unacked):
            ent = sender.unacked[seq]
            pkt, first_sent, last_sent, tries = ent
            if first_sent + cfg.r_timer <= now:
                del sender.unacked[seq]     # R expired: give up silently
                continue
            if last_sent + rto <= now and tries < MAX_RETRIES:
                packets.append(pkt.copy())
                ent[2] = now
                ent[3] = tries + 1

    # skip a gap that no retransmission will ever fill
    if not cfg.arq and receiver.out_of_order and receiver.gap_since is not None:
        timeout = gap_timeout if gap_timeout else cfg.a_timer
        if receiver.gap_since + timeout <= now:
            lowest = min(receiver.out_of_order)
            receiver.skipped += lowest - receiver.next_expected
            receiver.next_expected = lowest
            receiver.partial = None
            _deliver_in_order(receiver, cfg, deliverable, now)
            receiver.ack_pending = True
            if receiver.oldest_unacked_arrival is None:
                receiver.oldest_unacked_arrival = now

    # overdue acknowledgment (they are normally sent on arrival)
    if receiver.ack_pending and receiver.oldest_unacked_arrival is not None:
        if receiver.oldest_unacked_arrival + cfg.a_timer // 2 <= now:
            packets.append(make_ack(sender, receiver, cfg))

    # rendez-vous: a zero window held longer than R
    if cfg.flow_control:
        if sender.rwe == sender.next_seq and not sender.unacked:
            if sender.zero_window_since is None:
                sender.zero_window_since = now
            elif (sender.zero_window_since + cfg.r_timer <= now
                  and (sender.rdvz_sent is None
                       or sender.rdvz_sent + cfg.r_timer <= now)):
                packets.append(make_ack(sender, receiver, cfg, rdvz=True))
                sender.rdvz_sent = now
        else:
            sender.zero_window_since = None
            sender.rdvz_sent = None

    # connection-record expiry: after delta-t of silence the next run
    # may resynchronise the sequence base
    if (receiver.last_activity + cfg.delta_t <= now and receiver.synced
            and not receiver.out_of_order and receiver.partial is None):
        receiver.synced = False
    if sender.last_activity + cfg.delta_t <= now and not sender.unacked:
        sender.drf_pending = True

    return packets, deliverable


def next_deadline(sender: SenderState, receiver: ReceiverState,
                  cfg: FrcpConfig, gap_timeout=None):
    """Earliest time at which frcp_tick would do something, or None."""
    deadlines = []
    rto = max(1, cfg.r_timer // RTO_DIVISOR)
    if cfg.arq:
        for pkt, first_sent, last_sent, tries in sender.unacked.values():
            deadlines.append(first_sent + cfg.r_timer)
            if tries < MAX_RETRIES:
                deadlines.append(last_sent + rto)
    if not cfg.arq and receiver.out_of_order and receiver.gap_since is not None:
        timeout = gap_timeout if gap_timeout else cfg.a_timer
        deadlines.append(receiver.gap_since + timeout)
    if receiver.ack_pending and receiver.oldest_unacked_arrival is not None:
        deadlines.append(receiver.oldest_unacked_arrival + cfg.a_timer // 2)
    if cfg.flow_control and sender.zero_window_since is not None:
        if sender.rdvz_sent is None:
            deadlines.append(sender.zero_window_since + cfg.r_timer)
        else:
            deadlines.append(sender.rdvz_sent + cfg.r_timer)
    return min(deadlines) if deadlines else None


class FrcpConn:
    """One endpoint side: paired sender and receiver state plus config.

    For flows with the transport disabled this still applies/verifies the
    integrity trailer when the QoS asked for one.
    """

    def __init__(self, cfg: FrcpConfig, mps: int, gap_timeout=0,
                 capacity=WINDOW_CAPACITY):
        self.cfg = cfg
        self.mps = mps
        self.gap_timeout = gap_timeout
        self.sender = SenderState()
        self.receiver = ReceiverState(capacity)

    def write(self, data: bytes, now: int) -> list:
        if not self.cfg.enabled:
            pkt = PacketBuffer.for_payload(data)
            if self.cfg.integrity_check:
                add_integrity(pkt)
            return [pkt]
        return frcp_write(self.sender, self.receiver, self.cfg, data,
                          self.mps, now)

    def receive(self, pkt: PacketBuffer, now: int):
        """Returns (messages, ack packets to transmit)."""
        if not self.cfg.enabled:
            if self.cfg.integrity_check and not check_integrity(pkt):
                self.receiver.integrity_failures += 1
                return [], []
            self.receiver.app_backlog += 1
            return [pkt.payload()], []
        msgs, ack_due = frcp_receive(self.sender, self.receiver, self.cfg,
                                     pkt, now)
        acks = [make_ack(self.sender, self.receiver, self.cfg)] if ack_due else []
        return msgs, acks

    def tick(self, now: int):
        if not self.cfg.enabled:
            return [], []
        return frcp_tick(self.sender, self.receiver, self.cfg, now,
                         self.gap_timeout)

    def next_deadline(self):
        if not self.cfg.enabled:
            return None
        return next_deadline(self.sender, self.receiver, self.cfg,
                             self.gap_timeout)

    def app_took(self, npackets: int = 1):
        """The application consumed delivered data; the window may open."""
        self.receiver.app_backlog = max(0, self.receiver.app_backlog - npackets)

    def can_write(self, data_len: int) -> bool:
        if not self.cfg.enabled or not self.cfg.flow_control:
            return True
        usable = _usable(self.cfg, self.mps)
        nfrags = max(1, -(-data_len // usable))
        return self.sender.next_seq + nfrags <= self.sender.rwe
