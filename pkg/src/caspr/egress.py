"""Egress-side recovery engine living in the second datacenter.

Parity from the ingress is parked here in a TTL-bounded store, unused
unless a receiver reports loss.  On a NACK the engine picks the
cheapest path that can still make the one-RTT budget:

  1. a payload already decoded earlier is resent from cache,
  2. an in-stream batch covering the entry has its parity forwarded
     (exactly as many symbols as there are known-lost packets),
  3. otherwise the covering cross-stream batch opens a cooperative
     task: every other member receiver is asked for its packet, and
     the batch is decoded the moment the unknown count drops to the
     parity count.  Recovered payloads go out as ordinary data toward
     the NACKing receiver only.

Tasks expire one direct-path RTT after opening; whatever is still
unrecovered is counted failed-silent and late helper responses are
dropped.  A NACK with no covering parity first waits out the encoder
flush horizon (parity may be in flight), then asks the receiver to
confirm the loss is real before giving up: flows stopping right at a
batch boundary otherwise leave phantom losses behind.

A loss claim is credible only once the direct path has had its chance:
parity may vouch for a packet only if that packet's send time plus the
direct-path latency bound lies at or before the moment the NACK left
the receiver.  Burst-boundary timer probes name sequence numbers the
sender has not produced yet, or produced so recently that they are
still in flight; batch metadata carries per-member send times exactly
so such claims can be told apart from real losses, which are always
reported after the packet had time to arrive.  Inadmissible claims
stay in the orphan flow; the guard is waived once the receiver
confirms the hole is real, and a cumulative ACK retracts claims the
direct path has since satisfied.

Three NACKs from the same receiver with no ACK in between flip it to
proactive mode: newly arriving cross parity that covers the receiver
opens recovery immediately, without waiting for NACKs that a dead
direct path may not be able to provoke in time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .codec import InsufficientSymbols, SourceSymbol, decode_batch
from .wire import (
    Ack,
    CTRL_CONFIRM_QUERY,
    CTRL_CONFIRM_RESP,
    CodedPacket,
    CoopRequest,
    CoopResponse,
    Ctrl,
    DataPacket,
    Nack,
    parity_from_coded,
)

IDLE, PENDING, DECODED, FAILED = "idle", "pending", "decoded", "failed"

Entry = tuple[int, int]


@dataclass
class EgressConfig:
    deadline_us: int          # cooperative-task budget, one direct RTT
    boundary_wait_us: int     # flush horizon before querying the receiver
    store_ttl_us: int
    proactive_after: int = 3  # consecutive un-ACKed NACKs
    claim_owd_us: int = 0     # direct one-way delay plus jitter bound


@dataclass(eq=False)
class StoredBatch:
    batch_id: int
    cross: bool
    members: tuple
    num_parity: int
    first_seen_us: int
    sent_ts: int = 0          # ingress transmit time, earliest parity copy
    member_sent: dict[Entry, int] = field(default_factory=dict)
    parity: dict[int, CodedPacket] = field(default_factory=dict)
    decoded: dict[Entry, bytes] = field(default_factory=dict)
    negatives: set[Entry] = field(default_factory=set)
    lost: set[Entry] = field(default_factory=set)
    requested: set[str] = field(default_factory=set)
    forwarded: set[int] = field(default_factory=set)
    state: str = IDLE
    gen: int = 0

    def entries(self):
        return [(f, s) for f, s, _ in self.members]


@dataclass
class _Orphan:
    receiver: str
    created_us: int
    nack_ts: int = 0          # latest claim with no admissible coverage
    confirmed: bool | None = None


@dataclass
class _ReceiverPort:
    receiver_id: str
    flows: tuple[int, ...]
    data_link: str
    ctrl_link: str
    consec_nacks: int = 0
    proactive: bool = False


class EgressRecovery:
    """One DC2 node."""

    def __init__(self, name: str, config: EgressConfig, run_log):
        self.name = name
        self.config = config
        self.run_log = run_log
        self.env = None
        self.store: dict[int, StoredBatch] = {}
        self.by_entry: dict[Entry, set[int]] = {}
        self.orphans: dict[Entry, _Orphan] = {}
        self.ports: dict[str, _ReceiverPort] = {}
        self._flow_port: dict[int, _ReceiverPort] = {}

    def register_receiver(self, receiver_id: str, flows, data_link: str,
                          ctrl_link: str) -> None:
        if receiver_id in self.ports:
            raise ValueError(f"receiver {receiver_id} registered twice")
        port = _ReceiverPort(receiver_id, tuple(flows), data_link, ctrl_link)
        self.ports[receiver_id] = port
        for f in port.flows:
            if f in self._flow_port:
                raise ValueError(f"flow {f} already owned by {self._flow_port[f].receiver_id}")
            self._flow_port[f] = port

    # -- dispatch ---------------------------------------------------------

    def on_message(self, msg, link_name: str) -> None:
        now = self.env.now
        if isinstance(msg, CodedPacket):
            self._on_coded(msg, now)
        elif isinstance(msg, Nack):
            self._on_nack(msg, now)
        elif isinstance(msg, Ack):
            self._on_ack(msg)
        elif isinstance(msg, CoopResponse):
            self._on_coop_response(msg, now)
        elif isinstance(msg, Ctrl) and msg.kind == CTRL_CONFIRM_RESP:
            self._on_confirm_response(msg)

    def on_timer(self, token) -> None:
        kind = token[0]
        now = self.env.now
        if kind == "ttl":
            self._expire_batch(token[1], now)
        elif kind == "task":
            _, batch_id, gen = token
            batch = self.store.get(batch_id)
            if batch is not None and batch.gen == gen and batch.state == PENDING:
                batch.state = FAILED
                missing = [e for e in sorted(batch.lost) if e not in batch.decoded]
                self.run_log.bump("failed_silent", len(missing))
        elif kind == "boundary":
            _, f, s, created = token
            orphan = self.orphans.get((f, s))
            if orphan is not None and orphan.created_us == created and orphan.confirmed is None:
                port = self._flow_port[f]
                self.env.send(port.ctrl_link,
                              Ctrl(kind=CTRL_CONFIRM_QUERY, flow_id=f, seq=s,
                                   send_ts_us=self.env.now))
                self.run_log.bump("confirm_queries")
        elif kind == "orphan":
            _, f, s, created = token
            orphan = self.orphans.get((f, s))
            if orphan is not None and orphan.created_us == created:
                del self.orphans[(f, s)]
                self.run_log.bump("failed_silent")

    # -- parity intake ------------------------------------------------------

    def _on_coded(self, msg: CodedPacket, now: int) -> None:
        batch = self.store.get(msg.batch_id)
        if batch is None:
            batch = StoredBatch(msg.batch_id, msg.cross, msg.members,
                                msg.num_parity, now, sent_ts=msg.send_ts_us)
            self.store[msg.batch_id] = batch
            for e in batch.entries():
                self.by_entry.setdefault(e, set()).add(msg.batch_id)
            self.env.schedule(self.config.store_ttl_us, ("ttl", msg.batch_id))
        if msg.parity_index in batch.parity:
            return
        batch.parity[msg.parity_index] = msg
        batch.sent_ts = min(batch.sent_ts, msg.send_ts_us)
        for e, m_ts in zip(batch.entries(), msg.member_ts):
            known = batch.member_sent.get(e)
            batch.member_sent[e] = m_ts if known is None else min(known, m_ts)
        # parity may resolve entries that were NACKed before coverage existed
        for e in batch.entries():
            orphan = self.orphans.get(e)
            if orphan is None or orphan.confirmed is False:
                continue
            if orphan.confirmed:
                del self.orphans[e]
                self._recover_entry(e, now, None)
            elif self._claim_admissible(batch, e, orphan.nack_ts):
                del self.orphans[e]
                self._recover_entry(e, now, orphan.nack_ts)
        if batch.cross:
            for e in batch.entries():
                port = self._flow_port.get(e[0])
                if (port is not None and port.proactive
                        and e not in batch.decoded and e not in batch.lost):
                    self.run_log.bump("proactive_entries")
                    self._recover_via_cross(batch, e, now)
        if batch.lost:
            if batch.cross:
                self._try_decode(batch, now)
            else:
                self._forward_in_parity(batch, now)

    def _expire_batch(self, batch_id: int, now: int) -> None:
        batch = self.store.get(batch_id)
        if batch is None or now - batch.first_seen_us < self.config.store_ttl_us:
            return
        if batch.state == PENDING:
            missing = [e for e in sorted(batch.lost) if e not in batch.decoded]
            self.run_log.bump("failed_silent", len(missing))
        for e in batch.entries():
            ids = self.by_entry.get(e)
            if ids is not None:
                ids.discard(batch_id)
                if not ids:
                    del self.by_entry[e]
        del self.store[batch_id]

    # -- loss reports ---------------------------------------------------------

    def _on_nack(self, msg: Nack, now: int) -> None:
        port = self._flow_port.get(msg.flow_id)
        if port is None:
            return
        port.consec_nacks += 1
        if port.consec_nacks == self.config.proactive_after and not port.proactive:
            port.proactive = True
            self.run_log.bump("proactive_mode_entries")
            # parity already in the store covers losses the dead direct
            # path can no longer provoke NACKs for; open those too
            flows = set(port.flows)
            for bid in sorted(self.store):
                batch = self.store[bid]
                if not batch.cross:
                    continue
                for e in batch.entries():
                    if (e[0] in flows and e not in batch.decoded
                            and e not in batch.lost):
                        self.run_log.bump("proactive_entries")
                        self._recover_via_cross(batch, e, now)
        for entry in msg.entries:
            self._recover_entry(entry, now, msg.send_ts_us)

    def _on_ack(self, msg: Ack) -> None:
        port = self._flow_port.get(msg.flow_id)
        if port is None:
            return
        port.consec_nacks = 0
        port.proactive = False
        # everything at or below the cumulative point reached the
        # receiver (or was given up on); pending claims there are moot
        stale = [e for e in self.orphans
                 if e[0] == msg.flow_id and e[1] <= msg.cum_seq]
        for e in stale:
            del self.orphans[e]
            self.run_log.bump("claims_retracted")

    def _claim_admissible(self, batch: StoredBatch, entry: Entry,
                          nack_ts: int | None) -> bool:
        """Could the receiver have legitimately missed this entry when
        it complained?  None means the receiver already confirmed."""
        if nack_ts is None:
            return True
        if batch.sent_ts > nack_ts:
            return False
        sent = batch.member_sent.get(entry, batch.sent_ts)
        return sent + self.config.claim_owd_us <= nack_ts

    def _recover_entry(self, entry: Entry, now: int, nack_ts: int | None) -> None:
        batch_ids = sorted(b for b in self.by_entry.get(entry, ())
                           if self._claim_admissible(self.store[b], entry, nack_ts))
        if batch_ids:
            # admissible coverage takes over any pending orphan claim
            self.orphans.pop(entry, None)
        # cheapest first: cached payload beats parity forwarding beats
        # opening a cooperative decode
        for bid in batch_ids:
            batch = self.store[bid]
            if entry in batch.decoded:
                self._send_data(entry, batch.decoded[entry], now)
                self.run_log.bump("cache_resends")
                return
        in_batches = [self.store[b] for b in batch_ids if not self.store[b].cross]
        for batch in in_batches:
            batch.lost.add(entry)
            if len(batch.parity) >= len(batch.lost):
                self._forward_in_parity(batch, now)
                return
        cross = [self.store[b] for b in batch_ids if self.store[b].cross]
        if cross:
            self._recover_via_cross(cross[0], entry, now)
            return
        if in_batches:
            # covered, but not enough in-stream parity: the forwarded
            # symbols stand, nothing more can be done from here
            return
        claim_ts = now if nack_ts is None else nack_ts
        orphan = self.orphans.get(entry)
        if orphan is not None:
            orphan.nack_ts = max(orphan.nack_ts, claim_ts)
        else:
            orphan = _Orphan(self._flow_port[entry[0]].receiver_id, now, claim_ts)
            self.orphans[entry] = orphan
            self.env.schedule(self.config.boundary_wait_us,
                              ("boundary", entry[0], entry[1], now))
            self.env.schedule(self.config.deadline_us,
                              ("orphan", entry[0], entry[1], now))

    def _forward_in_parity(self, batch: StoredBatch, now: int) -> None:
        needed = len([e for e in batch.lost if e not in batch.decoded])
        if len(batch.parity) < needed:
            return
        port = self._flow_port[batch.members[0][0]]
        for idx in sorted(batch.parity):
            if len(batch.forwarded) >= needed:
                break
            if idx in batch.forwarded:
                continue
            batch.forwarded.add(idx)
            self.env.send(port.data_link, batch.parity[idx])
            self.run_log.bump("in_forwards")

    def _recover_via_cross(self, batch: StoredBatch, entry: Entry, now: int) -> None:
        batch.lost.add(entry)
        if batch.state in (DECODED, FAILED):
            if batch.state == DECODED and entry in batch.decoded:
                self._send_data(entry, batch.decoded[entry], now)
                self.run_log.bump("cache_resends")
            return
        if batch.state == IDLE:
            batch.state = PENDING
            batch.gen += 1
            self.run_log.bump("tasks_opened")
            self.env.schedule(self.config.deadline_us,
                              ("task", batch.batch_id, batch.gen))
        self._send_coop_requests(batch, now)
        self._try_decode(batch, now)

    def _send_coop_requests(self, batch: StoredBatch, now: int) -> None:
        lost_receivers = {self._flow_port[f].receiver_id for f, s in batch.lost}
        wanted: dict[str, list[Entry]] = {}
        for f, s, _ in batch.members:
            port = self._flow_port.get(f)
            if port is None or port.receiver_id in lost_receivers:
                continue
            if port.receiver_id in batch.requested or (f, s) in batch.decoded:
                continue
            wanted.setdefault(port.receiver_id, []).append((f, s))
        for rid in sorted(wanted):
            batch.requested.add(rid)
            self.env.send(self.ports[rid].data_link,
                          CoopRequest(entries=tuple(sorted(wanted[rid])),
                                      send_ts_us=now))
            self.run_log.bump("coop_reqs")

    # -- helper responses -------------------------------------------------------

    def _on_coop_response(self, msg: CoopResponse, now: int) -> None:
        entry = msg.entry
        batch = None
        for bid in sorted(self.by_entry.get(entry, ())):
            b = self.store[bid]
            if b.cross:
                batch = b
                break
        if batch is None or batch.state in (DECODED, FAILED):
            self.run_log.bump("late_resps")
            return
        if msg.payload is None:
            batch.negatives.add(entry)
            return
        batch.decoded[entry] = msg.payload
        if batch.state == PENDING:
            self._try_decode(batch, now)

    def _on_confirm_response(self, msg: Ctrl) -> None:
        entry = (msg.flow_id, msg.seq)
        orphan = self.orphans.get(entry)
        if orphan is None:
            return
        if msg.arg:
            orphan.confirmed = True
            # the receiver vouched for the hole itself, so coverage the
            # timestamp guard skipped earlier becomes fair game
            if self.by_entry.get(entry):
                del self.orphans[entry]
                self._recover_entry(entry, self.env.now, None)
        else:
            del self.orphans[entry]
            self.run_log.bump("suppressed")

    # -- decode and delivery ---------------------------------------------------

    def _try_decode(self, batch: StoredBatch, now: int) -> None:
        if batch.state != PENDING:
            return
        unknown = [(f, s) for f, s, _ in batch.members if (f, s) not in batch.decoded]
        if len(unknown) > len(batch.parity):
            return
        present = [SourceSymbol(f, s, batch.decoded[(f, s)])
                   for f, s, _ in batch.members if (f, s) in batch.decoded]
        parities = [parity_from_coded(batch.parity[i]) for i in sorted(batch.parity)]
        try:
            recovered = decode_batch(present, parities)
        except InsufficientSymbols:
            return
        for sym in recovered:
            batch.decoded[(sym.flow_id, sym.seq)] = sym.payload
        batch.state = DECODED
        self.run_log.bump("tasks_decoded")
        for entry in sorted(batch.lost):
            self._send_data(entry, batch.decoded[entry], now)

    def _send_data(self, entry: Entry, payload: bytes, now: int) -> None:
        port = self._flow_port[entry[0]]
        self.env.send(port.data_link,
                      DataPacket(flow_id=entry[0], seq=entry[1],
                                 send_ts_us=now, payload=payload))
        self.run_log.bump("recovered_sent")
