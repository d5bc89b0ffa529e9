"""The broker daemon: MQTT sessions, bridge lifecycle, tree maintenance.

One asyncio event loop per broker process.  All tree-engine events are
dispatched inline on that loop, which serializes them; routing reads the
role table the engine just produced, so every publication is routed
against one consistent snapshot.

Bridge lifecycle per peer:
- configured peers get a broker-flagged CONNECT with retry/backoff
  (1 s doubling to a 30 s cap);
- an inbound broker-flagged CONNECT from a peer we have no bridge with
  triggers a reverse CONNECT to that peer's advertised listener (learned
  from the first control payload), which is how an unconfigured broker
  joins the mesh;
- when both directions race, the connection initiated by the lower
  broker identity survives and the duplicate is torn down.
"""

from __future__ import annotations

import argparse
import asyncio
import itertools
import json
import logging
import signal
import time
from dataclasses import dataclass, field

from . import codec, tree
from .broker import (
    BRIDGE_QOS,
    Inbox,
    Outbox,
    Publication,
    RetainStore,
    Session,
    SessionError,
    SubscriptionIndex,
    plan_routes,
)
from .codec import (
    BrokerId,
    Connack,
    Connect,
    Disconnect,
    Pingreq,
    Pingresp,
    Puback,
    Pubcomp,
    Publish,
    Pubrec,
    Pubrel,
    Suback,
    Subscribe,
    Will,
)
from .config import BrokerConfig, add_broker_arguments, config_from_args, read_machine_capability
from .stream import read_packet
from .topics import TopicError
from .tree import Capability, Role, TreeParams

log = logging.getLogger(__name__)

DRAIN_THRESHOLD = 256 * 1024
STATS_INTERVAL_S = 0.5
CONNECT_TIMEOUT_S = 10.0
RECONNECT_BASE_S = 1.0
RECONNECT_CAP_S = 30.0


class EventLog:
    """Append-only JSONL event stream consumed by the mesh harness."""

    def __init__(self, path: str | None):
        self._fh = open(path, "a", buffering=1) if path else None

    def emit(self, ev: str, **fields) -> None:
        if self._fh is None:
            return
        record = {"t": time.time(), "ev": ev}
        record.update(fields)
        self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass(eq=False)
class BridgeLink:
    handle: int
    reader: asyncio.StreamReader
    writer: asyncio.StreamWriter
    initiated: bool
    config_addr: tuple[str, int] | None = None
    peer_id: BrokerId | None = None
    probe_sent_at: float | None = None
    inbox: Inbox = field(default_factory=Inbox)
    outbox: Outbox = field(default_factory=Outbox)
    closed: bool = False
    # data gate: a link that just left Blocked must hold its role for a
    # hello interval before carrying publications again, so a transient
    # role disagreement cannot spin publications around a cycle
    forwarding: bool = True
    data_open_at: float = 0.0


@dataclass(eq=False)
class ClientConnection:
    session: Session
    reader: asyncio.StreamReader
    writer: asyncio.StreamWriter
    inbox: Inbox = field(default_factory=Inbox)
    outbox: Outbox = field(default_factory=Outbox)
    last_activity: float = 0.0
    graceful: bool = False
    closed: bool = False


class Broker:
    def __init__(self, cfg: BrokerConfig):
        self.cfg = cfg
        if cfg.capability_override is not None:
            cpu_mhz, ram_mb = cfg.capability_override
        else:
            cpu_mhz, ram_mb = read_machine_capability()
        self.capability = Capability.compute(cpu_mhz, ram_mb, cfg.alpha, cfg.beta)
        self.self_id = BrokerId(cfg.host, cfg.listen_port)
        params = TreeParams(keep_alive_s=cfg.keep_alive_s, cost_quantum_us=cfg.cost_quantum_us)
        self.state = tree.initial_state(self.self_id, self.capability.value, params)
        self.events = EventLog(cfg.log_file)

        self._handles = itertools.count(1)
        self.links: dict[int, BridgeLink] = {}
        self.links_by_peer: dict[BrokerId, set[int]] = {}
        self.peer_addr_to_id: dict[tuple[str, int], BrokerId] = {}
        self.reverse_issued: set[BrokerId] = set()

        self.clients: dict[str, ClientConnection] = {}
        self.index = SubscriptionIndex()
        self.retain = RetainStore()

        self.counters = {
            "bytes_in": 0, "bytes_out": 0,
            "bpdu_in": 0, "bpdu_out": 0, "bpdu_bytes": 0,
            "pubs_in": 0, "bridge_pub_sent": 0, "bridge_pub_recv": 0,
            "deliveries": 0, "blocked_drops": 0, "lwt_fired": 0,
            "tc_sent": 0, "tc_recv": 0,
        }
        self._last_tree_snapshot: tuple | None = None
        self._server: asyncio.Server | None = None
        self._tasks: set[asyncio.Task] = set()
        self._stopping = asyncio.Event()
        self._loop: asyncio.AbstractEventLoop | None = None

    @property
    def loop(self) -> asyncio.AbstractEventLoop:
        if self._loop is None:
            self._loop = asyncio.get_running_loop()
        return self._loop

    # ------------------------------------------------------------------
    # lifecycle

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._on_connection, host="0.0.0.0", port=self.cfg.listen_port)
        self.events.emit("boot", id=str(self.self_id),
                         capability=self.capability.value,
                         cpu_mhz=self.capability.cpu_mhz, ram_mb=self.capability.ram_mb)
        log.info("broker %s capability=%d listening", self.self_id, self.capability.value)
        self._spawn(self._tick_loop())
        self._spawn(self._stats_loop())
        self._spawn(self._client_sweep_loop())
        for addr in self.cfg.peers:
            self._spawn(self._peer_manager(addr))

    async def run_forever(self) -> None:
        await self.start()
        await self._stopping.wait()
        await self.shutdown()

    def request_stop(self) -> None:
        self._stopping.set()

    async def shutdown(self) -> None:
        if self._server is not None:
            self._server.close()
        self._emit_stats()
        self.events.emit("shutdown", id=str(self.self_id))
        for link in list(self.links.values()):
            self._close_link_transport(link)
        for conn in list(self.clients.values()):
            self._close_client_transport(conn)
        for task in self._tasks:
            task.cancel()
        self.events.close()

    def _spawn(self, coro) -> asyncio.Task:
        task = self.loop.create_task(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    # ------------------------------------------------------------------
    # tree engine plumbing

    def _dispatch(self, fn, *args) -> None:
        now = self.loop.time()
        self.state, actions = fn(self.state, *args, now)
        self._run_actions(actions)
        self._log_tree_change()

    def _run_actions(self, actions: list[tree.Action]) -> None:
        for action in actions:
            if isinstance(action, tree.SendBpdu):
                link = self.links.get(action.handle)
                if link is not None and not link.closed:
                    self._send_bpdu(link, action.payload)
            elif isinstance(action, tree.SetForwarding):
                entry = self.state.connections.get(action.handle)
                link = self.links.get(action.handle)
                if link is not None:
                    if action.forwarding and not link.forwarding:
                        link.data_open_at = (
                            self.loop.time() + self.state.params.hello_interval_s)
                    link.forwarding = action.forwarding
                self.events.emit(
                    "role", handle=action.handle,
                    peer=str(link.peer_id) if link and link.peer_id else None,
                    role=entry.role.value if entry else None,
                    forwarding=action.forwarding)
            elif isinstance(action, tree.CloseConnection):
                link = self.links.get(action.handle)
                if link is not None:
                    log.info("keep-alive expiry on bridge %s", action.handle)
                    self.events.emit("link_expired", handle=action.handle,
                                     peer=str(link.peer_id) if link.peer_id else None)
                    self._drop_link(link, from_engine=True)
            # ScheduleTick is satisfied by the fixed-cadence tick loop.

    def _send_bpdu(self, link: BridgeLink, payload: codec.BpduPayload) -> None:
        data = codec.encode_packet(Pingreq(bpdu=payload))
        self._write_link(link, data)
        self.counters["bpdu_out"] += 1
        self.counters["bpdu_bytes"] += len(data)
        if payload.tc:
            self.counters["tc_sent"] += 1
            self.events.emit("tc_tx", handle=link.handle)
        if link.probe_sent_at is None:
            link.probe_sent_at = self.loop.time()

    def _log_tree_change(self) -> None:
        root_handle = self.state.root_handle()
        parent = None
        if root_handle is not None:
            link = self.links.get(root_handle)
            parent = str(link.peer_id) if link and link.peer_id else None
        snapshot = (str(self.state.believed_root), self.state.root_path_cost_us, parent)
        if snapshot != self._last_tree_snapshot:
            self._last_tree_snapshot = snapshot
            self.events.emit("tree", root=snapshot[0], cost_us=snapshot[1], parent=snapshot[2])

    async def _tick_loop(self) -> None:
        cadence = min(1.0, self.state.params.hello_interval_s)
        while True:
            await asyncio.sleep(cadence)
            self._dispatch(tree.tick)

    async def _stats_loop(self) -> None:
        while True:
            await asyncio.sleep(STATS_INTERVAL_S)
            self._emit_stats()

    def _emit_stats(self) -> None:
        self.events.emit("stats", **self.counters)

    # ------------------------------------------------------------------
    # connection handling

    async def _on_connection(self, reader: asyncio.StreamReader,
                             writer: asyncio.StreamWriter) -> None:
        try:
            packet, nbytes = await asyncio.wait_for(read_packet(reader), CONNECT_TIMEOUT_S)
            self.counters["bytes_in"] += nbytes
        except (asyncio.IncompleteReadError, asyncio.TimeoutError,
                codec.CodecError, ConnectionError):
            writer.close()
            return
        if not isinstance(packet, Connect):
            writer.close()
            return
        if packet.broker_flag:
            await self._accept_bridge(packet, reader, writer)
        else:
            await self._accept_client(packet, reader, writer)

    # -- bridges -------------------------------------------------------

    async def _accept_bridge(self, pkt: Connect, reader, writer) -> None:
        data = codec.encode_packet(Connack())
        writer.write(data)
        self.counters["bytes_out"] += len(data)
        link = self._register_link(reader, writer, initiated=False, config_addr=None)
        await self._bridge_loop(link)

    def _register_link(self, reader, writer, initiated: bool,
                       config_addr: tuple[str, int] | None) -> BridgeLink:
        handle = next(self._handles)
        link = BridgeLink(handle=handle, reader=reader, writer=writer,
                          initiated=initiated, config_addr=config_addr)
        self.links[handle] = link
        self.events.emit("link_up", handle=handle, initiated=initiated,
                         config_addr=f"{config_addr[0]}:{config_addr[1]}" if config_addr else None)
        self._dispatch(tree.on_connection_up, handle)
        return link

    async def _bridge_loop(self, link: BridgeLink) -> None:
        try:
            while not link.closed:
                packet, nbytes = await read_packet(link.reader)
                self.counters["bytes_in"] += nbytes
                await self._on_bridge_packet(link, packet, nbytes)
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        except (codec.CodecError, SessionError, TopicError) as exc:
            log.warning("bridge %s protocol error: %s", link.handle, exc)
        finally:
            self._drop_link(link)

    async def _on_bridge_packet(self, link: BridgeLink, packet, nbytes: int) -> None:
        if isinstance(packet, Pingreq):
            self._write_link(link, codec.encode_packet(Pingresp()))
            if packet.bpdu is not None:
                self.counters["bpdu_in"] += 1
                self.counters["bpdu_bytes"] += nbytes
                self._on_bridge_bpdu(link, packet.bpdu)
        elif isinstance(packet, Pingresp):
            if link.probe_sent_at is not None:
                sample_us = int((self.loop.time() - link.probe_sent_at) * 1e6)
                link.probe_sent_at = None
                self._dispatch(tree.on_rtt_sample, link.handle, sample_us)
        elif isinstance(packet, Publish):
            await self._on_bridge_publish(link, packet)
        elif isinstance(packet, Pubrec):
            if link.outbox.on_pubrec(packet.packet_id):
                self._write_link(link, codec.encode_packet(Pubrel(packet.packet_id)))
        elif isinstance(packet, Pubrel):
            link.inbox.on_pubrel(packet.packet_id)  # raises SessionError if unknown
            self._write_link(link, codec.encode_packet(Pubcomp(packet.packet_id)))
        elif isinstance(packet, Pubcomp):
            self._flush_outbox(link.outbox, lambda d: self._write_link(link, d),
                               packet.packet_id, kind="pubcomp", bridge=link)
        elif isinstance(packet, Puback):
            self._flush_outbox(link.outbox, lambda d: self._write_link(link, d),
                               packet.packet_id, kind="puback", bridge=link)
        elif isinstance(packet, Disconnect):
            raise asyncio.IncompleteReadError(b"", 0)
        else:
            raise SessionError(f"unexpected {type(packet).__name__} on a bridge")

    def _on_bridge_bpdu(self, link: BridgeLink, bpdu: codec.BpduPayload) -> None:
        if bpdu.tc:
            self.counters["tc_recv"] += 1
            self.events.emit("tc_rx", handle=link.handle, sender=str(bpdu.sender))
        if link.peer_id is None:
            self._identify_link(link, bpdu.sender)
            if link.closed:
                return
        self._dispatch(tree.on_bpdu, link.handle, bpdu)

    def _identify_link(self, link: BridgeLink, peer_id: BrokerId) -> None:
        link.peer_id = peer_id
        self.links_by_peer.setdefault(peer_id, set()).add(link.handle)
        if link.config_addr is not None:
            self.peer_addr_to_id[link.config_addr] = peer_id
        self.events.emit("link_identified", handle=link.handle, peer=str(peer_id))
        self._dedup_links(peer_id)
        if link.closed:
            return
        if not link.initiated and self._should_reverse_connect(link, peer_id):
            self.reverse_issued.add(peer_id)
            self.events.emit("reverse_connect", peer=str(peer_id))
            self._spawn(self._reverse_connect(peer_id))

    def _should_reverse_connect(self, link: BridgeLink, peer_id: BrokerId) -> bool:
        if peer_id in self.reverse_issued:
            return False
        others = self.links_by_peer.get(peer_id, set()) - {link.handle}
        if others:
            return False
        if (peer_id.ip, peer_id.port) in self.cfg.peers:
            return False  # an outbound manager already covers this peer
        return True

    def _dedup_links(self, peer_id: BrokerId) -> None:
        """Keep one bridge per peer: the connection whose initiator has
        the lower broker identity wins."""
        handles = sorted(self.links_by_peer.get(peer_id, set()))
        if len(handles) <= 1:
            return
        preferred_initiator = min(self.self_id, peer_id, key=BrokerId.key)

        def rank(h: int) -> tuple[int, int]:
            link = self.links[h]
            initiator = self.self_id if link.initiated else peer_id
            return (0 if initiator == preferred_initiator else 1, h)

        keeper = min(handles, key=rank)
        for h in handles:
            if h != keeper:
                log.info("deduplicating bridge %s to %s (keeping %s)", h, peer_id, keeper)
                self.events.emit("link_dedup", dropped=h, kept=keeper, peer=str(peer_id))
                self._drop_link(self.links[h])

    def _drop_link(self, link: BridgeLink, from_engine: bool = False) -> None:
        if link.closed:
            return
        link.closed = True
        self.links.pop(link.handle, None)
        if link.peer_id is not None:
            peers = self.links_by_peer.get(link.peer_id)
            if peers is not None:
                peers.discard(link.handle)
                if not peers:
                    del self.links_by_peer[link.peer_id]
        self.events.emit("link_down", handle=link.handle,
                         peer=str(link.peer_id) if link.peer_id else None)
        self._close_link_transport(link)
        if not from_engine:
            self._dispatch(tree.on_link_down, link.handle)

    def _close_link_transport(self, link: BridgeLink) -> None:
        try:
            link.writer.close()
        except Exception:
            pass

    async def _peer_manager(self, addr: tuple[str, int]) -> None:
        """Keep one outbound bridge alive toward a configured peer."""
        backoff = RECONNECT_BASE_S
        while True:
            if self._has_live_bridge(addr):
                backoff = RECONNECT_BASE_S
                await asyncio.sleep(1.0)
                continue
            try:
                link = await self._dial_bridge(addr, config_addr=addr)
            except (OSError, asyncio.TimeoutError, codec.CodecError, ConnectionError) as exc:
                log.debug("bridge dial to %s failed: %s", addr, exc)
                await asyncio.sleep(backoff)
                backoff = min(backoff * 2, RECONNECT_CAP_S)
                continue
            backoff = RECONNECT_BASE_S
            await self._bridge_loop(link)
            await asyncio.sleep(RECONNECT_BASE_S)

    def _has_live_bridge(self, addr: tuple[str, int]) -> bool:
        peer_id = self.peer_addr_to_id.get(addr)
        if peer_id is not None and self.links_by_peer.get(peer_id):
            return True
        return any(l.config_addr == addr and not l.closed for l in self.links.values())

    async def _dial_bridge(self, addr: tuple[str, int],
                           config_addr: tuple[str, int] | None) -> BridgeLink:
        reader, writer = await asyncio.wait_for(
            asyncio.open_connection(addr[0], addr[1]), CONNECT_TIMEOUT_S)
        connect = Connect(
            client_id=f"bridge:{self.self_id}",
            version_byte=codec.set_broker_flag(0x05),
            keep_alive_s=int(self.cfg.keep_alive_s),
        )
        data = codec.encode_packet(connect)
        writer.write(data)
        self.counters["bytes_out"] += len(data)
        packet, nbytes = await asyncio.wait_for(read_packet(reader), CONNECT_TIMEOUT_S)
        self.counters["bytes_in"] += nbytes
        if not isinstance(packet, Connack) or packet.return_code != codec.CONNACK_ACCEPTED:
            writer.close()
            raise ConnectionError(f"bridge to {addr} refused: {packet}")
        return self._register_link(reader, writer, initiated=True, config_addr=config_addr)

    async def _reverse_connect(self, peer_id: BrokerId) -> None:
        """Connect back to the advertised listener of an inbound peer so
        both sides own a configured-style bridge; the duplicate resolver
        picks the survivor."""
        try:
            link = await self._dial_bridge((peer_id.ip, peer_id.port), config_addr=None)
        except (OSError, asyncio.TimeoutError, codec.CodecError, ConnectionError) as exc:
            log.info("reverse connect to %s failed: %s", peer_id, exc)
            self.reverse_issued.discard(peer_id)
            return
        await self._bridge_loop(link)
        self.reverse_issued.discard(peer_id)

    # -- clients -------------------------------------------------------

    async def _accept_client(self, pkt: Connect, reader, writer) -> None:
        session = Session(client_id=pkt.client_id, keep_alive_s=pkt.keep_alive_s, will=pkt.will)
        conn = ClientConnection(session=session, reader=reader, writer=writer,
                                last_activity=self.loop.time())
        old = self.clients.get(pkt.client_id)
        if old is not None:
            # Standard takeover: the existing session ends without a
            # DISCONNECT, so its will fires.
            await self._end_client(old, graceful=False)
        self.clients[pkt.client_id] = conn
        self._write_client(conn, codec.encode_packet(Connack()))
        try:
            while not conn.closed:
                packet, nbytes = await read_packet(conn.reader)
                self.counters["bytes_in"] += nbytes
                conn.last_activity = self.loop.time()
                await self._on_client_packet(conn, packet)
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        except (codec.CodecError, SessionError, TopicError) as exc:
            log.warning("client %s error: %s", session.client_id, exc)
        finally:
            await self._end_client(conn, graceful=conn.graceful)

    async def _on_client_packet(self, conn: ClientConnection, packet) -> None:
        if isinstance(packet, Publish):
            await self._on_client_publish(conn, packet)
        elif isinstance(packet, Subscribe):
            self._on_client_subscribe(conn, packet)
        elif isinstance(packet, Pubrel):
            conn.inbox.on_pubrel(packet.packet_id)
            self._write_client(conn, codec.encode_packet(Pubcomp(packet.packet_id)))
        elif isinstance(packet, Pubrec):
            if conn.outbox.on_pubrec(packet.packet_id):
                self._write_client(conn, codec.encode_packet(Pubrel(packet.packet_id)))
        elif isinstance(packet, Pubcomp):
            self._flush_outbox(conn.outbox, lambda d: self._write_client(conn, d),
                               packet.packet_id, kind="pubcomp")
        elif isinstance(packet, Puback):
            self._flush_outbox(conn.outbox, lambda d: self._write_client(conn, d),
                               packet.packet_id, kind="puback")
        elif isinstance(packet, Pingreq):
            self._write_client(conn, codec.encode_packet(Pingresp()))
        elif isinstance(packet, Disconnect):
            conn.graceful = True
            raise asyncio.IncompleteReadError(b"", 0)
        elif isinstance(packet, Connect):
            raise SessionError("second CONNECT on an open session")
        else:
            raise SessionError(f"unexpected {type(packet).__name__} from a client")

    async def _on_client_publish(self, conn: ClientConnection, pkt: Publish) -> None:
        pub = Publication(topic=pkt.topic, payload=pkt.payload, qos=pkt.qos,
                          retain=pkt.retain, origin=None)
        if pkt.qos == 0:
            await self._publish(pub)
        elif pkt.qos == 1:
            await self._publish(pub)
            self._write_client(conn, codec.encode_packet(Puback(pkt.packet_id)))
        else:
            if conn.inbox.on_publish(pkt.packet_id):
                await self._publish(pub)
            self._write_client(conn, codec.encode_packet(Pubrec(pkt.packet_id)))

    def _on_client_subscribe(self, conn: ClientConnection, pkt: Subscribe) -> None:
        granted = []
        new_filters = []
        for filter_text, qos in pkt.filters:
            qos = min(qos, 2)
            try:
                self.index.subscribe(conn.session, filter_text, qos)
            except TopicError:
                granted.append(0x80)
                continue
            granted.append(qos)
            new_filters.append((filter_text, qos))
        self._write_client(conn, codec.encode_packet(
            Suback(packet_id=pkt.packet_id, return_codes=tuple(granted))))
        for filter_text, qos in new_filters:
            parsed = conn.session.subscriptions[filter_text][0]
            for pub in self.retain.matching(parsed):
                self._deliver(conn, pub, min(pub.qos, qos), retain_flag=True)

    async def _end_client(self, conn: ClientConnection, graceful: bool) -> None:
        if conn.closed:
            return
        conn.closed = True
        if self.clients.get(conn.session.client_id) is conn:
            del self.clients[conn.session.client_id]
        self.index.drop_session(conn.session)
        self._close_client_transport(conn)
        if not graceful and conn.session.will is not None:
            self.counters["lwt_fired"] += 1
            will = conn.session.will
            self.events.emit("lwt", client=conn.session.client_id, topic=will.topic)
            await self._publish(Publication(topic=will.topic, payload=will.payload,
                                            qos=will.qos, retain=will.retain, origin=None))

    def _close_client_transport(self, conn: ClientConnection) -> None:
        try:
            conn.writer.close()
        except Exception:
            pass

    async def _sweep_clients(self) -> None:
        now = self.loop.time()
        for conn in list(self.clients.values()):
            ka = conn.session.keep_alive_s
            if ka > 0 and now - conn.last_activity > 1.5 * ka:
                log.info("client %s keep-alive expired", conn.session.client_id)
                await self._end_client(conn, graceful=False)

    async def _client_sweep_loop(self) -> None:
        while True:
            await asyncio.sleep(1.0)
            await self._sweep_clients()

    # ------------------------------------------------------------------
    # data plane

    async def _on_bridge_publish(self, link: BridgeLink, pkt: Publish) -> None:
        self.counters["bridge_pub_recv"] += 1
        gated = self.loop.time() < link.data_open_at
        if gated:
            self.counters["blocked_drops"] += 1
        pub = Publication(topic=pkt.topic, payload=pkt.payload, qos=pkt.qos,
                          retain=pkt.retain, origin=link.handle)
        if pkt.qos == 0:
            if not gated:
                await self._publish(pub)
        elif pkt.qos == 1:
            if not gated:
                await self._publish(pub)
            self._write_link(link, codec.encode_packet(Puback(pkt.packet_id)))
        else:
            if link.inbox.on_publish(pkt.packet_id) and not gated:
                await self._publish(pub)
            self._write_link(link, codec.encode_packet(Pubrec(pkt.packet_id)))

    async def _publish(self, pub: Publication) -> None:
        """Flood one publication: local matching clients plus every
        non-blocked bridge except the one it arrived on."""
        self.counters["pubs_in"] += 1
        roles = {h: e.role for h, e in self.state.connections.items()}
        deliver, forwards = plan_routes(pub.origin, roles)
        if not deliver:
            self.counters["blocked_drops"] += 1
            return
        self.retain.apply(pub)
        for session, sub_qos in self.index.match(pub.topic).items():
            conn = self.clients.get(session.client_id)
            if conn is None or conn.closed:
                continue
            self._deliver(conn, pub, min(pub.qos, sub_qos), retain_flag=False)
        now = self.loop.time()
        for handle in forwards:
            link = self.links.get(handle)
            if link is None or link.closed or now < link.data_open_at:
                continue
            self._forward(link, pub)
        if self._needs_drain():
            await self._drain_writers()

    def _deliver(self, conn: ClientConnection, pub: Publication, qos: int,
                 retain_flag: bool) -> None:
        publish = Publish(topic=pub.topic, payload=pub.payload, qos=qos,
                          retain=retain_flag)
        for pkt in conn.outbox.send(publish):
            self._write_client(conn, codec.encode_packet(pkt))
            self.counters["deliveries"] += 1

    def _forward(self, link: BridgeLink, pub: Publication) -> None:
        publish = Publish(topic=pub.topic, payload=pub.payload, qos=BRIDGE_QOS,
                          retain=pub.retain)
        for pkt in link.outbox.send(publish):
            self._write_link(link, codec.encode_packet(pkt))
            self.counters["bridge_pub_sent"] += 1

    def _flush_outbox(self, outbox: Outbox, write, packet_id: int, kind: str,
                      bridge: BridgeLink | None = None) -> None:
        ready = outbox.on_pubcomp(packet_id) if kind == "pubcomp" else outbox.on_puback(packet_id)
        for pkt in ready:
            write(codec.encode_packet(pkt))
            if bridge is not None:
                self.counters["bridge_pub_sent"] += 1
            else:
                self.counters["deliveries"] += 1

    # ------------------------------------------------------------------
    # write helpers

    def _write_link(self, link: BridgeLink, data: bytes) -> None:
        if link.closed:
            return
        try:
            link.writer.write(data)
            self.counters["bytes_out"] += len(data)
        except Exception:
            pass

    def _write_client(self, conn: ClientConnection, data: bytes) -> None:
        if conn.closed:
            return
        try:
            conn.writer.write(data)
            self.counters["bytes_out"] += len(data)
        except Exception:
            pass

    def _congested_writers(self) -> list[asyncio.StreamWriter]:
        out = []
        for conn in self.clients.values():
            if not conn.closed:
                out.append(conn.writer)
        for link in self.links.values():
            if not link.closed:
                out.append(link.writer)
        return [w for w in out
                if w.transport and w.transport.get_write_buffer_size() > DRAIN_THRESHOLD]

    def _needs_drain(self) -> bool:
        return bool(self._congested_writers())

    async def _drain_writers(self) -> None:
        for writer in self._congested_writers():
            try:
                await writer.drain()
            except Exception:
                pass


async def _amain(cfg: BrokerConfig) -> None:
    broker = Broker(cfg)
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, broker.request_stop)
    await broker.run_forever()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="treemq-broker",
        description="MQTT broker that self-organizes into a loop-free mesh")
    add_broker_arguments(parser)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    cfg = config_from_args(args)
    try:
        asyncio.run(_amain(cfg))
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    import sys

    sys.exit(main())
