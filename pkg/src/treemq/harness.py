"""Mesh experiment orchestration.

Spawns one broker process per topology entry, wires links through
per-direction delay proxies, waits for the election to quiesce, checks
the converged tree against the global oracle, runs measurement
workloads, and can kill and restore brokers mid-run.

Topology files are line oriented::

    scenario distributed          # benchmark | distributed | locality <pct>
    keep_alive 4
    cost_quantum_us 1000
    seed 7
    broker a 0 capability 3400 16384    # port 0 = auto-assign
    broker b 0 capability 2400 8192
    link a b 35                   # one-way delay in ms (0 = direct)
    client_delay a 75             # optional client-site access delay
    workload publishers 10 subscribers 30 size 64 topics 10 duration 5 qos 2
    event fail a 10               # seconds after the workload starts
    event restore a 20

Reports land in a directory: per-broker configs/logs, ``tree.csv``,
``oracle.csv``, ``timeline.csv``, ``phases.csv``, ``metrics.csv`` and a
text summary.  Exit code 0 means every verification passed.
"""

from __future__ import annotations

import argparse
import asyncio
import csv
import json
import logging
import shutil
import signal
import socket
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import oracle
from .codec import BrokerId
from .config import ConfigError
from .proxy import DelayProxy
from .tree import compute_capability

log = logging.getLogger(__name__)

CONVERGE_TIMEOUT_S = 60.0
QUIESCENCE_HELLO_MULTIPLE = 3
CHANGE_EVENTS = {"role", "tree", "link_up", "link_down", "link_identified",
                 "link_expired", "link_dedup", "tc_rx", "boot"}


@dataclass
class BrokerSpec:
    name: str
    port: int = 0
    capability: tuple[int, int] | None = None  # (cpu MHz, ram MB)
    host: str = "127.0.0.1"


@dataclass
class LinkSpec:
    a: str
    b: str
    delay_ms: float = 0.0


@dataclass
class WorkloadSpec:
    publishers: int = 0
    subscribers: int = 0
    size: int = 64
    topics: int = 10
    duration: float = 5.0
    qos: int = 2
    sub_qos: int = 0


@dataclass
class ScenarioEvent:
    action: str  # fail | restore
    broker: str
    at_s: float


@dataclass
class TopologySpec:
    scenario: str = "distributed"
    locality_percent: int = 100
    keep_alive: float = 4.0
    cost_quantum_us: int = 1000
    seed: int = 0
    brokers: list[BrokerSpec] = field(default_factory=list)
    links: list[LinkSpec] = field(default_factory=list)
    client_delays: dict[str, float] = field(default_factory=dict)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    events: list[ScenarioEvent] = field(default_factory=list)

    def validate(self) -> None:
        names = {b.name for b in self.brokers}
        if len(names) != len(self.brokers):
            raise ConfigError("duplicate broker names")
        for link in self.links:
            if link.a not in names or link.b not in names:
                raise ConfigError(f"link references unknown broker: {link}")
        if self.scenario == "benchmark" and len(self.brokers) != 1:
            raise ConfigError("benchmark scenario needs exactly one broker")
        for ev in self.events:
            if ev.broker not in names:
                raise ConfigError(f"event references unknown broker {ev.broker!r}")


def parse_topology(text: str) -> TopologySpec:
    spec = TopologySpec()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *args = line.split()
        try:
            _apply_topology_key(spec, key, args)
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    spec.validate()
    return spec


def _apply_topology_key(spec: TopologySpec, key: str, args: list[str]) -> None:
    if key == "scenario":
        spec.scenario = args[0]
        if args[0] == "locality":
            spec.locality_percent = int(args[1])
    elif key == "keep_alive":
        spec.keep_alive = float(args[0])
    elif key == "cost_quantum_us":
        spec.cost_quantum_us = int(args[0])
    elif key == "seed":
        spec.seed = int(args[0])
    elif key == "broker":
        b = BrokerSpec(name=args[0], port=int(args[1]))
        if len(args) > 2:
            if args[2] != "capability":
                raise ConfigError(f"unexpected token {args[2]!r}")
            b.capability = (int(args[3]), int(args[4]))
        spec.brokers.append(b)
    elif key == "link":
        spec.links.append(LinkSpec(a=args[0], b=args[1], delay_ms=float(args[2])))
    elif key == "client_delay":
        spec.client_delays[args[0]] = float(args[1])
    elif key == "workload":
        fields = dict(zip(args[::2], args[1::2]))
        w = spec.workload
        w.publishers = int(fields.get("publishers", w.publishers))
        w.subscribers = int(fields.get("subscribers", w.subscribers))
        w.size = int(fields.get("size", w.size))
        w.topics = int(fields.get("topics", w.topics))
        w.duration = float(fields.get("duration", w.duration))
        w.qos = int(fields.get("qos", w.qos))
        w.sub_qos = int(fields.get("sub_qos", w.sub_qos))
    elif key == "event":
        spec.events.append(ScenarioEvent(action=args[0], broker=args[1], at_s=float(args[2])))
    else:
        raise ConfigError(f"unknown key {key!r}")


def serialize_topology(topo: TopologySpec) -> str:
    lines = []
    if topo.scenario == "locality":
        lines.append(f"scenario locality {topo.locality_percent}")
    else:
        lines.append(f"scenario {topo.scenario}")
    lines.append(f"keep_alive {topo.keep_alive}")
    lines.append(f"cost_quantum_us {topo.cost_quantum_us}")
    lines.append(f"seed {topo.seed}")
    for b in topo.brokers:
        suffix = f" capability {b.capability[0]} {b.capability[1]}" if b.capability else ""
        lines.append(f"broker {b.name} {b.port}{suffix}")
    for link in topo.links:
        lines.append(f"link {link.a} {link.b} {link.delay_ms:g}")
    for name, delay in topo.client_delays.items():
        lines.append(f"client_delay {name} {delay:g}")
    w = topo.workload
    lines.append(f"workload publishers {w.publishers} subscribers {w.subscribers} "
                 f"size {w.size} topics {w.topics} duration {w.duration:g} "
                 f"qos {w.qos} sub_qos {w.sub_qos}")
    for ev in topo.events:
        lines.append(f"event {ev.action} {ev.broker} {ev.at_s:g}")
    return "\n".join(lines) + "\n"


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def quantized_link_cost(delay_ms: float, quantum_us: int) -> int:
    """The path cost the engine will see for an injected one-way delay:
    round-trip microseconds floored onto the quantum lattice, minimum one
    quantum."""
    rtt_us = int(2 * delay_ms * 1000)
    if quantum_us <= 1:
        return max(1, rtt_us)
    return max(quantum_us, (rtt_us // quantum_us) * quantum_us)


@dataclass
class VerifyResult:
    ok: bool
    expected_root: str
    got_root: str | None
    expected_edges: set[frozenset]
    got_edges: set[frozenset]

    @property
    def missing_edges(self) -> list[tuple]:
        return sorted(tuple(sorted(e)) for e in self.expected_edges - self.got_edges)

    @property
    def extra_edges(self) -> list[tuple]:
        return sorted(tuple(sorted(e)) for e in self.got_edges - self.expected_edges)

    def describe(self) -> str:
        if self.ok:
            return f"PASS root={self.expected_root} edges={sorted(map(tuple, map(sorted, self.expected_edges)))}"
        parts = [f"FAIL expected root={self.expected_root} got={self.got_root}"]
        if self.missing_edges:
            parts.append(f"missing edges: {self.missing_edges}")
        if self.extra_edges:
            parts.append(f"unexpected edges: {self.extra_edges}")
        return "; ".join(parts)


def expected_tree_for(topo: TopologySpec, capabilities: dict[str, int],
                      alive: set[str] | None = None) -> oracle.OracleTree:
    alive = alive if alive is not None else {b.name for b in topo.brokers}
    ids = {b.name: BrokerId(b.host, b.port) for b in topo.brokers if b.name in alive}
    caps = {n: capabilities[n] for n in ids}
    keys = {n: bid.key() for n, bid in ids.items()}
    links = {}
    for link in topo.links:
        if link.a in alive and link.b in alive:
            links[frozenset((link.a, link.b))] = quantized_link_cost(
                link.delay_ms, topo.cost_quantum_us)
    return oracle.expected_tree(caps, keys, links)


def verify_tree(topo: TopologySpec, capabilities: dict[str, int],
                parents: dict[str, str | None],
                alive: set[str] | None = None) -> VerifyResult:
    expected = expected_tree_for(topo, capabilities, alive)
    got_edges = {frozenset((n, p)) for n, p in parents.items() if p is not None}
    got_roots = [n for n, p in parents.items() if p is None]
    got_root = got_roots[0] if len(got_roots) == 1 else None
    ok = (got_edges == expected.edges()) and (got_root == expected.root)
    return VerifyResult(ok=ok, expected_root=expected.root, got_root=got_root,
                        expected_edges=expected.edges(), got_edges=got_edges)


@dataclass(eq=False)
class ManagedBroker:
    spec: BrokerSpec
    config_path: Path
    log_path: Path
    stdout_path: Path
    proc: asyncio.subprocess.Process | None = None
    intentionally_down: bool = False

    @property
    def alive(self) -> bool:
        return self.proc is not None and self.proc.returncode is None


class Mesh:
    """A set of broker processes joined per the topology."""

    def __init__(self, topo: TopologySpec, report_dir: Path):
        self.topo = topo
        self.report_dir = Path(report_dir)
        self.report_dir.mkdir(parents=True, exist_ok=True)
        (self.report_dir / "brokers").mkdir(exist_ok=True)
        for b in topo.brokers:
            if b.port == 0:
                b.port = free_port()
        self.by_name = {b.name: b for b in topo.brokers}
        self.ids = {b.name: BrokerId(b.host, b.port) for b in topo.brokers}
        self.names_by_id = {str(v): k for k, v in self.ids.items()}
        self.brokers: dict[str, ManagedBroker] = {}
        self.proxies: list[DelayProxy] = []
        self.client_ports: dict[str, int] = {}
        self.phases: list[tuple[float, str]] = []
        self._capabilities: dict[str, int] = {}
        self.quiescence_window_s: float | None = None  # default: 3 half-keep-alives

    # ------------------------------------------------------------------

    def phase(self, label: str) -> None:
        self.phases.append((time.time(), label))
        log.info("phase: %s", label)

    def client_endpoint(self, name: str) -> tuple[str, int]:
        if name in self.client_ports:
            return ("127.0.0.1", self.client_ports[name])
        return (self.by_name[name].host, self.by_name[name].port)

    async def start(self) -> None:
        peers: dict[str, list[tuple[str, int]]] = {b.name: [] for b in self.topo.brokers}
        for link in self.topo.links:
            for src, dst in ((link.a, link.b), (link.b, link.a)):
                target = self.by_name[dst]
                if link.delay_ms > 0:
                    port = free_port()
                    proxy = DelayProxy("127.0.0.1", port, target.host, target.port,
                                       delay_s=link.delay_ms / 1000.0)
                    await proxy.start()
                    self.proxies.append(proxy)
                    peers[src].append(("127.0.0.1", port))
                else:
                    peers[src].append((target.host, target.port))
        for name, delay_ms in self.topo.client_delays.items():
            if delay_ms <= 0:
                continue
            target = self.by_name[name]
            port = free_port()
            proxy = DelayProxy("127.0.0.1", port, target.host, target.port,
                               delay_s=delay_ms / 1000.0)
            await proxy.start()
            self.proxies.append(proxy)
            self.client_ports[name] = port

        for b in self.topo.brokers:
            config_path = self.report_dir / "brokers" / f"{b.name}.conf"
            log_path = self.report_dir / "brokers" / f"{b.name}.jsonl"
            stdout_path = self.report_dir / "brokers" / f"{b.name}.out"
            lines = [
                f"host {b.host}",
                f"listen_port {b.port}",
                f"keep_alive {self.topo.keep_alive}",
                f"cost_quantum_us {self.topo.cost_quantum_us}",
                f"log_file {log_path}",
            ]
            if b.capability is not None:
                lines.append(f"capability {b.capability[0]} {b.capability[1]}")
            for host, port in peers[b.name]:
                lines.append(f"peer {host}:{port}")
            config_path.write_text("\n".join(lines) + "\n")
            self.brokers[b.name] = ManagedBroker(
                spec=b, config_path=config_path, log_path=log_path,
                stdout_path=stdout_path)
        self.phase("boot")
        for name in self.brokers:
            await self.spawn(name)

    async def spawn(self, name: str) -> None:
        managed = self.brokers[name]
        out = open(managed.stdout_path, "ab")
        managed.proc = await asyncio.create_subprocess_exec(
            sys.executable, "-m", "treemq.server", "--config", str(managed.config_path),
            stdout=out, stderr=asyncio.subprocess.STDOUT)
        out.close()
        managed.intentionally_down = False

    async def kill(self, name: str) -> None:
        """Ungraceful failure: SIGKILL, sockets die with the process."""
        managed = self.brokers[name]
        if managed.alive:
            managed.proc.kill()
            await managed.proc.wait()
        managed.intentionally_down = True
        self.phase(f"fail {name}")

    async def restore(self, name: str) -> None:
        await self.spawn(name)
        self.phase(f"restore {name}")

    async def stop(self) -> None:
        for managed in self.brokers.values():
            if managed.alive:
                managed.proc.send_signal(signal.SIGTERM)
        for managed in self.brokers.values():
            if managed.proc is not None:
                try:
                    await asyncio.wait_for(managed.proc.wait(), 5)
                except asyncio.TimeoutError:
                    managed.proc.kill()
                    await managed.proc.wait()
        for proxy in self.proxies:
            await proxy.stop()

    def crashed(self) -> list[str]:
        return [n for n, m in self.brokers.items()
                if not m.alive and not m.intentionally_down and m.proc is not None]

    # ------------------------------------------------------------------
    # event-log digestion

    def events(self, name: str) -> list[dict]:
        path = self.brokers[name].log_path
        if not path.exists():
            return []
        out = []
        for line in path.read_text().splitlines():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                continue  # torn final line from a killed process
        return out

    def alive_names(self) -> set[str]:
        return {n for n, m in self.brokers.items() if m.alive}

    def capabilities(self) -> dict[str, int]:
        for name in self.brokers:
            if name not in self._capabilities:
                for ev in self.events(name):
                    if ev["ev"] == "boot":
                        self._capabilities[name] = ev["capability"]
                        break
        return dict(self._capabilities)

    def tree_view(self) -> tuple[dict[str, str | None], dict[str, str], float]:
        """Latest parent and root claim per live broker, plus the wall
        time of the most recent topology-affecting event anywhere."""
        parents: dict[str, str | None] = {}
        roots: dict[str, str] = {}
        last_change = 0.0
        for name in self.alive_names():
            managed = self.brokers[name]
            boot_at = 0.0
            events = self.events(name)
            for ev in events:
                if ev["ev"] == "boot":
                    boot_at = ev["t"]
            for ev in events:
                if ev["t"] < boot_at:
                    continue  # an earlier life of a restored broker
                if ev["ev"] in CHANGE_EVENTS:
                    last_change = max(last_change, ev["t"])
                if ev["ev"] == "tree":
                    roots[name] = ev["root"]
                    parent_id = ev.get("parent")
                    parents[name] = self.names_by_id.get(parent_id) if parent_id else None
        return parents, roots, last_change

    def quiesced_tree(self) -> dict[str, str | None] | None:
        """The converged parent map, or None while still moving."""
        alive = self.alive_names()
        parents, roots, last_change = self.tree_view()
        if set(parents) != alive or not alive:
            return None
        window = self.quiescence_window_s
        if window is None:
            window = QUIESCENCE_HELLO_MULTIPLE * (self.topo.keep_alive / 2)
        if time.time() - last_change < window:
            return None
        if len(set(roots.values())) != 1:
            return None
        root_name = self.names_by_id.get(next(iter(roots.values())))
        if root_name not in alive or parents.get(root_name) is not None:
            return None
        return parents

    async def wait_converged(self, timeout: float = CONVERGE_TIMEOUT_S) -> dict[str, str | None]:
        deadline = time.time() + timeout
        while time.time() < deadline:
            crashed = self.crashed()
            if crashed:
                raise RuntimeError(f"broker(s) crashed: {crashed}")
            parents = self.quiesced_tree()
            if parents is not None:
                self.phase("converged")
                return parents
            await asyncio.sleep(0.25)
        parents, roots, _ = self.tree_view()
        raise TimeoutError(
            f"mesh did not quiesce in {timeout}s: parents={parents} roots={roots}")

    def stats_rows(self) -> list[dict]:
        rows = []
        for name in self.brokers:
            for ev in self.events(name):
                if ev["ev"] == "stats":
                    row = {"t": ev["t"], "broker": name}
                    row.update({k: v for k, v in ev.items() if k not in ("t", "ev")})
                    rows.append(row)
        rows.sort(key=lambda r: r["t"])
        return rows

    def latest_counters(self) -> dict[str, dict]:
        latest: dict[str, dict] = {}
        for row in self.stats_rows():
            latest[row["broker"]] = row
        return latest


# ----------------------------------------------------------------------
# workload placement

def workload_targets(topo: TopologySpec, mesh: Mesh) -> dict[str, tuple[int, int]]:
    """Map broker name -> (publishers, subscribers) per the scenario."""
    w = topo.workload
    names = [b.name for b in topo.brokers]
    placement = {n: [0, 0] for n in names}
    if topo.scenario == "benchmark" or len(names) == 1:
        placement[names[0]] = [w.publishers, w.subscribers]
    elif topo.scenario == "distributed":
        for i in range(w.publishers):
            placement[names[i % len(names)]][0] += 1
        for i in range(w.subscribers):
            placement[names[i % len(names)]][1] += 1
    elif topo.scenario == "locality":
        placement[names[0]][0] = w.publishers
        local_subs = w.subscribers * topo.locality_percent // 100
        placement[names[0]][1] = local_subs
        rest = names[1:] or names[:1]
        for i in range(w.subscribers - local_subs):
            placement[rest[i % len(rest)]][1] += 1
    else:
        raise ConfigError(f"unknown scenario {topo.scenario!r}")
    return {n: tuple(v) for n, v in placement.items() if v != [0, 0]}


async def run_bench_processes(topo: TopologySpec, mesh: Mesh,
                              out_dir: Path) -> list[dict]:
    """One bench process per broker that hosts clients; returns their
    result.json payloads."""
    placement = workload_targets(topo, mesh)
    procs = []
    result_dirs = []
    for i, (name, (pubs, subs)) in enumerate(sorted(placement.items())):
        host, port = mesh.client_endpoint(name)
        bench_dir = out_dir / f"bench-{name}"
        result_dirs.append(bench_dir)
        cmd = [
            sys.executable, "-m", "treemq.bench",
            "--target", f"{host}:{port}:{pubs}:{subs}",
            "--size", str(topo.workload.size),
            "--topics", str(topo.workload.topics),
            "--qos", str(topo.workload.qos),
            "--sub-qos", str(topo.workload.sub_qos),
            "--duration", str(topo.workload.duration),
            "--seed", str(topo.seed + i),
            "--out", str(bench_dir),
            "--scenario", f"{topo.scenario}:{name}",
        ]
        procs.append(await asyncio.create_subprocess_exec(
            *cmd, stdout=asyncio.subprocess.DEVNULL,
            stderr=asyncio.subprocess.PIPE))
    results = []
    for proc, bench_dir in zip(procs, result_dirs):
        _, stderr = await proc.communicate()
        if proc.returncode != 0:
            raise RuntimeError(
                f"bench process failed ({proc.returncode}): {stderr.decode()[-500:]}")
        with open(bench_dir / "result.json") as fh:
            results.append(json.load(fh))
    return results


def pool_bench_results(results: list[dict]) -> dict:
    published = sum(r["published"] for r in results)
    received = sum(r["received"] for r in results)
    duration = max((r["duration_s"] for r in results), default=0.0)
    count = sum(r["latency_count"] for r in results)
    total = sum(r["latency_sum_ms"] for r in results)
    return {
        "published": published,
        "received": received,
        "throughput_msgs_s": published / duration if duration else 0.0,
        "mean_ms": total / count if count else 0.0,
        "starved_subscribers": sum(r["starved_subscribers"] for r in results),
    }


def pooled_percentiles(bench_dirs: list[Path]) -> tuple[float, float]:
    samples: list[float] = []
    for d in bench_dirs:
        path = d / "latency_samples.csv"
        if not path.exists():
            continue
        with open(path) as fh:
            next(fh, None)
            samples.extend(float(line) for line in fh if line.strip())
    if not samples:
        return 0.0, 0.0
    samples.sort()
    p50 = samples[min(len(samples) - 1, int(0.50 * len(samples)))]
    p95 = samples[min(len(samples) - 1, int(0.95 * len(samples)))]
    return p50, p95


# ----------------------------------------------------------------------
# full scenario run

@dataclass
class RunReport:
    report_dir: Path
    verified: bool
    verify_results: list[VerifyResult]
    metrics: dict | None
    converged_parents: dict[str, str | None]

    @property
    def exit_code(self) -> int:
        return 0 if self.verified else 1


async def run_scenario(topo: TopologySpec, report_dir: Path) -> RunReport:
    mesh = Mesh(topo, report_dir)
    verify_results: list[VerifyResult] = []
    metrics: dict | None = None
    try:
        await mesh.start()
        parents = await mesh.wait_converged()
        caps = mesh.capabilities()
        first = verify_tree(topo, caps, parents)
        verify_results.append(first)
        log.info("initial tree: %s", first.describe())

        async def scheduled_events():
            started = time.time()
            for ev in sorted(topo.events, key=lambda e: e.at_s):
                delay = ev.at_s - (time.time() - started)
                if delay > 0:
                    await asyncio.sleep(delay)
                if ev.action == "fail":
                    await mesh.kill(ev.broker)
                elif ev.action == "restore":
                    await mesh.restore(ev.broker)

        event_task = asyncio.ensure_future(scheduled_events())
        if topo.workload.publishers or topo.workload.subscribers:
            mesh.phase("workload")
            results = await run_bench_processes(topo, mesh, mesh.report_dir)
            metrics = pool_bench_results(results)
            bench_dirs = sorted(mesh.report_dir.glob("bench-*"))
            metrics["p50_ms"], metrics["p95_ms"] = pooled_percentiles(bench_dirs)
            mesh.phase("workload_end")
        await event_task

        if topo.events:
            parents = await mesh.wait_converged()
            final = verify_tree(topo, mesh.capabilities(), parents,
                                alive=mesh.alive_names())
            verify_results.append(final)
            log.info("post-event tree: %s", final.describe())

        crashed = mesh.crashed()
        if crashed:
            raise RuntimeError(f"broker(s) crashed outside injected failures: {crashed}")
    finally:
        await mesh.stop()

    verified = all(v.ok for v in verify_results) and bool(verify_results)
    write_report(topo, mesh, verify_results, metrics, parents)
    return RunReport(report_dir=mesh.report_dir, verified=verified,
                     verify_results=verify_results, metrics=metrics,
                     converged_parents=parents)


def write_report(topo: TopologySpec, mesh: Mesh, verify_results: list[VerifyResult],
                 metrics: dict | None, parents: dict[str, str | None]) -> None:
    out = mesh.report_dir
    caps = mesh.capabilities()

    if not (out / "topology.txt").exists():
        (out / "topology.txt").write_text(serialize_topology(topo))

    with open(out / "tree.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["broker", "parent", "capability", "port"])
        for name in sorted(parents):
            w.writerow([name, parents[name] or "", caps.get(name, ""),
                        mesh.by_name[name].port])

    expected = expected_tree_for(topo, caps, alive=set(parents))
    with open(out / "oracle.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["broker", "parent", "dist_us"])
        for name in sorted(expected.dist):
            w.writerow([name, expected.parent.get(name, ""), expected.dist[name]])

    rows = mesh.stats_rows()
    if rows:
        fields = ["t", "broker"] + sorted({k for r in rows for k in r} - {"t", "broker"})
        with open(out / "timeline.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)

    with open(out / "phases.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "phase"])
        w.writerows(mesh.phases)

    if metrics is not None:
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "publishers", "subscribers", "brokers",
                        "throughput_msgs_s", "mean_ms", "p50_ms", "p95_ms",
                        "published", "received", "starved_subscribers"])
            w.writerow([topo.scenario, topo.workload.publishers,
                        topo.workload.subscribers, len(topo.brokers),
                        round(metrics["throughput_msgs_s"], 2),
                        round(metrics["mean_ms"], 3),
                        round(metrics["p50_ms"], 3), round(metrics["p95_ms"], 3),
                        metrics["published"], metrics["received"],
                        metrics["starved_subscribers"]])

    counters = mesh.latest_counters()
    bpdu_bytes = sum(c.get("bpdu_bytes", 0) for c in counters.values())
    lines = [
        f"scenario: {topo.scenario}",
        f"brokers: {len(topo.brokers)} ({', '.join(sorted(mesh.by_name))})",
        f"signalling bytes (control payload traffic): {bpdu_bytes}",
    ]
    for i, v in enumerate(verify_results):
        lines.append(f"verify[{i}]: {v.describe()}")
    if metrics is not None:
        lines.append(f"aggregate throughput: {metrics['throughput_msgs_s']:.1f} msg/s")
        lines.append(f"e2e delay mean/p50/p95: {metrics['mean_ms']:.1f}/"
                     f"{metrics['p50_ms']:.1f}/{metrics['p95_ms']:.1f} ms")
        lines.append(f"published: {metrics['published']}  received: {metrics['received']}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")


def verify_report_dir(report_dir: Path) -> VerifyResult:
    """Re-check a written report against the oracle."""
    topo = parse_topology((report_dir / "topology.txt").read_text())
    parents: dict[str, str | None] = {}
    caps: dict[str, int] = {}
    ports: dict[str, int] = {}
    with open(report_dir / "tree.csv") as fh:
        for row in csv.DictReader(fh):
            parents[row["broker"]] = row["parent"] or None
            caps[row["broker"]] = int(row["capability"])
            ports[row["broker"]] = int(row["port"])
    for b in topo.brokers:
        if b.name in ports:
            b.port = ports[b.name]
    return verify_tree(topo, caps, parents, alive=set(parents))


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="treemq-mesh",
        description="spawn a broker mesh, verify its tree, run workloads")
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="execute a topology file")
    runp.add_argument("spec", help="topology file")
    runp.add_argument("--out", default=None, help="report directory")
    runp.add_argument("--seed", type=int, default=None)
    runp.add_argument("--duration", type=float, default=None)
    verp = sub.add_parser("verify", help="re-check a report directory")
    verp.add_argument("report", help="report directory")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "verify":
        result = verify_report_dir(Path(args.report))
        print(result.describe())
        return 0 if result.ok else 1

    spec_path = Path(args.spec)
    topo = parse_topology(spec_path.read_text())
    if args.seed is not None:
        topo.seed = args.seed
    if args.duration is not None:
        topo.workload.duration = args.duration
    out = Path(args.out) if args.out else Path(f"mesh-report-{int(time.time())}")
    out.mkdir(parents=True, exist_ok=True)
    shutil.copy(spec_path, out / "topology.txt")
    report = asyncio.run(run_scenario(topo, out))
    print((out / "summary.txt").read_text())
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
