"""Load generator and measurement client.

Spawns publishers and subscribers against one or more brokers, measures
publication throughput (each publish waits for its full QoS handshake,
so the rate reflects broker workload) and end-to-end delay (publish
timestamps ride in the payload; publisher and subscriber share the
host-wide monotonic clock), and writes CSV plus a JSON result.
"""

from __future__ import annotations

import argparse
import asyncio
import csv
import json
import logging
import random
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

from .client import MqttClient, MqttError

log = logging.getLogger(__name__)

HEADER = struct.Struct(">QHI")  # monotonic ns, publisher id, sequence
MIN_MESSAGE_SIZE = HEADER.size

SAMPLE_CAP = 100_000  # reservoir bound on stored latency samples
DRAIN_GRACE_S = 5.0


@dataclass(frozen=True)
class Target:
    host: str
    port: int
    publishers: int
    subscribers: int

    @classmethod
    def parse(cls, text: str) -> "Target":
        host, port, pubs, subs = text.rsplit(":", 3)
        return cls(host=host, port=int(port), publishers=int(pubs), subscribers=int(subs))


@dataclass
class Workload:
    targets: list[Target]
    message_size: int = 64
    topic_count: int = 10
    qos: int = 2
    sub_qos: int = 0
    duration_s: float = 5.0
    seed: int = 0

    @property
    def publishers(self) -> int:
        return sum(t.publishers for t in self.targets)

    @property
    def subscribers(self) -> int:
        return sum(t.subscribers for t in self.targets)


@dataclass
class LatencyPool:
    """Streaming mean plus a reservoir for percentiles."""

    count: int = 0
    sum_ms: float = 0.0
    samples: list[float] = field(default_factory=list)
    _rng: random.Random = field(default_factory=lambda: random.Random(0xFEED))

    def add(self, delta_ms: float) -> None:
        self.count += 1
        self.sum_ms += delta_ms
        if len(self.samples) < SAMPLE_CAP:
            self.samples.append(delta_ms)
        else:
            slot = self._rng.randrange(self.count)
            if slot < SAMPLE_CAP:
                self.samples[slot] = delta_ms

    @property
    def mean_ms(self) -> float:
        return self.sum_ms / self.count if self.count else 0.0

    def percentile(self, q: float) -> float:
        if not self.samples:
            return 0.0
        ordered = sorted(self.samples)
        idx = min(len(ordered) - 1, int(q * len(ordered)))
        return ordered[idx]


@dataclass
class WorkloadResult:
    workload: Workload
    duration_s: float
    published: int
    received: int
    per_publisher: list[int]
    per_subscriber: list[int]
    latency: LatencyPool

    @property
    def throughput(self) -> float:
        return self.published / self.duration_s if self.duration_s else 0.0

    @property
    def starved_subscribers(self) -> int:
        if self.published == 0:
            return 0
        return sum(1 for n in self.per_subscriber if n == 0)

    def conservation_holds(self) -> bool:
        return self.received == self.published * self.workload.subscribers


def assign_topics(workload: Workload) -> list[str]:
    """Deterministic publisher -> topic assignment from the seed."""
    rng = random.Random(workload.seed)
    topics = [f"bench/t{i}" for i in range(workload.topic_count)]
    return [topics[rng.randrange(len(topics))] for _ in range(workload.publishers)]


async def run_workload(workload: Workload) -> WorkloadResult:
    size = max(workload.message_size, MIN_MESSAGE_SIZE)
    padding = b"\x00" * (size - HEADER.size)
    topics_by_publisher = assign_topics(workload)

    latency = LatencyPool()
    per_subscriber: list[int] = []
    subscribers: list[MqttClient] = []
    publishers: list[tuple[int, Target, MqttClient]] = []

    sub_index = 0
    for target in workload.targets:
        for _ in range(target.subscribers):
            slot = len(per_subscriber)
            per_subscriber.append(0)

            def on_message(msg, slot=slot):
                per_subscriber[slot] += 1
                if len(msg.payload) >= HEADER.size:
                    sent_ns, _pub, _seq = HEADER.unpack(msg.payload[:HEADER.size])
                    latency.add((time.monotonic_ns() - sent_ns) / 1e6)

            client = MqttClient(f"bench-sub-{target.port}-{sub_index}", on_message=on_message)
            sub_index += 1
            await client.connect(target.host, target.port, keep_alive_s=60)
            await client.subscribe("bench/#", qos=workload.sub_qos)
            subscribers.append(client)

    pub_id = 0
    for target in workload.targets:
        for _ in range(target.publishers):
            client = MqttClient(f"bench-pub-{target.port}-{pub_id}")
            await client.connect(target.host, target.port, keep_alive_s=60)
            publishers.append((pub_id, target, client))
            pub_id += 1

    per_publisher = [0] * len(publishers)
    loop = asyncio.get_running_loop()
    t_end = loop.time() + workload.duration_s

    async def drive(slot: int, client: MqttClient, topic: str) -> None:
        seq = 0
        while loop.time() < t_end:
            payload = HEADER.pack(time.monotonic_ns(), slot, seq) + padding
            try:
                await client.publish(topic, payload, qos=workload.qos)
            except (MqttError, asyncio.TimeoutError, ConnectionError):
                log.warning("publisher %d lost its connection", slot)
                return
            per_publisher[slot] += 1
            seq += 1

    started = loop.time()
    await asyncio.gather(*(
        drive(slot, client, topics_by_publisher[slot])
        for slot, _target, client in publishers))
    elapsed = loop.time() - started

    # let in-flight deliveries drain
    deadline = loop.time() + DRAIN_GRACE_S
    previous = -1
    while loop.time() < deadline:
        total = sum(per_subscriber)
        if total == previous:
            break
        previous = total
        await asyncio.sleep(0.3)

    for _slot, _target, client in publishers:
        await client.disconnect()
    for client in subscribers:
        await client.disconnect()

    return WorkloadResult(
        workload=workload,
        duration_s=max(elapsed, workload.duration_s),
        published=sum(per_publisher),
        received=sum(per_subscriber),
        per_publisher=per_publisher,
        per_subscriber=per_subscriber,
        latency=latency,
    )


def summary_row(scenario: str, brokers: int, result: WorkloadResult) -> dict:
    return {
        "scenario": scenario,
        "publishers": result.workload.publishers,
        "subscribers": result.workload.subscribers,
        "brokers": brokers,
        "throughput_msgs_s": round(result.throughput, 2),
        "mean_ms": round(result.latency.mean_ms, 3),
        "p50_ms": round(result.latency.percentile(0.50), 3),
        "p95_ms": round(result.latency.percentile(0.95), 3),
        "published": result.published,
        "received": result.received,
        "starved_subscribers": result.starved_subscribers,
    }


SUMMARY_FIELDS = ["scenario", "publishers", "subscribers", "brokers",
                  "throughput_msgs_s", "mean_ms", "p50_ms", "p95_ms",
                  "published", "received", "starved_subscribers"]


def write_summary_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def write_result_files(out_dir: Path, scenario: str, brokers: int,
                       result: WorkloadResult) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    row = summary_row(scenario, brokers, result)
    write_summary_csv(out_dir / "summary.csv", [row])
    with open(out_dir / "result.json", "w") as fh:
        json.dump({
            **row,
            "duration_s": result.duration_s,
            "per_publisher": result.per_publisher,
            "per_subscriber": result.per_subscriber,
            "latency_count": result.latency.count,
            "latency_sum_ms": result.latency.sum_ms,
        }, fh, indent=2)
    with open(out_dir / "latency_samples.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["delta_ms"])
        writer.writerows([round(s, 4)] for s in result.latency.samples)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="treemq-bench",
        description="publish/subscribe load generator with QoS-gated throughput")
    parser.add_argument("--target", action="append", required=True,
                        metavar="HOST:PORT:PUBS:SUBS",
                        help="broker endpoint with its publisher/subscriber counts")
    parser.add_argument("--size", type=int, default=64, help="message size in bytes")
    parser.add_argument("--topics", type=int, default=10)
    parser.add_argument("--qos", type=int, default=2, choices=(0, 1, 2))
    parser.add_argument("--sub-qos", type=int, default=0, choices=(0, 1, 2))
    parser.add_argument("--duration", type=float, default=5.0, help="seconds")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="bench-out", help="output directory")
    parser.add_argument("--scenario", default="adhoc", help="label for the CSV")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    workload = Workload(
        targets=[Target.parse(t) for t in args.target],
        message_size=args.size, topic_count=args.topics,
        qos=args.qos, sub_qos=args.sub_qos,
        duration_s=args.duration, seed=args.seed,
    )
    try:
        result = asyncio.run(run_workload(workload))
    except (MqttError, ConnectionError, OSError, asyncio.TimeoutError) as exc:
        log.error("workload aborted: %s", exc)
        return 2
    write_result_files(Path(args.out), args.scenario, len(workload.targets), result)
    row = summary_row(args.scenario, len(workload.targets), result)
    print(",".join(str(row[k]) for k in SUMMARY_FIELDS))
    if result.starved_subscribers:
        log.warning("%d subscriber(s) received nothing", result.starved_subscribers)
    return 0


if __name__ == "__main__":
    import sys

    sys.exit(main())
