import asyncio

import pytest

from treemq.bench import (
    LatencyPool,
    Target,
    Workload,
    assign_topics,
    run_workload,
    summary_row,
)

from test_integration import free_port, start_broker, stop_all


def test_target_parse():
    assert Target.parse("127.0.0.1:1883:2:3") == Target("127.0.0.1", 1883, 2, 3)
    assert Target.parse("10.0.0.1:1:0:10").subscribers == 10


def test_topic_assignment_is_seed_deterministic():
    w1 = Workload(targets=[Target("h", 1, 20, 0)], topic_count=10, seed=42)
    w2 = Workload(targets=[Target("h", 1, 20, 0)], topic_count=10, seed=42)
    w3 = Workload(targets=[Target("h", 1, 20, 0)], topic_count=10, seed=43)
    assert assign_topics(w1) == assign_topics(w2)
    assert assign_topics(w1) != assign_topics(w3)
    assert all(t.startswith("bench/t") for t in assign_topics(w1))


def test_latency_pool_statistics():
    pool = LatencyPool()
    for v in [1.0, 2.0, 3.0, 4.0, 100.0]:
        pool.add(v)
    assert pool.count == 5
    assert pool.mean_ms == pytest.approx(22.0)
    assert pool.percentile(0.5) == 3.0
    assert pool.percentile(0.95) == 100.0


def test_loopback_workload_conserves_messages():
    async def scenario():
        port = free_port()
        broker = await start_broker(port)
        try:
            workload = Workload(
                targets=[Target("127.0.0.1", port, 2, 3)],
                message_size=64, topic_count=4, qos=2, sub_qos=1,
                duration_s=1.5, seed=1,
            )
            result = await run_workload(workload)
            assert result.published > 0
            assert result.conservation_holds(), (result.published, result.received)
            assert result.received == result.published * 3
            assert result.starved_subscribers == 0
            assert result.latency.count == result.received
            assert 0 < result.latency.mean_ms < 1000
            row = summary_row("smoke", 1, result)
            assert row["publishers"] == 2 and row["subscribers"] == 3
            assert row["throughput_msgs_s"] > 0
        finally:
            await stop_all(broker)

    asyncio.run(scenario())
