"""treemq: MQTT brokers that self-organize into a loop-free forwarding tree.

Brokers bridge to each other with broker-flagged CONNECTs, elect the most
capable broker as tree root, pick lowest-latency paths toward it, block
redundant links, and replicate every publication across the mesh at
QoS 2.  The companion harness and bench tools reproduce the mesh's
throughput, end-to-end delay, and failure-recovery behaviour at desk
scale.
"""

__version__ = "0.1.0"
