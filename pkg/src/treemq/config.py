"""Broker configuration: plain-text file plus mirroring CLI flags.

File format is line oriented, ``key value...`` per line, ``#`` comments:

    listen_port 1883
    host 127.0.0.1
    keep_alive 10
    alpha 1
    beta 1
    capability 3400 16384
    peer 127.0.0.1:1884
    peer 127.0.0.1:1885

``peer`` repeats.  ``capability L R`` overrides machine introspection
(CPU MHz and RAM MB read from /proc at startup).  Flags override file
values; ``--peer`` on the command line replaces the file's peer list.
"""

from __future__ import annotations

import argparse
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .tree import as_fraction


class ConfigError(ValueError):
    pass


@dataclass
class BrokerConfig:
    host: str = "127.0.0.1"
    listen_port: int = 1883
    keep_alive_s: float = 10.0
    alpha: Fraction = Fraction(1)
    beta: Fraction = Fraction(1)
    peers: list[tuple[str, int]] = field(default_factory=list)
    capability_override: tuple[int, int] | None = None  # (cpu MHz, ram MB)
    log_file: str | None = None
    cost_quantum_us: int = 1000


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"expected host:port, got {text!r}")
    try:
        return host, int(port)
    except ValueError:
        raise ConfigError(f"bad port in {text!r}") from None


def parse_config_text(text: str) -> BrokerConfig:
    cfg = BrokerConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *args = line.split()
        try:
            _apply_key(cfg, key, args)
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def _apply_key(cfg: BrokerConfig, key: str, args: list[str]) -> None:
    if key == "peer":
        cfg.peers.append(parse_endpoint(args[0]))
    elif key == "keep_alive":
        cfg.keep_alive_s = float(args[0])
        if cfg.keep_alive_s <= 0:
            raise ConfigError("keep_alive must be positive")
    elif key == "alpha":
        cfg.alpha = as_fraction(args[0])
    elif key == "beta":
        cfg.beta = as_fraction(args[0])
    elif key == "listen_port":
        cfg.listen_port = int(args[0])
    elif key == "capability":
        cfg.capability_override = (int(args[0]), int(args[1]))
    elif key == "host":
        cfg.host = args[0]
    elif key == "log_file":
        cfg.log_file = args[0]
    elif key == "cost_quantum_us":
        cfg.cost_quantum_us = int(args[0])
    else:
        raise ConfigError(f"unknown key {key!r}")


def load_config(path: str | Path) -> BrokerConfig:
    return parse_config_text(Path(path).read_text())


def add_broker_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="configuration file")
    parser.add_argument("--host", help="advertised address (default 127.0.0.1)")
    parser.add_argument("--listen-port", type=int)
    parser.add_argument("--keep-alive", type=float)
    parser.add_argument("--alpha")
    parser.add_argument("--beta")
    parser.add_argument("--peer", action="append", metavar="HOST:PORT",
                        help="bridge peer; repeatable, replaces the file's list")
    parser.add_argument("--capability", nargs=2, type=int, metavar=("CPU_MHZ", "RAM_MB"))
    parser.add_argument("--log-file", help="JSONL event log path")
    parser.add_argument("--cost-quantum-us", type=int)


def config_from_args(args: argparse.Namespace) -> BrokerConfig:
    cfg = load_config(args.config) if args.config else BrokerConfig()
    if args.host is not None:
        cfg.host = args.host
    if args.listen_port is not None:
        cfg.listen_port = args.listen_port
    if args.keep_alive is not None:
        cfg.keep_alive_s = args.keep_alive
        if cfg.keep_alive_s <= 0:
            raise ConfigError("keep_alive must be positive")
    if args.alpha is not None:
        cfg.alpha = as_fraction(args.alpha)
    if args.beta is not None:
        cfg.beta = as_fraction(args.beta)
    if args.peer is not None:
        cfg.peers = [parse_endpoint(p) for p in args.peer]
    if args.capability is not None:
        cfg.capability_override = tuple(args.capability)
    if args.log_file is not None:
        cfg.log_file = args.log_file
    if args.cost_quantum_us is not None:
        cfg.cost_quantum_us = args.cost_quantum_us
    return cfg


def read_machine_capability() -> tuple[int, int]:
    """CPU speed (MHz) and RAM (MB) from /proc, as read at startup."""
    cpu_mhz = 0
    try:
        cpuinfo = Path("/proc/cpuinfo").read_text()
        speeds = [float(m) for m in re.findall(r"^cpu MHz\s*:\s*([\d.]+)", cpuinfo, re.M)]
        if speeds:
            cpu_mhz = int(max(speeds))
    except OSError:
        pass
    ram_mb = 0
    try:
        meminfo = Path("/proc/meminfo").read_text()
        m = re.search(r"^MemTotal:\s*(\d+)\s*kB", meminfo, re.M)
        if m:
            ram_mb = int(m.group(1)) // 1024
    except OSError:
        pass
    return cpu_mhz, ram_mb
