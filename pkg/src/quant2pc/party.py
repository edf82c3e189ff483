"""Per-party protocol context and helpers to run both parties together.

Protocol functions are written once and executed by both parties in
lockstep, each with its own ``Party``. Branches on ``p.role`` decide who
sends what.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ot import BACKENDS, OTBackend
from .transport import CommMeter, Endpoint, Role, open_inproc_pair, open_tcp_pair


@dataclass
class Party:
    """One party's view of a session: role, channel, OT and private randomness."""

    role: Role
    ep: Endpoint
    ot: OTBackend
    rng: np.random.Generator
    lam: int = 128
    debug: dict = field(default_factory=dict)

    @property
    def is_server(self) -> bool:
        return self.role == Role.SERVER

    @property
    def meter(self) -> CommMeter:
        return self.ep.meter

    @contextmanager
    def scope(self, label: str):
        with self.ep.scope(label):
            yield

    def random_ring(self, shape, bits: int) -> np.ndarray:
        from .ring import mask

        return self.rng.bit_generator.random_raw(shape) & mask(bits)

    def random_bits(self, shape) -> np.ndarray:
        return self.rng.bit_generator.random_raw(shape) & np.uint64(1)


def make_party(role: Role, ep: Endpoint, seed: int = 0, lam: int = 128, backend: str = "simulated") -> Party:
    """Create a party and run the one-time OT setup (the client speaks first)."""
    role = Role(role)
    rng = np.random.default_rng([seed, int(role), 0x51A7])
    cls = BACKENDS[backend]
    ot = cls(ep, lam, rng=np.random.default_rng([seed, int(role), 0x0715])) if backend == "simulated" else cls(ep, lam)
    party = Party(role, ep, ot, rng, lam)
    ot.setup(leader=role == Role.CLIENT)
    return party


@dataclass
class PairResult:
    server: object
    client: object
    meter: CommMeter
    client_meter: CommMeter


def run_pair(
    server_fn: Callable[[Party], object],
    client_fn: Callable[[Party], object],
    transport: str = "inproc",
    seed: int = 0,
    lam: int = 128,
    backend: str = "simulated",
) -> PairResult:
    """Run both parties in separate threads and collect their results.

    If one side raises, its endpoint is closed so the other side fails fast
    instead of waiting, and the first error is re-raised.
    """
    if transport == "inproc":
        eps = open_inproc_pair()
    elif transport == "tcp":
        eps = open_tcp_pair()
    else:
        raise ValueError(f"unknown transport {transport!r}")
    results: dict = {}
    errors: dict = {}

    def worker(role: Role, fn):
        ep = eps[int(role)]
        try:
            party = make_party(role, ep, seed, lam, backend)
            results[role] = fn(party)
        except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
            errors[role] = exc
            ep.close()

    threads = [
        threading.Thread(target=worker, args=(Role.SERVER, server_fn), name="server"),
        threading.Thread(target=worker, args=(Role.CLIENT, client_fn), name="client"),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for ep in eps:
        ep.close()
    if errors:
        # prefer the root cause over the peer's disconnect error
        from .transport import ChannelError

        root = [e for e in errors.values() if not isinstance(e, ChannelError)]
        raise (root or list(errors.values()))[0]
    return PairResult(results[Role.SERVER], results[Role.CLIENT], eps[0].meter, eps[1].meter)


def run_sym(fn: Callable[[Party, object], object], server_arg, client_arg, **kw) -> PairResult:
    """Run the same function on both sides with per-party arguments."""
    return run_pair(lambda p: fn(p, server_arg), lambda p: fn(p, client_arg), **kw)
