"""Flooding average consensus over encrypted slot vectors.

Each process encrypts value * e_i and floods (votes, counts) pairs; counts
travel in plaintext and record how many times each vote was folded into the
aggregate.  A message whose nonzero count indices are a subset of the local
ones carries no new information and is dropped.  Once every leading count is
nonzero the process runs the prepare step: multiply by the plaintext weights
1/(count_j * n) to undo duplicates, then rotate-sum so every slot holds the
average.  Only prepared aggregates ever reach the keyholder's secret key.

Two deployment shapes are provided: a trusted collector outside the graph
that decrypts prepared aggregates and broadcasts the result, and the
collector-free variant where each initiator runs an instance under its own
key, sits out the flooding, and decrypts the prepared aggregate routed back
to it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import netsim
from .he_slots import Ciphertext, SlotBackend, SlotVector, slot_capacity_for
from .topology import Topology

log = logging.getLogger(__name__)

AGGREGATE = "aggregate"
SEED = "seed"
PREPARED = "prepared"
RESULT = "result"
COMPLETE = "complete"
KINDS = (AGGREGATE, SEED, PREPARED, RESULT, COMPLETE)

ACTIVE = "active"
DECIDED = "decided"

INSTANCE_TRUSTED = "avg/trusted"
NON_VIABLE = "non-viable"

#: relative tolerance for the "all prepared slots equal" sanity assertion
PREPARED_SLOT_TOLERANCE = 1e-6


class PrivacyGuardError(Exception):
    """Refusal to decrypt an aggregate that has not gone through prepare."""


def instance_for_initiator(k: int) -> str:
    return f"avg/{k}"


@dataclass(frozen=True)
class ProcessInput:
    """Initial value v_i contributed by one process."""

    v: float

    def __post_init__(self):
        if not np.isfinite(self.v):
            raise ValueError(f"initial value must be finite, got {self.v!r}")


@dataclass(frozen=True)
class ProtocolMessage:
    """The (votes, counts[, participating]) unit exchanged between neighbors."""

    instance: str
    kind: str
    votes_ct: Ciphertext | None = None
    counts: tuple | None = None
    participating_ct: Ciphertext | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")
        if self.kind in (AGGREGATE, SEED) and (self.votes_ct is None or self.counts is None):
            raise ValueError(f"{self.kind} message requires votes_ct and counts")
        if self.kind in (PREPARED, COMPLETE) and (self.votes_ct is None
                                                  or not self.votes_ct.prepared):
            raise ValueError(f"{self.kind} message carries an unprepared ciphertext")


@dataclass
class ConsensusState:
    """Per-process, per-instance flooding state."""

    id: int
    instance: str
    n: int
    votes_ct: Ciphertext
    counts: np.ndarray            # plaintext multiplicities, slot-capacity long
    phase: str = ACTIVE
    required: tuple = ()          # indices whose counts must become nonzero
    prepare_n: int = 0            # denominator used by prepare
    include: tuple = ()           # indices given nonzero prepare weight

    def __post_init__(self):
        if not self.required:
            self.required = tuple(range(self.n))
        if not self.prepare_n:
            self.prepare_n = self.n
        if not self.include:
            self.include = tuple(range(self.n))


def init_consensus(pid: int, value: float, pk, n: int, backend: SlotBackend,
                   instance: str = INSTANCE_TRUSTED,
                   tag_label: str = "value") -> tuple[ConsensusState, ProtocolMessage]:
    """Create the unit-impulse state and the broadcast that announces it."""
    cap = backend.config.slot_capacity
    if cap < n:
        raise ValueError(f"slot capacity {cap} < process count {n}")
    votes = backend.encrypt(pk, SlotVector.impulse(cap, pid, value),
                            (pid, f"{instance}:{tag_label}"))
    counts = np.zeros(cap, dtype=np.int64)
    counts[pid] = 1
    state = ConsensusState(id=pid, instance=instance, n=n,
                           votes_ct=votes, counts=counts)
    msg = ProtocolMessage(instance, AGGREGATE, votes_ct=votes,
                          counts=tuple(int(x) for x in counts))
    return state, msg


def init_with_ciphertext(pid: int, contribution: Ciphertext, n: int,
                         backend: SlotBackend, instance: str) -> tuple[ConsensusState, ProtocolMessage]:
    """Like init_consensus but seeded with an already-encrypted contribution."""
    cap = backend.config.slot_capacity
    counts = np.zeros(cap, dtype=np.int64)
    counts[pid] = 1
    backend.record_possession(pid, contribution)
    state = ConsensusState(id=pid, instance=instance, n=n,
                           votes_ct=contribution, counts=counts)
    msg = ProtocolMessage(instance, AGGREGATE, votes_ct=contribution,
                          counts=tuple(int(x) for x in counts))
    return state, msg


def _is_subset(incoming: np.ndarray, local: np.ndarray) -> bool:
    return bool(np.all(local[incoming > 0] > 0))


def on_receive(state: ConsensusState, msg: ProtocolMessage,
               backend: SlotBackend) -> tuple[ConsensusState, list[ProtocolMessage], Ciphertext | None]:
    """Fold one aggregate message into the local state.

    Returns the (mutated) state, any rebroadcast messages, and the prepared
    aggregate if this message completed the counts.
    """
    if msg.instance != state.instance:
        log.warning("dropping message for %s at state %s", msg.instance, state.instance)
        return state, [], None
    if state.phase != ACTIVE or msg.kind not in (AGGREGATE, SEED):
        return state, [], None
    incoming = np.asarray(msg.counts, dtype=np.int64)
    if _is_subset(incoming, state.counts):
        return state, [], None
    state.votes_ct = backend.add_ct(state.votes_ct, msg.votes_ct)
    state.counts = state.counts + incoming
    out = [ProtocolMessage(state.instance, AGGREGATE, votes_ct=state.votes_ct,
                           counts=tuple(int(x) for x in state.counts))]
    decision = None
    if all(state.counts[j] > 0 for j in state.required):
        state.phase = DECIDED
        decision = prepare(backend, state.votes_ct, state.counts,
                           state.prepare_n, include=state.include)
        backend.record_possession(state.id, decision)
    return state, out, decision


def prepare(backend: SlotBackend, votes_ct: Ciphertext, counts,
            n: int, include=None) -> Ciphertext:
    """Divide out duplicate counts and rotate-sum so every slot is the average.

    Padding slots (and excluded indices, under faults) get weight zero, which
    keeps the full-capacity rotate-sum exact.
    """
    counts = np.asarray(counts, dtype=np.int64)
    cap = len(counts)
    include = tuple(include) if include is not None else tuple(range(n))
    weights = np.zeros(cap)
    for j in include:
        if counts[j] <= 0:
            raise ValueError(f"prepare requires a nonzero count at index {j}")
        weights[j] = 1.0 / (counts[j] * n)
    ct = backend.mult_pt(votes_ct, SlotVector(weights))
    levels = cap.bit_length() - 1
    for i in range(levels - 1, -1, -1):
        ct = backend.add_ct(ct, backend.rotate(ct, 2 ** i))
    return backend.mark_prepared(ct)


def finalize_trusted(backend: SlotBackend, secret, prepared_ct: Ciphertext,
                     n: int, caller=None,
                     rel_tolerance: float = PREPARED_SLOT_TOLERANCE) -> float:
    """Decrypt a prepared aggregate and return the average it carries."""
    if not prepared_ct.prepared:
        raise PrivacyGuardError("refusing to decrypt an unprepared aggregate")
    vec = backend.decrypt(secret, prepared_ct, caller=caller)
    lead = vec.values[:n]
    ref = float(lead[0])
    scale = max(1.0, abs(ref)) * rel_tolerance + prepared_ct.noise_bound * n
    if np.max(np.abs(lead - ref)) > scale:
        raise ValueError(f"prepared slots disagree beyond tolerance: {lead}")
    return ref


# -- simulation actors -----------------------------------------------------

class _FloodingMixin:
    """Shared per-instance fold/rebroadcast mechanics for flooding nodes.

    Coalesces all merges from one delivery batch into a single rebroadcast,
    which is what keeps per-process traffic within a constant factor of
    diameter * degree.
    """

    def _fold_batch(self, state: ConsensusState, msgs,
                    backend: SlotBackend) -> tuple[bool, Ciphertext | None]:
        changed = False
        decision = None
        for msg in msgs:
            _, out, dec = on_receive(state, msg, backend)
            if out:
                changed = True
            if dec is not None and decision is None:
                decision = dec
        return changed, decision

    def _snapshot_msg(self, state: ConsensusState) -> ProtocolMessage:
        return ProtocolMessage(state.instance, AGGREGATE, votes_ct=state.votes_ct,
                               counts=tuple(int(x) for x in state.counts))


class AvgProcessNode(netsim.Node, _FloodingMixin):
    """Algorithm participant in the trusted-collector deployment."""

    def __init__(self, pid: int, value: float, pk, n: int, backend: SlotBackend,
                 instance: str = INSTANCE_TRUSTED):
        self.pid = pid
        self.value = value
        self.pk = pk
        self.n = n
        self.backend = backend
        self.instance = instance
        self.state: ConsensusState | None = None
        self.encrypted_average: Ciphertext | None = None
        self._forwarded_prepared: set[str] = set()

    def on_start(self, ctx):
        self.state, msg = init_consensus(self.pid, self.value, self.pk,
                                         self.n, self.backend, self.instance)
        ctx.broadcast(msg)

    def on_deliver(self, ctx, batch):
        aggregates = []
        for sender, msg in batch:
            if msg.kind in (AGGREGATE, SEED):
                aggregates.append(msg)
            elif msg.kind == PREPARED:
                self._handle_prepared(ctx, msg)
            elif msg.kind == RESULT:
                ctx.decide(msg.extra["average"])
        if aggregates and self.state is not None:
            changed, decision = self._fold_batch(self.state, aggregates, self.backend)
            if changed:
                ctx.broadcast(self._snapshot_msg(self.state))
            if decision is not None:
                ctx.mark_complete(self.instance)
                self._emit_prepared(ctx, decision)

    def _emit_prepared(self, ctx, prepared_ct):
        msg = ProtocolMessage(self.instance, PREPARED, votes_ct=prepared_ct)
        ctx.send(netsim.TRUSTED, msg)
        self.encrypted_average = prepared_ct
        self._forwarded_prepared.add(self.instance)
        ctx.broadcast(msg)

    def _handle_prepared(self, ctx, msg):
        if msg.instance in self._forwarded_prepared:
            return
        self._forwarded_prepared.add(msg.instance)
        self.encrypted_average = msg.votes_ct
        ctx.broadcast(msg)


class TrustedCollectorNode(netsim.Node):
    """Out-of-graph keyholder: decrypts the first prepared aggregate per
    instance and broadcasts the result."""

    def __init__(self, key_material, n: int, backend: SlotBackend):
        self.key = key_material
        self.n = n
        self.backend = backend
        self.finalized: dict[str, float] = {}

    def on_deliver(self, ctx, batch):
        for sender, msg in batch:
            if msg.kind != PREPARED or msg.instance in self.finalized:
                continue
            value = finalize_trusted(self.backend, self.key.secret_part,
                                     msg.votes_ct, self.n, caller=ctx.pid)
            self.finalized[msg.instance] = value
            ctx.decide(value)
            ctx.broadcast_processes(ProtocolMessage(
                msg.instance, RESULT, extra={"average": value}))


def build_trusted(topology: Topology, inputs, *, seed: int = 0,
                  noise_epsilon: float = 0.0) -> netsim.ProtocolSetup:
    from .he_slots import BackendConfig
    n = topology.n
    values = [ProcessInput(float(v)).v for v in inputs]
    backend = SlotBackend(BackendConfig(slot_capacity_for(n), noise_epsilon),
                          seed=seed * 104729 + 7)
    key = backend.keygen(netsim.TRUSTED)
    nodes = {}
    for pid in range(n):
        nodes[pid] = AvgProcessNode(pid, values[pid], key.public_part,
                                    n, backend)
    nodes[netsim.TRUSTED] = TrustedCollectorNode(key, n, backend)
    return netsim.ProtocolSetup(
        nodes=nodes, backend=backend,
        private_values=frozenset(values),
        expected_deciders=set(range(n)),
        primary_instance=INSTANCE_TRUSTED,
    )


# -- collector-free variant -------------------------------------------------

class UntrustedProcessNode(netsim.Node, _FloodingMixin):
    """Participant in the concurrent per-initiator instances.

    For its own instance a node acts as the keyholder: it encrypts its own
    value under its own key, hands that seed to one neighbor, stays out of
    the flooding, and decrypts only the prepared aggregate routed back.
    """

    def __init__(self, pid: int, value: float, n: int, backend: SlotBackend,
                 keys: dict, viable: dict):
        self.pid = pid
        self.value = value
        self.n = n
        self.backend = backend
        self.keys = keys               # initiator -> KeyMaterial (secret used by owner only)
        self.viable = viable           # initiator -> bool
        self.states: dict[str, ConsensusState] = {}
        self.results: dict[str, float] = {}
        self._forwarded: dict[str, set] = {PREPARED: set(), RESULT: set()}

    def _initiator_of(self, instance: str) -> int:
        return int(instance.split("/", 1)[1])

    def on_start(self, ctx):
        for k, ok in sorted(self.viable.items()):
            if k == self.pid and not ok:
                ctx.note(f"initiator_result/{k}", NON_VIABLE)
        for k, key in sorted(self.keys.items()):
            if not self.viable[k]:
                continue
            instance = instance_for_initiator(k)
            if k == self.pid:
                seed_ct = self.backend.encrypt(
                    key.public_part,
                    SlotVector.impulse(self.backend.config.slot_capacity, k, self.value),
                    (k, f"{instance}:value"))
                counts = tuple(1 if i == k else 0
                               for i in range(self.backend.config.slot_capacity))
                target = min(ctx.neighbors)
                ctx.send(target, ProtocolMessage(instance, SEED,
                                                 votes_ct=seed_ct, counts=counts))
            else:
                state, msg = init_consensus(self.pid, self.value, key.public_part,
                                            self.n, self.backend, instance)
                self.states[instance] = state
                ctx.broadcast(msg, exclude=(k,))

    def on_deliver(self, ctx, batch):
        per_instance: dict[str, list] = {}
        for sender, msg in batch:
            if msg.kind in (AGGREGATE, SEED):
                per_instance.setdefault(msg.instance, []).append(msg)
            elif msg.kind == PREPARED:
                self._handle_prepared(ctx, msg)
            elif msg.kind == RESULT:
                self._handle_result(ctx, msg)
        for instance in sorted(per_instance):
            state = self.states.get(instance)
            if state is None:
                continue
            changed, decision = self._fold_batch(state, per_instance[instance],
                                                 self.backend)
            k = self._initiator_of(instance)
            if changed:
                ctx.broadcast(self._snapshot_msg(state), exclude=(k,))
            if decision is not None:
                ctx.mark_complete(instance)
                msg = ProtocolMessage(instance, PREPARED, votes_ct=decision)
                self._forwarded[PREPARED].add(instance)
                ctx.broadcast(msg)

    def _handle_prepared(self, ctx, msg):
        k = self._initiator_of(msg.instance)
        if k == self.pid:
            if msg.instance in self.results:
                return
            value = finalize_trusted(self.backend, self.keys[k].secret_part,
                                     msg.votes_ct, self.n, caller=self.pid)
            self.results[msg.instance] = value
            ctx.note(f"initiator_result/{k}", value)
            ctx.decide(value)
            self._forwarded[RESULT].add(msg.instance)
            ctx.broadcast(ProtocolMessage(msg.instance, RESULT,
                                          extra={"average": value,
                                                 "initiator": k}))
            return
        if msg.instance in self._forwarded[PREPARED]:
            return
        self._forwarded[PREPARED].add(msg.instance)
        ctx.broadcast(msg)

    def _handle_result(self, ctx, msg):
        ctx.decide(msg.extra["average"])
        if msg.instance in self._forwarded[RESULT]:
            return
        self._forwarded[RESULT].add(msg.instance)
        ctx.broadcast(msg)


def build_untrusted(topology: Topology, inputs, initiators=None, *,
                    seed: int = 0, noise_epsilon: float = 0.0) -> netsim.ProtocolSetup:
    from .he_slots import BackendConfig
    n = topology.n
    explicit = initiators is not None
    initiators = sorted(initiators) if explicit else list(range(n))
    if any(not (0 <= k < n) for k in initiators):
        raise ValueError(f"initiators out of range for n={n}: {initiators}")
    values = [ProcessInput(float(v)).v for v in inputs]
    backend = SlotBackend(BackendConfig(slot_capacity_for(n), noise_epsilon),
                          seed=seed * 104729 + 7)
    viable = {k: topology.connected_without({k}) for k in initiators}
    if not explicit and not any(viable.values()):
        raise AssertionError("connected graph must have a non-cut-vertex initiator")
    keys = {k: backend.keygen(k) for k in initiators if viable[k]}
    nodes = {}
    for pid in range(n):
        nodes[pid] = UntrustedProcessNode(pid, values[pid], n, backend,
                                          keys, viable)
    setup = netsim.ProtocolSetup(
        nodes=nodes, backend=backend,
        private_values=frozenset(values),
        expected_deciders=set(range(n)) if any(viable.values()) else set(),
    )
    setup.viable = viable
    return setup


def run_untrusted(topology: Topology, inputs, initiators=None, *, seed: int = 0,
                  schedule: str = "sync", max_latency: int = 4,
                  noise_epsilon: float = 0.0) -> dict:
    """Run the per-initiator instances and map each initiator to its average
    (or the non-viable marker when its removal partitions the graph)."""
    if not topology.is_connected():
        raise ValueError("untrusted variant requires a connected graph")
    setup = build_untrusted(topology, inputs, initiators, seed=seed,
                            noise_epsilon=noise_epsilon)
    policy = netsim.SchedulePolicy(schedule, seed * 7919 + 13, max_latency)
    sim = netsim.Simulation(topology, setup, policy)
    report, _ = sim.run()
    out = {}
    for k, ok in sorted(setup.viable.items()):
        if not ok:
            out[k] = NON_VIABLE
        else:
            out[k] = report.extra.get(f"initiator_result/{k}")
    return out
