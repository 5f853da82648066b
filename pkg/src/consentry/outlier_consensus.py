"""Outlier-resistant averaging: three gated consensus rounds.

Round 1 averages the raw values, round 2 averages the squared deviations
(variance), round 3 re-averages with outliers voting zero alongside an
encrypted 0/1 participation aggregate; the ratio of the two prepared
round-3 results is the outlier-free mean.  A value is an outlier when it
lies strictly outside mu +/- c*sigma.

Between rounds the collector either decrypts and broadcasts the gate value
(default) or, on the encrypted variance route, stays out of the round-1/2
gap entirely: processes derive the variance homomorphically from the
prepared round-1 mean and the collector only opens the combined aggregate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import netsim
from .avg_consensus import (ACTIVE, AGGREGATE, DECIDED, PREPARED, RESULT,
                            ConsensusState, ProtocolMessage, _FloodingMixin,
                            finalize_trusted, init_consensus,
                            init_with_ciphertext, on_receive, prepare)
from .he_slots import BackendConfig, Ciphertext, SlotBackend, SlotVector, slot_capacity_for
from .topology import Topology

R1 = "out/r1"
R2 = "out/r2"
R2_CROSS = "out/r2a"
R2_SQUARES = "out/r2b"
R3 = "out/r3"


class AllOutliersError(Exception):
    """Round 3 had no participants: every value was classified an outlier."""


@dataclass(frozen=True)
class OutlierParams:
    """Standard-deviation multiplier defining the outlier band."""

    c: float

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError(f"c must be positive, got {self.c}")


@dataclass
class OutlierState:
    """Cross-round view of one process: gate values plus the embedded
    flooding state of the round currently in flight."""

    round: int
    core: ConsensusState
    mu: float | None = None
    sigma: float | None = None
    outlier: bool | None = None
    participating_ct: Ciphertext | None = None


def round2_input(v: float, mu: float) -> float:
    """Squared deviation fed into the variance round."""
    return (v - mu) ** 2


def sigma_from_round2(variance_avg: float, tolerance: float = 1e-9) -> float:
    """Standard deviation from the round-2 average, clamping tiny negatives."""
    if variance_avg < -tolerance:
        raise ValueError(f"variance average materially negative: {variance_avg}")
    return math.sqrt(max(0.0, variance_avg))


def is_outlier(v: float, mu: float, sigma: float, c: float) -> bool:
    """Strict test: boundary values are not outliers."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return abs(v - mu) > c * sigma


def init_round3(pid: int, v: float, outlier: bool, pk, n: int,
                backend: SlotBackend) -> tuple[OutlierState, ProtocolMessage]:
    """Round-3 seed: vote v (or 0 if outlier) plus the participation flag."""
    cap = backend.config.slot_capacity
    vote = 0.0 if outlier else float(v)
    flag = 0.0 if outlier else 1.0
    votes = backend.encrypt(pk, SlotVector.impulse(cap, pid, vote),
                            (pid, f"{R3}:value"))
    part = backend.encrypt(pk, SlotVector.impulse(cap, pid, flag),
                           (pid, f"{R3}:participating"))
    counts = np.zeros(cap, dtype=np.int64)
    counts[pid] = 1
    core = ConsensusState(id=pid, instance=R3, n=n, votes_ct=votes, counts=counts)
    state = OutlierState(round=3, core=core, outlier=outlier,
                         participating_ct=part)
    msg = ProtocolMessage(R3, AGGREGATE, votes_ct=votes,
                          counts=tuple(int(x) for x in counts),
                          participating_ct=part)
    return state, msg


def on_receive_round3(state: OutlierState, msg: ProtocolMessage,
                      backend: SlotBackend):
    """Round-3 fold: aggregate votes and participation under shared counts."""
    core = state.core
    if msg.instance != core.instance or core.phase != ACTIVE:
        return state, [], None
    incoming = np.asarray(msg.counts, dtype=np.int64)
    if bool(np.all(core.counts[incoming > 0] > 0)):
        return state, [], None
    core.votes_ct = backend.add_ct(core.votes_ct, msg.votes_ct)
    state.participating_ct = backend.add_ct(state.participating_ct,
                                            msg.participating_ct)
    core.counts = core.counts + incoming
    out = [ProtocolMessage(R3, AGGREGATE, votes_ct=core.votes_ct,
                           counts=tuple(int(x) for x in core.counts),
                           participating_ct=state.participating_ct)]
    decision = None
    if all(core.counts[j] > 0 for j in core.required):
        core.phase = DECIDED
        pv = prepare(backend, core.votes_ct, core.counts, core.prepare_n,
                     include=core.include)
        pp = prepare(backend, state.participating_ct, core.counts,
                     core.prepare_n, include=core.include)
        backend.record_possession(core.id, pv)
        backend.record_possession(core.id, pp)
        decision = (pv, pp)
    return state, out, decision


#: |participation - 1| below this means everyone participated; well clear of
#: the 1/n gap to the next level and of the emulated-noise envelope
FULL_PARTICIPATION_TOL = 1e-6


def finalize_outlier(backend: SlotBackend, secret, prepared_votes: Ciphertext,
                     prepared_participating: Ciphertext, n: int,
                     caller=None) -> float:
    """Ratio of the two prepared round-3 aggregates: the outlier-free mean.

    Both aggregates were prepared with the same denominator, so the ratio is
    independent of it (which also makes this correct under fault-adjusted
    round sizes).  Full participation is special-cased so that the
    no-outlier result is the plain mean identically, not divided by 1 +/- dust.
    """
    filtered_over_n = finalize_trusted(backend, secret, prepared_votes, n,
                                       caller=caller)
    ratio = finalize_trusted(backend, secret, prepared_participating, n,
                             caller=caller)
    if ratio < 0.5 / n:
        raise AllOutliersError("no participating values in round 3")
    if abs(ratio - 1.0) <= FULL_PARTICIPATION_TOL:
        return filtered_over_n
    return filtered_over_n / ratio


def adjust_n_on_fault(state: ConsensusState, correct_set) -> ConsensusState:
    """Restrict the termination condition and prepare weights to survivors."""
    correct = sorted(int(p) for p in correct_set)
    if not correct:
        raise ValueError("correct_set must not be empty")
    state.required = tuple(p for p in correct if p < state.n)
    state.include = state.required
    state.prepare_n = len(state.required)
    return state


# -- encrypted variance route ----------------------------------------------

def variance_contribution(backend: SlotBackend, mean_ct: Ciphertext,
                          v: float, pid: int) -> Ciphertext:
    """Per-process hook: Enc(mean,...) scaled to 2*v at the caller's slot."""
    cap = backend.config.slot_capacity
    return backend.mult_pt(mean_ct, SlotVector.impulse(cap, pid, 2.0 * v))


def combine_variance(backend: SlotBackend, mean_ct: Ciphertext,
                     cross_prepared: Ciphertext,
                     squares_prepared: Ciphertext) -> Ciphertext:
    """avg(v^2) - avg(2 v mean) + mean^2, composed from prepared aggregates."""
    cap = backend.config.slot_capacity
    mean_sq = backend.mult_ct(mean_ct, mean_ct)
    negated = backend.mult_pt(cross_prepared, SlotVector(np.full(cap, -1.0)))
    var = backend.add_ct(backend.add_ct(squares_prepared, negated), mean_sq)
    return backend.mark_prepared(var)


def encrypted_variance(backend: SlotBackend, mean_ct: Ciphertext,
                       values: dict, pk) -> Ciphertext:
    """Reference composition of the no-decryption variance route.

    `values` maps process id -> initial value (the per-process hooks).  The
    cross terms and squared values run through the standard aggregation and
    prepare path; nothing is decrypted.
    """
    cap = backend.config.slot_capacity
    n = len(values)
    counts = np.zeros(cap, dtype=np.int64)
    cross = None
    squares = None
    for pid in sorted(values):
        counts[pid] = 1
        contrib = variance_contribution(backend, mean_ct, values[pid], pid)
        sq = backend.encrypt(pk, SlotVector.impulse(cap, pid, values[pid] ** 2),
                             (pid, f"{R2_SQUARES}:value"))
        cross = contrib if cross is None else backend.add_ct(cross, contrib)
        squares = sq if squares is None else backend.add_ct(squares, sq)
    cross_prepared = prepare(backend, cross, counts, n)
    squares_prepared = prepare(backend, squares, counts, n)
    return combine_variance(backend, mean_ct, cross_prepared, squares_prepared)


# -- simulation actors -------------------------------------------------------

class OutlierProcessNode(netsim.Node, _FloodingMixin):
    def __init__(self, pid: int, value: float, c: float, pk, n: int,
                 backend: SlotBackend, route: str = "decrypt"):
        self.pid = pid
        self.value = float(value)
        self.params = OutlierParams(c)
        self.pk = pk
        self.n = n
        self.backend = backend
        self.route = route
        self.correct = set(range(n))
        self.mu: float | None = None
        self.sigma: float | None = None
        self.outlier: bool | None = None
        self.mean_ct: Ciphertext | None = None
        self.cores: dict[str, ConsensusState] = {}
        self.r3: OutlierState | None = None
        self._forwarded_prepared: set[str] = set()
        self._started: set[str] = set()

    # round bootstrap ------------------------------------------------------

    def _start_core(self, ctx, instance: str, value: float = None,
                    contribution: Ciphertext = None):
        if instance in self._started:
            return
        self._started.add(instance)
        if contribution is not None:
            state, msg = init_with_ciphertext(self.pid, contribution, self.n,
                                              self.backend, instance)
        else:
            state, msg = init_consensus(self.pid, value, self.pk, self.n,
                                        self.backend, instance)
        adjust_n_on_fault(state, self.correct)
        self.cores[instance] = state
        ctx.broadcast(msg)
        self._maybe_complete(ctx, instance)

    def _start_round2(self, ctx):
        if self.route == "decrypt":
            self._start_core(ctx, R2, value=round2_input(self.value, self.mu))
        else:
            cross = variance_contribution(self.backend, self.mean_ct,
                                          self.value, self.pid)
            self._start_core(ctx, R2_CROSS, contribution=cross)
            self._start_core(ctx, R2_SQUARES, value=self.value ** 2)

    def _start_round3(self, ctx):
        if R3 in self._started:
            return
        self._started.add(R3)
        self.outlier = is_outlier(self.value, self.mu, self.sigma, self.params.c)
        self.r3, msg = init_round3(self.pid, self.value, self.outlier,
                                   self.pk, self.n, self.backend)
        adjust_n_on_fault(self.r3.core, self.correct)
        ctx.broadcast(msg)
        self._maybe_complete(ctx, R3)

    # event handling ---------------------------------------------------------

    def on_start(self, ctx):
        self._start_core(ctx, R1, value=self.value)

    def on_deliver(self, ctx, batch):
        per_instance: dict[str, list] = {}
        for sender, msg in batch:
            if msg.kind == AGGREGATE:
                per_instance.setdefault(msg.instance, []).append(msg)
            elif msg.kind == PREPARED:
                self._handle_prepared(ctx, msg)
            elif msg.kind == RESULT:
                self._handle_result(ctx, msg)
        for instance in sorted(per_instance):
            msgs = per_instance[instance]
            if instance == R3:
                self._fold_round3(ctx, msgs)
            elif instance in self.cores:
                state = self.cores[instance]
                changed, decision = self._fold_batch(state, msgs, self.backend)
                if changed:
                    ctx.broadcast(self._snapshot_msg(state))
                if decision is not None:
                    self._emit_prepared(ctx, instance, decision)

    def _fold_round3(self, ctx, msgs):
        if self.r3 is None:
            return
        changed = False
        decision = None
        for msg in msgs:
            _, out, dec = on_receive_round3(self.r3, msg, self.backend)
            changed = changed or bool(out)
            decision = decision or dec
        if changed:
            core = self.r3.core
            ctx.broadcast(ProtocolMessage(
                R3, AGGREGATE, votes_ct=core.votes_ct,
                counts=tuple(int(x) for x in core.counts),
                participating_ct=self.r3.participating_ct))
        if decision is not None:
            self._emit_prepared(ctx, R3, decision)

    def _emit_prepared(self, ctx, instance, decision):
        ctx.mark_complete(instance)
        if instance == R3:
            pv, pp = decision
            msg = ProtocolMessage(R3, PREPARED, votes_ct=pv, participating_ct=pp)
        else:
            msg = ProtocolMessage(instance, PREPARED, votes_ct=decision)
        ctx.send(netsim.TRUSTED, msg)
        self._forwarded_prepared.add(instance)
        ctx.broadcast(msg)
        if instance == R1:
            self._adopt_mean(ctx, msg.votes_ct)

    def _handle_prepared(self, ctx, msg):
        first = msg.instance not in self._forwarded_prepared
        if first:
            self._forwarded_prepared.add(msg.instance)
            ctx.broadcast(msg)
        if msg.instance == R1:
            self._adopt_mean(ctx, msg.votes_ct)

    def _adopt_mean(self, ctx, mean_ct):
        if self.mean_ct is None:
            self.mean_ct = mean_ct
            if self.route == "encrypted":
                self._start_round2(ctx)

    def _handle_result(self, ctx, msg):
        if msg.instance == R1:
            if self.mu is None:
                self.mu = msg.extra["mu"]
                self._start_round2(ctx)
        elif msg.instance == R2:
            if self.sigma is None:
                if self.mu is None:
                    self.mu = msg.extra["mu"]
                self.sigma = sigma_from_round2(msg.extra["variance"])
                self._start_round3(ctx)
        elif msg.instance == R3:
            if "outcome" in msg.extra:
                ctx.decide(None)
            else:
                ctx.decide(msg.extra["value"])

    # fault handling ---------------------------------------------------------

    def on_crash_notice(self, ctx, crashed):
        self.correct = set(range(self.n)) - set(crashed)
        for instance in sorted(self.cores):
            state = self.cores[instance]
            if state.phase == ACTIVE:
                adjust_n_on_fault(state, self.correct)
                self._maybe_complete(ctx, instance)
        if self.r3 is not None and self.r3.core.phase == ACTIVE:
            adjust_n_on_fault(self.r3.core, self.correct)
            self._maybe_complete(ctx, R3)

    def _maybe_complete(self, ctx, instance):
        """Crash adjustments can satisfy a pending termination condition
        without any further message; re-check and emit."""
        if instance == R3:
            if self.r3 is None:
                return
            core = self.r3.core
            if core.phase != ACTIVE or not all(core.counts[j] > 0 for j in core.required):
                return
            core.phase = DECIDED
            pv = prepare(self.backend, core.votes_ct, core.counts,
                         core.prepare_n, include=core.include)
            pp = prepare(self.backend, self.r3.participating_ct, core.counts,
                         core.prepare_n, include=core.include)
            self.backend.record_possession(self.pid, pv)
            self.backend.record_possession(self.pid, pp)
            self._emit_prepared(ctx, R3, (pv, pp))
            return
        state = self.cores.get(instance)
        if state is None or state.phase != ACTIVE:
            return
        if all(state.counts[j] > 0 for j in state.required):
            state.phase = DECIDED
            decision = prepare(self.backend, state.votes_ct, state.counts,
                               state.prepare_n, include=state.include)
            self.backend.record_possession(self.pid, decision)
            self._emit_prepared(ctx, instance, decision)


class OutlierCollectorNode(netsim.Node):
    """Keyholder gating the rounds; never sees an unprepared aggregate."""

    def __init__(self, key_material, n: int, backend: SlotBackend,
                 route: str = "decrypt"):
        self.key = key_material
        self.n = n
        self.backend = backend
        self.route = route
        self.prepared: dict[str, ProtocolMessage] = {}
        self.announced: set[str] = set()

    def on_deliver(self, ctx, batch):
        for sender, msg in batch:
            if msg.kind != PREPARED or msg.instance in self.prepared:
                continue
            self.prepared[msg.instance] = msg
            self._advance(ctx)

    def _decrypt(self, ct) -> float:
        return finalize_trusted(self.backend, self.key.secret_part, ct,
                                self.n, caller=netsim.TRUSTED)

    def _advance(self, ctx):
        if self.route == "decrypt":
            if R1 in self.prepared and R1 not in self.announced:
                self.announced.add(R1)
                mu = self._decrypt(self.prepared[R1].votes_ct)
                ctx.note("mu", mu)
                ctx.broadcast_processes(ProtocolMessage(R1, RESULT,
                                                        extra={"mu": mu}))
            if R2 in self.prepared and R2 not in self.announced:
                self.announced.add(R2)
                variance = self._decrypt(self.prepared[R2].votes_ct)
                ctx.note("variance", variance)
                ctx.broadcast_processes(ProtocolMessage(R2, RESULT,
                                                        extra={"variance": variance}))
        else:
            if (R2 not in self.announced and R1 in self.prepared
                    and R2_CROSS in self.prepared and R2_SQUARES in self.prepared):
                self.announced.add(R2)
                mean_ct = self.prepared[R1].votes_ct
                var_ct = combine_variance(self.backend, mean_ct,
                                          self.prepared[R2_CROSS].votes_ct,
                                          self.prepared[R2_SQUARES].votes_ct)
                self.backend.record_possession(netsim.TRUSTED, var_ct)
                variance = self._decrypt(var_ct)
                mu = self._decrypt(mean_ct)
                ctx.note("mu", mu)
                ctx.note("variance", variance)
                ctx.broadcast_processes(ProtocolMessage(
                    R2, RESULT, extra={"mu": mu, "variance": variance}))
        if R3 in self.prepared and R3 not in self.announced:
            self.announced.add(R3)
            msg = self.prepared[R3]
            try:
                value = finalize_outlier(self.backend, self.key.secret_part,
                                         msg.votes_ct, msg.participating_ct,
                                         self.n, caller=netsim.TRUSTED)
            except AllOutliersError:
                ctx.note("outcome", "all-outliers")
                ctx.broadcast_processes(ProtocolMessage(
                    R3, RESULT, extra={"outcome": "all-outliers"}))
                return
            ctx.decide(value)
            ctx.broadcast_processes(ProtocolMessage(R3, RESULT,
                                                    extra={"value": value}))


def build(topology: Topology, inputs, c: float, *, variance_route: str = "decrypt",
          seed: int = 0, noise_epsilon: float = 0.0) -> netsim.ProtocolSetup:
    from .avg_consensus import ProcessInput
    n = topology.n
    backend = SlotBackend(BackendConfig(slot_capacity_for(n), noise_epsilon),
                          seed=seed * 104729 + 7)
    key = backend.keygen(netsim.TRUSTED)
    nodes = {}
    values = [ProcessInput(float(v)).v for v in inputs]
    for pid in range(n):
        nodes[pid] = OutlierProcessNode(pid, values[pid], c, key.public_part,
                                        n, backend, route=variance_route)
    nodes[netsim.TRUSTED] = OutlierCollectorNode(key, n, backend,
                                                 route=variance_route)
    private = set(values)
    private.update(round2_input(v, float(np.mean(values))) for v in values)
    return netsim.ProtocolSetup(
        nodes=nodes, backend=backend,
        private_values=frozenset(private),
        expected_deciders=set(range(n)),
    )
