"""Deterministic discrete-event network simulator with a privacy auditor.

Logical time only: in synchronous mode every message sent during round t is
delivered at round t+1; in async mode each send draws a seeded integer
latency.  Crash faults are detectable: every correct process receives a
notification at the crash time.  A run is a pure function of
(scenario, seed); reports serialize byte-identically across repeats.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, asdict
from typing import Callable

from .topology import Topology, load_topology, from_family
import random

TRUSTED = "trusted"            # collector actor id, outside the graph
CIPHERTEXT_BYTES = 1 << 16     # nominal ciphertext size for complexity reports
MESSAGE_BASE_BYTES = 64

#: plaintext message fields that are protocol outputs by design; the leak
#: auditor ignores them when matching against private inputs.
DECLARED_PLAIN_KEYS = frozenset(
    {"average", "mu", "sigma", "variance", "value", "winner", "outcome",
     "rounds", "initiator", "instance"})


class ScenarioError(Exception):
    pass


@dataclass(frozen=True)
class CrashFault:
    process: int
    time: int


@dataclass(frozen=True)
class FaultPlan:
    crashes: tuple[CrashFault, ...] = ()
    detectable: bool = True     # the simulator models only detectable crashes

    @classmethod
    def from_list(cls, items) -> "FaultPlan":
        crashes = []
        for it in items:
            if isinstance(it, CrashFault):
                crashes.append(it)
            else:
                crashes.append(CrashFault(int(it["process"]), int(it["time"])))
        return cls(tuple(crashes))


_SCENARIO_FIELDS = {
    "protocol", "topology", "inputs", "c", "variance_route", "seed",
    "schedule", "max_latency", "faults", "trials", "noise_epsilon",
    "initiators", "expect_termination",
}

_PROTOCOLS = ("avg-trusted", "avg-untrusted", "outlier", "election")


@dataclass
class ScenarioConfig:
    """Experiment input for one simulation (or a batch of trials)."""

    protocol: str
    topology: object                 # Topology | dict | path to JSON file
    inputs: object                   # list of reals / ballots, or {"random_uniform": [lo, hi]}
    c: float | None = None
    variance_route: str = "decrypt"
    seed: int = 0
    schedule: str = "sync"
    max_latency: int = 4
    faults: FaultPlan = field(default_factory=FaultPlan)
    trials: int = 1
    noise_epsilon: float = 0.0
    initiators: list[int] | None = None
    expect_termination: bool = True

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        unknown = set(raw) - _SCENARIO_FIELDS
        if unknown:
            raise ScenarioError(f"unknown config keys: {sorted(unknown)}")
        for key in ("protocol", "topology", "inputs"):
            if key not in raw:
                raise ScenarioError(f"missing required config key {key!r}")
        kwargs = dict(raw)
        if "faults" in kwargs and not isinstance(kwargs["faults"], FaultPlan):
            kwargs["faults"] = FaultPlan.from_list(kwargs["faults"])
        cfg = cls(**kwargs)
        cfg.basic_validate()
        return cfg

    def basic_validate(self):
        if self.protocol not in _PROTOCOLS:
            raise ScenarioError(f"unknown protocol {self.protocol!r}")
        if self.schedule not in ("sync", "async"):
            raise ScenarioError(f"schedule must be sync or async, got {self.schedule!r}")
        if self.variance_route not in ("decrypt", "encrypted"):
            raise ScenarioError(f"variance_route must be decrypt or encrypted")
        if self.protocol == "outlier":
            if self.c is None or self.c <= 0:
                raise ScenarioError("outlier protocol requires c > 0")
        elif self.c is not None:
            raise ScenarioError(f"c is only meaningful for the outlier protocol")
        if self.variance_route != "decrypt" and self.protocol != "outlier":
            raise ScenarioError("variance_route is only meaningful for the outlier protocol")
        if self.initiators is not None and self.protocol != "avg-untrusted":
            raise ScenarioError("initiators only apply to avg-untrusted")
        if self.max_latency < 1:
            raise ScenarioError("max_latency must be >= 1")
        if self.trials < 1:
            raise ScenarioError("trials must be >= 1")
        if self.noise_epsilon < 0:
            raise ScenarioError("noise_epsilon must be >= 0")

    def resolve_topology(self, seed_offset: int = 0) -> Topology:
        source = self.topology
        if isinstance(source, dict) and "family" in source:
            rng = random.Random((self.seed + seed_offset) * 2654435761 % (2**31))
            return from_family(source["family"], int(source["n"]), rng,
                               p=float(source.get("p", 0.4)))
        return load_topology(source)

    def resolve_inputs(self, topo: Topology, seed_offset: int = 0):
        if isinstance(self.inputs, dict) and "random_uniform" in self.inputs:
            lo, hi = self.inputs["random_uniform"]
            rng = random.Random((self.seed + seed_offset) * 1099087573 % (2**31) + 17)
            return [rng.uniform(lo, hi) for _ in range(topo.n)]
        vals = list(self.inputs)
        if len(vals) != topo.n:
            raise ScenarioError(
                f"inputs length {len(vals)} != process count {topo.n}")
        return vals


class SchedulePolicy:
    """Delivery-order source: per-send integer latency, seeded and repeatable."""

    def __init__(self, mode: str, seed: int, max_latency: int = 4):
        if mode not in ("sync", "async"):
            raise ScenarioError(f"unknown schedule mode {mode!r}")
        self.mode = mode
        self.max_latency = max_latency
        self._rng = random.Random(seed)

    def latency(self, sender, receiver) -> int:
        if self.mode == "sync":
            return 1
        return self._rng.randint(1, self.max_latency)


@dataclass
class PrivacyViolation:
    rule: str
    observer: object
    detail: str

    def as_dict(self) -> dict:
        return {"rule": self.rule, "observer": str(self.observer), "detail": self.detail}


@dataclass
class SimReport:
    """Structured result of one simulation run."""

    schema_version: int
    protocol: str
    n: int
    seed: int
    schedule: str
    decided_values: dict
    rounds_to_decide: dict
    messages_sent: dict
    bytes_modeled: dict
    privacy_violations: list
    termination: str            # "decided" | "deadline-exceeded"
    extra: dict

    def to_json(self) -> str:
        payload = asdict(self)
        payload["decided_values"] = {str(k): v for k, v in self.decided_values.items()}
        payload["rounds_to_decide"] = {str(k): v for k, v in self.rounds_to_decide.items()}
        payload["messages_sent"] = {str(k): v for k, v in self.messages_sent.items()}
        payload["bytes_modeled"] = {str(k): v for k, v in self.bytes_modeled.items()}
        return json.dumps(payload, sort_keys=True, indent=2)


@dataclass
class SimTrace:
    """Raw run artifacts consumed by the privacy auditor."""

    backend: object
    messages: list              # (time, sender, receiver, ProtocolMessage)
    private_values: frozenset


class Node:
    """Base protocol actor; subclasses override the three callbacks."""

    def on_start(self, ctx):
        pass

    def on_deliver(self, ctx, batch):
        pass

    def on_crash_notice(self, ctx, crashed):
        pass


class Context:
    """Per-actor handle through which a node interacts with the simulation."""

    def __init__(self, sim: "Simulation", pid):
        self._sim = sim
        self.pid = pid
        if isinstance(pid, int):
            self.neighbors = tuple(sorted(sim.topology.neighbors(pid)))
        else:
            self.neighbors = ()

    @property
    def process_ids(self) -> tuple[int, ...]:
        return tuple(range(self._sim.topology.n))

    def send(self, dst, msg):
        self._sim._send(self.pid, dst, msg)

    def broadcast(self, msg, exclude=()):
        for dst in self.neighbors:
            if dst not in exclude:
                self.send(dst, msg)

    def broadcast_processes(self, msg):
        """Collector channel: deliver to every (correct) process directly."""
        for dst in self.process_ids:
            self.send(dst, msg)

    def decide(self, value):
        self._sim._record_decide(self.pid, value)

    def mark_complete(self, instance: str):
        self._sim._record_complete(self.pid, instance)

    def note(self, key: str, value):
        self._sim.extra[key] = value


@dataclass
class ProtocolSetup:
    """Everything a protocol builder hands to the engine."""

    nodes: dict                       # actor id -> Node
    backend: object                   # SlotBackend
    private_values: frozenset
    expected_deciders: set
    primary_instance: str | None = None
    invariant_check: Callable | None = None


class Simulation:
    """Single-threaded deterministic event loop over one protocol setup."""

    _PRI_CRASH, _PRI_DELIVER = 0, 1

    def __init__(self, topology: Topology, setup: ProtocolSetup,
                 policy: SchedulePolicy, faults: FaultPlan | None = None,
                 deadline: int | None = None):
        self.topology = topology
        self.setup = setup
        self.policy = policy
        self.faults = faults or FaultPlan()
        self.extra: dict = {}
        self._queue: list = []
        self._seq = 0
        self._now = 0
        self._crashed_at: dict[int, int] = {}
        self._decided: dict = {}
        self._decide_time: dict = {}
        self._completions: dict = {}
        self._messages_sent: dict = {}
        self._bytes: dict = {}
        self._message_log: list = []
        self._activity = False
        if deadline is None:
            diam = topology.diameter() if topology.is_connected() else topology.n
            deadline = max(50, 10 * topology.n * max(1, diam))
        self._deadline = deadline

    # -- engine internals -------------------------------------------------

    def _push(self, time, priority, payload):
        self._seq += 1
        heapq.heappush(self._queue, (time, priority, self._seq, payload))

    def _edge_ok(self, frm, dst) -> bool:
        if frm == TRUSTED or dst == TRUSTED:
            return True
        return dst in self.topology.neighbors(frm)

    def _send(self, frm, dst, msg):
        if not self._edge_ok(frm, dst):
            raise ScenarioError(f"no channel from {frm!r} to {dst!r}")
        self._activity = True
        self._messages_sent[frm] = self._messages_sent.get(frm, 0) + 1
        n_cts = sum(1 for ct in (msg.votes_ct, msg.participating_ct) if ct is not None)
        self._bytes[frm] = self._bytes.get(frm, 0) + MESSAGE_BASE_BYTES + n_cts * CIPHERTEXT_BYTES
        when = self._now + self.policy.latency(frm, dst)
        self._push(when, self._PRI_DELIVER, ("deliver", frm, dst, msg))

    def _record_decide(self, pid, value):
        if pid not in self._decided:
            self._decided[pid] = value
            self._decide_time[pid] = self._now
            self._activity = True

    def _record_complete(self, pid, instance):
        key = (pid, instance)
        if key not in self._completions:
            self._completions[key] = self._now
            self._activity = True

    def _alive(self, actor) -> bool:
        return actor not in self._crashed_at

    # -- main loop ---------------------------------------------------------

    def run(self) -> tuple[SimReport, SimTrace]:
        nodes = self.setup.nodes
        backend = self.setup.backend
        ctxs = {pid: Context(self, pid) for pid in nodes}
        for pid in nodes:
            backend.register_observer(pid)
        for crash in self.faults.crashes:
            self._push(crash.time, self._PRI_CRASH, ("crash", crash.process))

        for pid in sorted(nodes, key=lambda x: (isinstance(x, str), x)):
            self._now = 0
            nodes[pid].on_start(ctxs[pid])
        deadline_hit = False
        since_progress = 0

        while self._queue:
            time, priority, _, payload = heapq.heappop(self._queue)
            self._now = time
            if payload[0] == "crash":
                _, pid = payload
                if pid in self._crashed_at:
                    continue
                self._crashed_at[pid] = time
                crashed = frozenset(self._crashed_at)
                for other in sorted(nodes, key=lambda x: (isinstance(x, str), x)):
                    if self._alive(other):
                        nodes[other].on_crash_notice(ctxs[other], crashed)
                continue

            # gather the full batch for this timestamp, grouped per receiver
            batch_events = [payload]
            while self._queue and self._queue[0][0] == time and \
                    self._queue[0][1] == self._PRI_DELIVER:
                batch_events.append(heapq.heappop(self._queue)[3])
            per_receiver: dict = {}
            for _, frm, dst, msg in batch_events:
                crashed_from = frm in self._crashed_at and time >= self._crashed_at[frm]
                crashed_to = dst in self._crashed_at and time >= self._crashed_at[dst]
                if crashed_from or crashed_to:
                    continue
                per_receiver.setdefault(dst, []).append((frm, msg))

            self._activity = False
            for dst in sorted(per_receiver, key=lambda x: (isinstance(x, str), x)):
                deliveries = per_receiver[dst]
                for frm, msg in deliveries:
                    self._message_log.append((time, frm, dst, msg))
                    for ct in (msg.votes_ct, msg.participating_ct):
                        if ct is not None:
                            backend.record_possession(dst, ct)
                nodes[dst].on_deliver(ctxs[dst], deliveries)
            if self.setup.invariant_check is not None:
                self.setup.invariant_check(nodes)

            if self._activity:
                since_progress = 0
            else:
                since_progress += len(batch_events)
                if since_progress > self._deadline:
                    deadline_hit = True
                    break

        report = self._build_report(deadline_hit)
        trace = SimTrace(backend=backend, messages=list(self._message_log),
                         private_values=self.setup.private_values)
        return report, trace

    def _build_report(self, deadline_hit: bool) -> SimReport:
        expected = {p for p in self.setup.expected_deciders
                    if p not in self._crashed_at}
        all_decided = all(p in self._decided for p in expected)
        termination = "decided" if (all_decided and not deadline_hit) else "deadline-exceeded"
        rounds = {}
        primary = self.setup.primary_instance
        for pid in self._decided:
            if primary is not None and (pid, primary) in self._completions:
                rounds[pid] = self._completions[(pid, primary)]
            else:
                rounds[pid] = self._decide_time[pid]
        if primary is not None:
            for (pid, inst), t in self._completions.items():
                if inst == primary:
                    rounds.setdefault(pid, t)
        extra = dict(self.extra)
        extra["completion_times"] = {
            f"{pid}:{inst}": t for (pid, inst), t in sorted(
                self._completions.items(), key=lambda kv: (str(kv[0][0]), kv[0][1]))}
        if self._crashed_at:
            extra["crashed"] = {str(p): t for p, t in sorted(self._crashed_at.items())}
        return SimReport(
            schema_version=1,
            protocol="", n=self.topology.n, seed=0, schedule=self.policy.mode,
            decided_values=dict(sorted(self._decided.items(), key=lambda kv: str(kv[0]))),
            rounds_to_decide=dict(sorted(rounds.items(), key=lambda kv: str(kv[0]))),
            messages_sent=dict(sorted(self._messages_sent.items(), key=lambda kv: str(kv[0]))),
            bytes_modeled=dict(sorted(self._bytes.items(), key=lambda kv: str(kv[0]))),
            privacy_violations=[],
            termination=termination,
            extra=extra,
        )


# -- privacy auditor -------------------------------------------------------

def _self_taint_only(taint, observer) -> bool:
    return all(tag[0] == observer for tag in taint)


def privacy_audit(trace: SimTrace) -> list[PrivacyViolation]:
    """Honest-but-curious audit over a completed run.

    Flags (a) decryption success by anyone other than the key's holder,
    (b) keyholder exposure to a non-prepared ciphertext tainted by other
    processes' inputs, and (c) any undeclared plaintext message field whose
    value equals a private input.
    """
    violations = []
    backend = trace.backend
    for ev in backend.events():
        holder = backend.holder_of(ev.key_id)
        if ev.kind == "decrypt" and ev.observer != holder:
            violations.append(PrivacyViolation(
                "foreign-decrypt", ev.observer,
                f"decrypted ciphertext {ev.handle} held by {holder!r}"))
        if ev.kind in ("possess", "decrypt") and ev.observer == holder \
                and not ev.prepared and not _self_taint_only(ev.taint, holder):
            violations.append(PrivacyViolation(
                "unprepared-exposure", ev.observer,
                f"keyholder saw raw aggregate {ev.handle} (kind={ev.kind})"))
    private = trace.private_values
    for time, frm, dst, msg in trace.messages:
        for key, value in (msg.extra or {}).items():
            if key in DECLARED_PLAIN_KEYS:
                continue
            for leaf in _float_leaves(value):
                if leaf in private:
                    violations.append(PrivacyViolation(
                        "plaintext-leak", frm,
                        f"field {key!r} in {msg.kind} message at t={time} "
                        f"equals a private input"))
    return violations


def _float_leaves(value):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        yield float(value)
    elif isinstance(value, (list, tuple)):
        for v in value:
            yield from _float_leaves(v)
    elif isinstance(value, dict):
        for v in value.values():
            yield from _float_leaves(v)


# -- scenario runner -------------------------------------------------------

def run(scenario: ScenarioConfig, trial: int = 0) -> SimReport:
    """Execute one trial of a scenario; deterministic in (scenario, seed, trial)."""
    scenario.basic_validate()
    topo = scenario.resolve_topology(trial)
    trial_seed = scenario.seed + trial

    from . import avg_consensus, outlier_consensus, leader_election

    if scenario.protocol == "avg-trusted":
        inputs = scenario.resolve_inputs(topo, trial)
        setup = avg_consensus.build_trusted(topo, inputs, seed=trial_seed,
                                            noise_epsilon=scenario.noise_epsilon)
    elif scenario.protocol == "avg-untrusted":
        inputs = scenario.resolve_inputs(topo, trial)
        setup = avg_consensus.build_untrusted(topo, inputs, scenario.initiators,
                                              seed=trial_seed,
                                              noise_epsilon=scenario.noise_epsilon)
    elif scenario.protocol == "outlier":
        inputs = scenario.resolve_inputs(topo, trial)
        setup = outlier_consensus.build(topo, inputs, scenario.c,
                                        variance_route=scenario.variance_route,
                                        seed=trial_seed,
                                        noise_epsilon=scenario.noise_epsilon)
    else:
        setup = leader_election.build(topo, scenario.inputs, seed=trial_seed,
                                      noise_epsilon=scenario.noise_epsilon)

    policy = SchedulePolicy(scenario.schedule, trial_seed * 7919 + 13,
                            scenario.max_latency)
    sim = Simulation(topo, setup, policy, faults=scenario.faults)
    report, trace = sim.run()
    report.protocol = scenario.protocol
    report.seed = trial_seed
    report.privacy_violations = [v.as_dict() for v in privacy_audit(trace)]
    return report
