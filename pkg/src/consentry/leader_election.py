"""Privacy-preserving leader election with one optional secondary vote.

Every process casts a one-hot ballot into a flattened n*n matrix (entry
p*n + s counts ballots with primary p and secondary s) followed by n
primary-only slots.  Ballot ciphertexts cannot be merged across copies, so
each origin's ciphertext travels as a lineage: a process contributes its
ballot to a lineage copy at most once (tracked via the plaintext 0/1
counts) and stores/forwards only copies with strictly more contributors.
A copy whose counts are all-ones is complete and goes to the keyholder,
whose decryption reveals tallies only, never who voted for whom.

Elimination follows the shallow ranked-vote rule: no majority -> eliminate
the fewest-vote candidate (ties picked by the id-independent mod-k rule),
transfer its ballots to their live secondaries (at most one transfer per
ballot, otherwise the vote exhausts), and crown on majority, last-standing
or an all-tied mod-k break.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import netsim
from .avg_consensus import AGGREGATE, COMPLETE, RESULT, ProtocolMessage
from .he_slots import (BackendConfig, Ciphertext, SlotBackend, SlotVector,
                       slot_capacity_for)
from .topology import Topology


class InvalidBallotError(Exception):
    pass


class CorruptedTallyError(Exception):
    pass


@dataclass(frozen=True)
class Ballot:
    primary: int
    secondary: int | None = None

    def __post_init__(self):
        if self.secondary is not None and self.secondary == self.primary:
            raise InvalidBallotError(
                "secondary vote cannot designate the primary candidate")


def instance_for_origin(origin: int) -> str:
    return f"elect/{origin}"


def ballot_layout(n: int) -> tuple[int, int]:
    """(flat length n*n + n, padded slot capacity)."""
    flat = n * n + n
    return flat, slot_capacity_for(flat)


def flat_index(n: int, primary: int, secondary: int | None) -> int:
    if not (0 <= primary < n):
        raise InvalidBallotError(f"primary {primary} out of range for n={n}")
    if secondary is None:
        return n * n + primary
    if not (0 <= secondary < n):
        raise InvalidBallotError(f"secondary {secondary} out of range for n={n}")
    if secondary == primary:
        raise InvalidBallotError("secondary vote cannot equal primary")
    return primary * n + secondary


def make_ballot_vector(ballot: Ballot, n: int, capacity: int | None = None) -> SlotVector:
    """One-hot encoding of a ballot in the flattened matrix layout."""
    _, cap = ballot_layout(n)
    if capacity is not None:
        cap = capacity
    return SlotVector.impulse(cap, flat_index(n, ballot.primary, ballot.secondary))


@dataclass
class ElectionState:
    """Best lineage copy a process has adopted (0/1 counts: who contributed)."""

    id: int
    instance: str
    n: int
    ballots_ct: Ciphertext
    counts: np.ndarray
    phase: str = "active"


def init_election(pid: int, ballot: Ballot, pk, n: int,
                  backend: SlotBackend) -> tuple[ElectionState, ProtocolMessage]:
    """Start this process's own lineage, already carrying its ballot."""
    cap = backend.config.slot_capacity
    instance = instance_for_origin(pid)
    ct = backend.encrypt(pk, make_ballot_vector(ballot, n, cap),
                         (pid, f"{instance}:ballot"))
    counts = np.zeros(cap, dtype=np.int64)
    counts[pid] = 1
    state = ElectionState(id=pid, instance=instance, n=n,
                          ballots_ct=ct, counts=counts)
    msg = ProtocolMessage(instance, AGGREGATE, votes_ct=ct,
                          counts=tuple(int(x) for x in counts))
    return state, msg


def on_receive_election(state: ElectionState | None, msg: ProtocolMessage,
                        own_ballot: Ballot, pk, backend: SlotBackend,
                        pid: int, n: int, required=None):
    """Contribute (once per lineage copy) and adopt strictly larger copies.

    Returns (state, rebroadcast messages, complete ciphertext or None).
    """
    required = tuple(required) if required is not None else tuple(range(n))
    incoming = np.asarray(msg.counts, dtype=np.int64)
    if incoming[pid]:
        cand_ct, cand_counts = msg.votes_ct, incoming
    else:
        fresh = backend.encrypt(pk, make_ballot_vector(own_ballot, n,
                                                       backend.config.slot_capacity),
                                (pid, f"{msg.instance}:ballot"))
        cand_ct = backend.add_ct(msg.votes_ct, fresh)
        cand_counts = incoming.copy()
        cand_counts[pid] = 1
    size = int(cand_counts[:n].sum())
    have = 0 if state is None else int(state.counts[:n].sum())
    if size <= have:
        return state, [], None
    backend.record_possession(pid, cand_ct)
    if state is None:
        state = ElectionState(id=pid, instance=msg.instance, n=n,
                              ballots_ct=cand_ct, counts=cand_counts)
    else:
        state.ballots_ct = cand_ct
        state.counts = cand_counts
    if all(cand_counts[j] > 0 for j in required):
        state.phase = "complete"
        complete = backend.mark_prepared(cand_ct)
        backend.record_possession(pid, complete)
        return state, [], complete
    out = ProtocolMessage(msg.instance, AGGREGATE, votes_ct=state.ballots_ct,
                          counts=tuple(int(x) for x in state.counts))
    return state, [out], None


# -- tallying and elimination -------------------------------------------------

@dataclass(frozen=True)
class TallyResult:
    primary_tallies: tuple
    matrix: tuple            # n rows of n secondary counts
    primary_only: tuple


def tally(backend: SlotBackend, secret, complete_ct: Ciphertext, n: int,
          caller=None, tolerance: float = 0.01) -> TallyResult:
    """Decrypt a complete ballot aggregate and reshape into tallies."""
    if not complete_ct.prepared:
        raise CorruptedTallyError("refusing to tally an incomplete aggregate")
    vec = backend.decrypt(secret, complete_ct, caller=caller)
    flat = np.asarray(vec.values[:n * n + n])
    rounded = np.rint(flat)
    if float(np.max(np.abs(flat - rounded))) > tolerance:
        raise CorruptedTallyError(
            f"slots deviate from integers beyond {tolerance}")
    ints = rounded.astype(np.int64)
    matrix = ints[:n * n].reshape(n, n)
    primary_only = ints[n * n:]
    if np.any(np.diag(matrix) != 0):
        raise CorruptedTallyError("diagonal (primary == secondary) is nonzero")
    if np.any(ints < 0):
        raise CorruptedTallyError("negative tally entry")
    primary = matrix.sum(axis=1) + primary_only
    if int(primary.sum()) != n:
        raise CorruptedTallyError(
            f"total ballots {int(primary.sum())} != process count {n}")
    return TallyResult(tuple(int(x) for x in primary),
                       tuple(tuple(int(x) for x in row) for row in matrix),
                       tuple(int(x) for x in primary_only))


def tie_break(tied_ids, v_tie: int) -> int:
    """Pick the (v_tie mod k)-th smallest id: deterministic, id-shift safe."""
    ids = sorted(tied_ids)
    if not ids:
        raise ValueError("tie_break needs a non-empty candidate set")
    return ids[v_tie % len(ids)]


@dataclass(frozen=True)
class ElectionResult:
    winner: int
    rounds: tuple
    exhausted: int


def elect_winner(primary_tallies, matrix, primary_only) -> ElectionResult:
    """Shallow instant-runoff over the aggregated ballot matrix.

    Each iteration: majority of non-exhausted votes wins; otherwise the
    fewest-vote candidate is eliminated (mod-k pick among tied) and its
    ballots transfer once to live secondaries or exhaust; a sole survivor
    or an all-tied field ends the election.
    """
    k = len(primary_tallies)
    if k == 0:
        raise ValueError("no candidates")
    total = int(sum(primary_tallies))
    groups = []
    for p in range(k):
        for s in range(k):
            if matrix[p][s]:
                groups.append({"current": p, "secondary": s,
                               "count": int(matrix[p][s]), "transferred": False})
        if primary_only[p]:
            groups.append({"current": p, "secondary": None,
                           "count": int(primary_only[p]), "transferred": False})
    live = set(range(k))
    exhausted = 0
    rounds = []

    def current_votes():
        votes = {c: 0 for c in live}
        for g in groups:
            if g["current"] in live:
                votes[g["current"]] += g["count"]
        return votes

    while True:
        votes = current_votes()
        active = total - exhausted
        record = {"tallies": {c: votes[c] for c in sorted(live)},
                  "exhausted": exhausted, "eliminated": None,
                  "tie_break": None, "winner": None, "by": None}
        top = max(sorted(live), key=lambda c: votes[c])
        if 2 * votes[top] > active:
            record["winner"], record["by"] = top, "majority"
            rounds.append(record)
            return ElectionResult(top, tuple(rounds), exhausted)

        fewest = min(votes[c] for c in live)
        tied = sorted(c for c in live if votes[c] == fewest)
        if len(tied) > 1:
            loser = tie_break(tied, fewest)
            record["tie_break"] = {"among": tied, "v_tie": fewest, "picked": loser}
        else:
            loser = tied[0]
        record["eliminated"] = loser
        live.discard(loser)
        for g in groups:
            if g["current"] != loser:
                continue
            if not g["transferred"] and g["secondary"] in live:
                g["current"] = g["secondary"]
                g["transferred"] = True
            else:
                g["current"] = None
                exhausted += g["count"]
        record["exhausted_after"] = exhausted
        rounds.append(record)

        votes = current_votes()
        if len(live) == 1:
            winner = next(iter(live))
            rounds.append({"tallies": {winner: votes[winner]},
                           "exhausted": exhausted, "eliminated": None,
                           "tie_break": None, "winner": winner,
                           "by": "last-standing"})
            return ElectionResult(winner, tuple(rounds), exhausted)
        remaining = {votes[c] for c in live}
        if len(remaining) == 1:
            shared = remaining.pop()
            winner = tie_break(live, shared)
            rounds.append({"tallies": {c: votes[c] for c in sorted(live)},
                           "exhausted": exhausted, "eliminated": None,
                           "tie_break": {"among": sorted(live), "v_tie": shared,
                                         "picked": winner},
                           "winner": winner, "by": "tie-break"})
            return ElectionResult(winner, tuple(rounds), exhausted)


# -- simulation actors --------------------------------------------------------

class ElectionProcessNode(netsim.Node):
    def __init__(self, pid: int, ballot: Ballot, pk, n: int, backend: SlotBackend):
        self.pid = pid
        self.ballot = ballot
        self.pk = pk
        self.n = n
        self.backend = backend
        self.required = tuple(range(n))
        self.states: dict[str, ElectionState] = {}
        self.completed: set[str] = set()

    def on_start(self, ctx):
        state, msg = init_election(self.pid, self.ballot, self.pk, self.n,
                                   self.backend)
        self.states[state.instance] = state
        ctx.broadcast(msg)

    def on_deliver(self, ctx, batch):
        per_lineage: dict[str, list] = {}
        for sender, msg in batch:
            if msg.kind == AGGREGATE:
                per_lineage.setdefault(msg.instance, []).append(msg)
            elif msg.kind == RESULT:
                ctx.decide(msg.extra["winner"])
        for lineage in sorted(per_lineage):
            state = self.states.get(lineage)
            before = 0 if state is None else int(state.counts[:self.n].sum())
            complete = None
            for msg in per_lineage[lineage]:
                state, _, done = on_receive_election(
                    state, msg, self.ballot, self.pk, self.backend,
                    self.pid, self.n, required=self.required)
                if done is not None:
                    complete = done
            if state is None:
                continue
            self.states[lineage] = state
            if complete is not None and lineage not in self.completed:
                self.completed.add(lineage)
                ctx.mark_complete(lineage)
                ctx.send(netsim.TRUSTED, ProtocolMessage(
                    lineage, COMPLETE, votes_ct=complete,
                    counts=tuple(int(x) for x in state.counts)))
            elif int(state.counts[:self.n].sum()) > before:
                ctx.broadcast(ProtocolMessage(
                    lineage, AGGREGATE, votes_ct=state.ballots_ct,
                    counts=tuple(int(x) for x in state.counts)))

    def on_crash_notice(self, ctx, crashed):
        self.required = tuple(p for p in range(self.n) if p not in crashed)


class ElectionCollectorNode(netsim.Node):
    """Keyholder: tallies the first complete lineage, verifies the rest."""

    def __init__(self, key_material, n: int, backend: SlotBackend):
        self.key = key_material
        self.n = n
        self.backend = backend
        self.result: ElectionResult | None = None
        self.first_tally: TallyResult | None = None

    def on_deliver(self, ctx, batch):
        for sender, msg in batch:
            if msg.kind != COMPLETE:
                continue
            t = tally(self.backend, self.key.secret_part, msg.votes_ct,
                      self.n, caller=ctx.pid)
            if self.first_tally is None:
                self.first_tally = t
                self.result = elect_winner(t.primary_tallies, t.matrix,
                                           t.primary_only)
                ctx.decide(self.result.winner)
                ctx.note("election_rounds", list(self.result.rounds))
                ctx.note("election_exhausted", self.result.exhausted)
                ctx.broadcast_processes(ProtocolMessage(
                    msg.instance, RESULT,
                    extra={"winner": self.result.winner, "issuer": "trusted"}))
            elif t.primary_tallies != self.first_tally.primary_tallies:
                raise CorruptedTallyError(
                    "complete lineages disagree on primary tallies")


def parse_ballots(raw, n: int) -> list[Ballot]:
    if len(raw) != n:
        raise ValueError(f"need one ballot per process, got {len(raw)} for n={n}")
    out = []
    for item in raw:
        if isinstance(item, Ballot):
            out.append(item)
        else:
            out.append(Ballot(int(item["primary"]),
                              None if item.get("secondary") is None
                              else int(item["secondary"])))
    for b in out:
        flat_index(n, b.primary, b.secondary)   # range validation
    return out


def build(topology: Topology, ballots, *, seed: int = 0,
          noise_epsilon: float = 0.0) -> netsim.ProtocolSetup:
    n = topology.n
    parsed = parse_ballots(ballots, n)
    _, cap = ballot_layout(n)
    backend = SlotBackend(BackendConfig(cap, noise_epsilon), seed=seed * 104729 + 7)
    key = backend.keygen(netsim.TRUSTED)
    nodes = {}
    for pid in range(n):
        nodes[pid] = ElectionProcessNode(pid, parsed[pid], key.public_part,
                                         n, backend)
    nodes[netsim.TRUSTED] = ElectionCollectorNode(key, n, backend)
    return netsim.ProtocolSetup(
        nodes=nodes, backend=backend,
        private_values=frozenset(),
        expected_deciders=set(range(n)),
    )
