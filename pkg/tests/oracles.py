"""Independent plaintext oracles the protocol implementations are checked against.

These deliberately share no code with the package: plain sums, per-ballot
round simulation, and networkx for graph queries.
"""

import math


def mean_oracle(values):
    return sum(values) / len(values)


def outlier_oracle(values, c, participants=None):
    """Three-stage reference: mu over everyone, sigma and filtering over
    `participants` (defaults to everyone; restricted under crash faults).

    Returns (mu, sigma, outlier_flags, filtered_mean_or_None).
    """
    mu = sum(values) / len(values)
    idx = sorted(participants) if participants is not None else list(range(len(values)))
    variance = sum((values[i] - mu) ** 2 for i in idx) / len(idx)
    sigma = math.sqrt(max(0.0, variance))
    flags = {i: abs(values[i] - mu) > c * sigma for i in idx}
    kept = [values[i] for i in idx if not flags[i]]
    filtered = sum(kept) / len(kept) if kept else None
    return mu, sigma, flags, filtered


def irv_oracle(ballots, candidates):
    """Per-ballot shallow instant-runoff simulation.

    `ballots` is a list of (primary, secondary-or-None); `candidates` the
    number of candidates.  Returns the winner id.
    """
    state = [{"cand": p, "sec": s, "moved": False} for p, s in ballots]
    live = set(range(candidates))
    total = len(ballots)
    exhausted = 0

    def votes_of(c):
        return sum(1 for b in state if b["cand"] == c)

    while True:
        votes = {c: votes_of(c) for c in live}
        active = total - exhausted
        top = max(sorted(live), key=lambda c: votes[c])
        if 2 * votes[top] > active:
            return top

        fewest = min(votes[c] for c in live)
        tied = sorted(c for c in live if votes[c] == fewest)
        loser = tied[fewest % len(tied)]
        live.discard(loser)
        for b in state:
            if b["cand"] == loser:
                if not b["moved"] and b["sec"] is not None and b["sec"] in live:
                    b["cand"] = b["sec"]
                    b["moved"] = True
                else:
                    b["cand"] = None
                    exhausted += 1

        if len(live) == 1:
            return next(iter(live))
        after = {c: votes_of(c) for c in live}
        if len(set(after.values())) == 1:
            shared = next(iter(after.values()))
            ids = sorted(live)
            return ids[shared % len(ids)]
