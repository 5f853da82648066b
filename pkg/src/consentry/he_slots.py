"""Slot-vector homomorphic arithmetic behind a swappable engine interface.

The built-in :class:`SlotBackend` stores payloads in the clear but enforces
capability-based access control, provenance (taint) tracking and an
append-only audit ledger.  It is NOT cryptographically secure; privacy
guarantees of the protocols built on top of it are tested as
information-flow properties over the ledger.  A real lattice-crypto
library can be substituted behind :class:`SlotEngine` without touching
protocol code.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class AccessDeniedError(Exception):
    """Decryption attempted with a secret that does not match the ciphertext."""


class KeyMismatchError(Exception):
    """Ciphertext operands are encrypted under different keys."""


class MissingRotationKeysError(Exception):
    """The ciphertext's key was generated without rotation capability."""


class UnknownObserverError(Exception):
    """Observer never appeared in the audit ledger."""


def next_power_of_two(x: int) -> int:
    n = 1
    while n < x:
        n <<= 1
    return n


def slot_capacity_for(n: int) -> int:
    """Smallest legal slot capacity (power of two, >= 2) that can hold n values."""
    return next_power_of_two(max(2, n))


@dataclass(frozen=True)
class BackendConfig:
    """Backend parameters: slot count and per-operation additive error bound."""

    slot_capacity: int
    noise_epsilon: float = 0.0

    def __post_init__(self):
        c = self.slot_capacity
        if c < 2 or (c & (c - 1)) != 0:
            raise ValueError(f"slot_capacity must be a power of two >= 2, got {c}")
        if self.noise_epsilon < 0:
            raise ValueError("noise_epsilon must be >= 0")


class SlotVector:
    """Fixed-length vector of reals occupying the backend's slots."""

    __slots__ = ("_values",)

    def __init__(self, values: Sequence[float] | np.ndarray):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("SlotVector must be one-dimensional")
        arr.setflags(write=False)
        self._values = arr

    @classmethod
    def zeros(cls, capacity: int) -> "SlotVector":
        return cls(np.zeros(capacity))

    @classmethod
    def ones(cls, capacity: int) -> "SlotVector":
        return cls(np.ones(capacity))

    @classmethod
    def impulse(cls, capacity: int, index: int, value: float = 1.0) -> "SlotVector":
        """Vector that is `value` at `index` and zero elsewhere."""
        arr = np.zeros(capacity)
        arr[index] = value
        return cls(arr)

    @property
    def values(self) -> np.ndarray:
        return self._values

    def to_list(self) -> list[float]:
        return [float(x) for x in self._values]

    def __len__(self) -> int:
        return len(self._values)

    def __getitem__(self, i):
        return float(self._values[i])

    def __iter__(self):
        return iter(self._values)

    def __eq__(self, other):
        if not isinstance(other, SlotVector):
            return NotImplemented
        return np.array_equal(self._values, other._values)

    def __repr__(self):
        return f"SlotVector({self.to_list()!r})"


@dataclass(frozen=True)
class PublicPart:
    key_id: str


@dataclass(frozen=True)
class RotationPart:
    key_id: str


@dataclass(frozen=True)
class SecretPart:
    key_id: str
    holder: object


@dataclass(frozen=True)
class KeyMaterial:
    """Key triple bound to the holder process designated at generation."""

    key_id: str
    holder: object
    public_part: PublicPart
    secret_part: SecretPart
    rotation_part: RotationPart | None


class Ciphertext:
    """Opaque handle to an encrypted slot vector.

    The payload is reachable only through :meth:`SlotBackend.decrypt` (audited,
    access-controlled) or the test-only introspection hook.  `taint` records
    which raw inputs flowed into this value; `prepared` marks aggregates whose
    decryption reveals only protocol-level results and is set exclusively by
    the sanctioned prepare/complete steps of the protocol layer.
    """

    __slots__ = ("key_id", "taint", "prepared", "depth", "op_count",
                 "noise_bound", "handle", "_payload")

    def __init__(self, key_id, payload, taint, prepared, depth, op_count,
                 noise_bound, handle):
        self.key_id = key_id
        self.taint = frozenset(taint)
        self.prepared = bool(prepared)
        self.depth = int(depth)
        self.op_count = int(op_count)
        self.noise_bound = float(noise_bound)
        self.handle = int(handle)
        payload = np.asarray(payload, dtype=np.float64)
        payload.setflags(write=False)
        self._payload = payload

    def __repr__(self):
        return (f"Ciphertext(handle={self.handle}, key={self.key_id!r}, "
                f"slots={len(self._payload)}, depth={self.depth}, "
                f"prepared={self.prepared})")


@dataclass(frozen=True)
class AuditEvent:
    """One ledger entry: a ciphertext exposure or decryption attempt."""

    kind: str            # "possess" | "decrypt" | "decrypt-denied"
    observer: object
    handle: int
    key_id: str
    taint: frozenset
    prepared: bool


class SlotEngine(abc.ABC):
    """Adapter seam: exactly the operations protocol code may use.

    A production homomorphic-encryption backend implements this interface;
    protocol modules never touch anything beyond it plus the possession /
    prepared-flag bookkeeping of the simulated backend.
    """

    @abc.abstractmethod
    def keygen(self, holder, with_rotation: bool = True) -> KeyMaterial: ...

    @abc.abstractmethod
    def encrypt(self, public_part: PublicPart, vector: SlotVector, tag) -> Ciphertext: ...

    @abc.abstractmethod
    def decrypt(self, secret_part: SecretPart, ct: Ciphertext, caller=None) -> SlotVector: ...

    @abc.abstractmethod
    def add_ct(self, a: Ciphertext, b: Ciphertext) -> Ciphertext: ...

    @abc.abstractmethod
    def mult_pt(self, a: Ciphertext, p: SlotVector) -> Ciphertext: ...

    @abc.abstractmethod
    def mult_ct(self, a: Ciphertext, b: Ciphertext) -> Ciphertext: ...

    @abc.abstractmethod
    def rotate(self, a: Ciphertext, amount: int) -> Ciphertext: ...

    @abc.abstractmethod
    def audit_view(self, observer) -> list: ...


class SlotBackend(SlotEngine):
    """Cleartext-simulating engine with taint tracking and an audit ledger.

    Deterministic under a supplied seed (key ids, handles and emulated noise
    all derive from it).  With ``noise_epsilon`` = 0 all operations are exact;
    otherwise every operation adds per-slot uniform noise in [-eps, +eps] and
    each ciphertext carries a rigorously tracked cumulative `noise_bound`.
    """

    def __init__(self, config: BackendConfig, seed: int | None = None):
        self.config = config
        self._rng = np.random.default_rng(seed)
        self._holders: dict[str, object] = {}
        self._rotation_ok: dict[str, bool] = {}
        self._events: list[AuditEvent] = []
        self._observers: set = set()
        self._key_seq = 0
        self._handle_seq = 0

    # -- keys ------------------------------------------------------------

    def keygen(self, holder, with_rotation: bool = True) -> KeyMaterial:
        self._key_seq += 1
        key_id = f"key{self._key_seq:02d}-{int(self._rng.integers(0, 2**32)):08x}"
        self._holders[key_id] = holder
        self._rotation_ok[key_id] = bool(with_rotation)
        self._observers.add(holder)
        rotation = RotationPart(key_id) if with_rotation else None
        return KeyMaterial(
            key_id=key_id,
            holder=holder,
            public_part=PublicPart(key_id),
            secret_part=SecretPart(key_id, holder),
            rotation_part=rotation,
        )

    def holder_of(self, key_id: str):
        return self._holders.get(key_id)

    # -- ciphertext construction -----------------------------------------

    def _fresh(self, key_id, payload, taint, depth, op_count, noise_bound,
               prepared=False) -> Ciphertext:
        eps = self.config.noise_epsilon
        if eps > 0:
            payload = payload + self._rng.uniform(-eps, eps, size=payload.shape)
        self._handle_seq += 1
        return Ciphertext(key_id, payload, taint, prepared, depth, op_count,
                          noise_bound + eps, self._handle_seq)

    def _check_len(self, vec: SlotVector):
        if len(vec) != self.config.slot_capacity:
            raise ValueError(
                f"vector length {len(vec)} != slot capacity {self.config.slot_capacity}")

    # -- the eight engine operations -------------------------------------

    def encrypt(self, public_part: PublicPart, vector: SlotVector, tag) -> Ciphertext:
        self._check_len(vector)
        if public_part.key_id not in self._holders:
            raise KeyMismatchError(f"unknown key {public_part.key_id!r}")
        ct = self._fresh(public_part.key_id, np.array(vector.values),
                         taint={tag}, depth=0, op_count=1, noise_bound=0.0)
        owner = tag[0] if isinstance(tag, tuple) and len(tag) == 2 else None
        if owner is not None:
            self.record_possession(owner, ct)
        return ct

    def decrypt(self, secret_part: SecretPart, ct: Ciphertext, caller=None) -> SlotVector:
        observer = caller if caller is not None else secret_part.holder
        if not isinstance(secret_part, SecretPart) or secret_part.key_id != ct.key_id:
            self._events.append(AuditEvent("decrypt-denied", observer, ct.handle,
                                           ct.key_id, ct.taint, ct.prepared))
            self._observers.add(observer)
            raise AccessDeniedError(
                f"secret for {getattr(secret_part, 'key_id', None)!r} cannot decrypt "
                f"ciphertext under {ct.key_id!r}")
        self._events.append(AuditEvent("decrypt", observer, ct.handle,
                                       ct.key_id, ct.taint, ct.prepared))
        self._observers.add(observer)
        return SlotVector(ct._payload)

    def add_ct(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        if a.key_id != b.key_id:
            raise KeyMismatchError("add_ct operands under different keys")
        return self._fresh(a.key_id, a._payload + b._payload,
                           taint=a.taint | b.taint,
                           depth=max(a.depth, b.depth),
                           op_count=a.op_count + b.op_count + 1,
                           noise_bound=a.noise_bound + b.noise_bound)

    def mult_pt(self, a: Ciphertext, p: SlotVector) -> Ciphertext:
        self._check_len(p)
        scale = float(np.max(np.abs(p.values))) if len(p) else 0.0
        return self._fresh(a.key_id, a._payload * p.values,
                           taint=a.taint,
                           depth=a.depth + 1,
                           op_count=a.op_count + 1,
                           noise_bound=a.noise_bound * scale)

    def mult_ct(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        if a.key_id != b.key_id:
            raise KeyMismatchError("mult_ct operands under different keys")
        # |err| <= |a|nb_b + |b|nb_a + nb_a*nb_b, with |a| <= max|stored| + nb_a
        ma = float(np.max(np.abs(a._payload)))
        mb = float(np.max(np.abs(b._payload)))
        bound = ((ma + a.noise_bound) * b.noise_bound
                 + (mb + b.noise_bound) * a.noise_bound
                 + a.noise_bound * b.noise_bound)
        return self._fresh(a.key_id, a._payload * b._payload,
                           taint=a.taint | b.taint,
                           depth=max(a.depth, b.depth) + 1,
                           op_count=a.op_count + b.op_count + 1,
                           noise_bound=bound)

    def rotate(self, a: Ciphertext, amount: int) -> Ciphertext:
        if not self._rotation_ok.get(a.key_id, False):
            raise MissingRotationKeysError(f"no rotation keys for {a.key_id!r}")
        return self._fresh(a.key_id, np.roll(a._payload, -int(amount)),
                           taint=a.taint,
                           depth=a.depth,
                           op_count=a.op_count + 1,
                           noise_bound=a.noise_bound)

    def audit_view(self, observer) -> list[tuple[AuditEvent, frozenset, bool]]:
        """Every exposure of `observer`, with whether it could ever decrypt it."""
        if observer not in self._observers:
            raise UnknownObserverError(f"observer {observer!r} never seen")
        out = []
        for ev in self._events:
            if ev.observer == observer and ev.kind in ("possess", "decrypt"):
                decryptable = self._holders.get(ev.key_id) == observer
                out.append((ev, ev.taint, decryptable))
        return out

    # -- simulated-backend extras (not part of the crypto seam) ----------

    def mark_prepared(self, ct: Ciphertext) -> Ciphertext:
        """Flag an aggregate as safe to decrypt.

        Called only by the sanctioned protocol steps: the prepare-phase
        rotate-sum, the election completeness check, and the encrypted
        variance combiner (all of which compose already-aggregate values).
        """
        return Ciphertext(ct.key_id, ct._payload, ct.taint, True, ct.depth,
                          ct.op_count, ct.noise_bound, ct.handle)

    def record_possession(self, observer, ct: Ciphertext):
        self._observers.add(observer)
        self._events.append(AuditEvent("possess", observer, ct.handle,
                                       ct.key_id, ct.taint, ct.prepared))

    def register_observer(self, observer):
        self._observers.add(observer)

    def events(self) -> tuple[AuditEvent, ...]:
        return tuple(self._events)

    def inspect_payload(self, ct: Ciphertext) -> np.ndarray:
        """Test/introspection hook: raw payload, bypassing access control.

        Never used by protocol code; reads are not audit events.
        """
        return np.array(ct._payload)
