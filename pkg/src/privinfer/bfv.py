"""BFV over Z_q[x]/(x^n+1): private-key encryption with an offline/online
split, batch and direct encodings, noise-budget probing, and the homomorphic
operation set HAdd/PSub/PlainAdd/PMult/CMult/HRot/DRot.

Only private-key encryption is used on the hot path (the model holder never
encrypts); a reference public-key path exists for the latency comparison.
"""

import hashlib
import math
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import ring
from .errors import EncodingError, ParameterError, ProtocolError
from .params import RingParams
from .ring import Domain, ModPoly


class Encoding(Enum):
    BATCH = 0
    DIRECT = 1


@dataclass
class Plaintext:
    poly: ModPoly  # mod p, coefficient domain
    encoding: Encoding


@dataclass
class Ciphertext:
    c0: ModPoly
    c1: ModPoly
    encoding: Encoding
    domain: Domain
    fresh: bool = False
    seed: bytes | None = None  # c1 reproducible from this when fresh

    @property
    def n(self) -> int:
        return self.c0.n


@dataclass
class SecretKey:
    s: ModPoly  # ternary, stored mod q, coefficient domain
    params: RingParams
    s_eval: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.s_eval is None:
            plan = ring.get_plan(self.params.n, self.params.q)
            self.s_eval = plan.fwd(self.s.coeffs)


# ---------------------------------------------------------------------------
# sampling


def _sample_uniform(params: RingParams, rng) -> np.ndarray:
    ring._bump("rng_draws", params.n)
    return rng.integers(0, params.q, params.n, dtype=np.int64)


def _sample_error(params: RingParams, rng) -> np.ndarray:
    """Centered binomial with variance ≈ sigma², signed values."""
    k = params.cbd_k
    ring._bump("rng_draws", params.n)
    bits = rng.integers(0, 2, (params.n, 2 * k), dtype=np.int64)
    return bits[:, :k].sum(axis=1) - bits[:, k:].sum(axis=1)


def keygen(params: RingParams, rng) -> SecretKey:
    """Ternary secret key; deterministic under a seeded rng."""
    ring._bump("rng_draws", params.n)
    tern = rng.integers(-1, 2, params.n, dtype=np.int64)
    s = np.where(tern < 0, params.q - 1, tern)
    return SecretKey(ModPoly(s, params.q), params)


def expand_seed(seed: bytes, params: RingParams) -> np.ndarray:
    """Deterministically expand a 32-byte seed into a uniform polynomial."""
    digest = hashlib.sha256(seed).digest()
    key = int.from_bytes(digest[:16], "little")
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.integers(0, params.q, params.n, dtype=np.int64)


# ---------------------------------------------------------------------------
# encodings

_slot_tables: dict[tuple[int, int], np.ndarray] = {}


def _slot_index(params: RingParams) -> np.ndarray:
    """Evaluation index of each batch slot.

    Slot i lives on the root exponent 3^i mod 2n for the first n/2 slots and
    −3^i mod 2n for the rest: two orbits of size n/2, each rotated cyclically
    by the Galois maps x → x^(3^step).
    """
    key = (params.n, params.p)
    if key not in _slot_tables:
        n = params.n
        plan = ring.get_plan(n, params.p)
        m = 2 * n
        exps = []
        g = 1
        for _ in range(n // 2):
            exps.append(g)
            g = g * 3 % m
        g = m - 1
        for _ in range(n // 2):
            exps.append(g)
            g = g * 3 % m
        _slot_tables[key] = plan.index_of_exp[np.array(exps)]
    return _slot_tables[key]


def encode_batch(m: np.ndarray, params: RingParams) -> Plaintext:
    """SIMD encoding: slot-wise products of plaintexts = negacyclic products."""
    m = np.asarray(m, dtype=np.int64) % params.p
    if len(m) != params.n:
        raise EncodingError(f"message must have exactly {params.n} slots")
    plan = ring.get_plan(params.n, params.p)
    evals = np.zeros(params.n, dtype=np.int64)
    evals[_slot_index(params)] = m
    return Plaintext(ModPoly(plan.inv(evals), params.p), Encoding.BATCH)


def decode_batch(pt: Plaintext, params: RingParams) -> np.ndarray:
    if pt.encoding != Encoding.BATCH:
        raise EncodingError("plaintext is not batch-encoded")
    plan = ring.get_plan(params.n, params.p)
    return plan.fwd(pt.poly.coeffs)[_slot_index(params)]


def encode_direct(m: np.ndarray, params: RingParams) -> Plaintext:
    """Coefficient placement: m ↦ Σ m[i]·x^i (enables DRot)."""
    m = np.asarray(m, dtype=np.int64) % params.p
    if len(m) != params.n:
        raise EncodingError(f"message must have exactly {params.n} slots")
    return Plaintext(ModPoly(m.copy(), params.p), Encoding.DIRECT)


def decode_direct(pt: Plaintext) -> np.ndarray:
    if pt.encoding != Encoding.DIRECT:
        raise EncodingError("plaintext is not direct-encoded")
    return pt.poly.coeffs.copy()


def centered(values: np.ndarray, p: int) -> np.ndarray:
    """Map [0, p) to the signed window (−p/2, p/2]."""
    v = np.asarray(values, dtype=np.int64) % p
    return v - (v > p // 2) * p


# ---------------------------------------------------------------------------
# encryption / decryption


def _delta_times(pt: Plaintext, params: RingParams) -> np.ndarray:
    # Δ·(p−1) < q < 2^63: the product stays in int64
    return params.delta * (pt.poly.coeffs % params.p)


def encrypt_private(pt: Plaintext, sk: SecretKey, rng, seed: bytes | None = None) -> Ciphertext:
    """(c0, c1) = ([−(a·s + e) + Δm]_q, a) with a expanded from a 32-byte seed."""
    params = sk.params
    if seed is None:
        seed = rng.bytes(32)
        ring._bump("rng_draws", 1)
    a = expand_seed(seed, params)
    plan = ring.get_plan(params.n, params.q)
    a_s = plan.inv(plan.pointwise(plan.fwd(a), sk.s_eval))
    e = _sample_error(params, rng)
    c0 = (_delta_times(pt, params) - a_s - e) % params.q
    return Ciphertext(
        ModPoly(c0, params.q),
        ModPoly(a, params.q),
        pt.encoding,
        Domain.COEFF,
        fresh=True,
        seed=seed,
    )


def encrypt_public(pt: Plaintext, pk: tuple[ModPoly, ModPoly], params: RingParams, rng) -> Ciphertext:
    """Reference public-key path: (p0·u + e0 + Δm, p1·u + e1)."""
    u = ModPoly(np.abs(rng.integers(-1, 2, params.n, dtype=np.int64)) % params.q, params.q)
    e0 = _sample_error(params, rng)
    e1 = _sample_error(params, rng)
    p0u = ring.negacyclic_mul(pk[0], u)
    p1u = ring.negacyclic_mul(pk[1], u)
    c0 = (p0u.coeffs + e0 + _delta_times(pt, params)) % params.q
    c1 = (p1u.coeffs + e1) % params.q
    return Ciphertext(
        ModPoly(c0, params.q), ModPoly(c1, params.q), pt.encoding, Domain.COEFF
    )


def gen_public_key(sk: SecretKey, rng) -> tuple[ModPoly, ModPoly]:
    params = sk.params
    a = ModPoly(_sample_uniform(params, rng), params.q)
    e = _sample_error(params, rng)
    a_s = ring.negacyclic_mul(a, sk.s)
    p0 = ModPoly((-(a_s.coeffs + e)) % params.q, params.q)
    return p0, a


class ZeroCiphertext:
    """Single-use precomputed encryption of zero (Algorithm: ⟦m⟧ = ⟦0⟧ + Δ·m)."""

    __slots__ = ("ct", "used")

    def __init__(self, ct: Ciphertext):
        self.ct = ct
        self.used = False


class ZeroPool:
    def __init__(self, entries: list[ZeroCiphertext]):
        self.entries = entries
        self._next = 0

    def __len__(self):
        return len(self.entries) - self._next

    def take(self) -> ZeroCiphertext:
        if self._next >= len(self.entries):
            raise ProtocolError("zero-ciphertext pool exhausted")
        z = self.entries[self._next]
        self._next += 1
        return z


def precompute_zero(sk: SecretKey, rng, count: int) -> ZeroPool:
    """Offline phase of the encryption split: fresh encryptions of 0."""
    params = sk.params
    zero = Plaintext(ring.zero_poly(params.n, params.p), Encoding.DIRECT)
    return ZeroPool([ZeroCiphertext(encrypt_private(zero, sk, rng)) for _ in range(count)])


def encrypt_online(pt: Plaintext, zero: ZeroCiphertext, params: RingParams) -> Ciphertext:
    """Online path: one scalar multiply and one add, no sampling, no NTT."""
    if zero.used:
        raise ProtocolError("zero ciphertext already consumed (single-use)")
    zero.used = True
    base = zero.ct
    c0 = base.c0.coeffs + _delta_times(pt, params)
    c0 -= (c0 >= params.q) * params.q
    return Ciphertext(
        ModPoly(c0, params.q),
        base.c1.copy(),
        pt.encoding,
        Domain.COEFF,
        fresh=True,
        seed=base.seed,
    )


def _raw_phase(ct: Ciphertext, sk: SecretKey) -> np.ndarray:
    """[c1·s + c0]_q in the coefficient domain."""
    params = sk.params
    plan = ring.get_plan(params.n, params.q)
    if ct.domain == Domain.EVAL:
        u = plan.inv((plan.pointwise(ct.c1.coeffs, sk.s_eval) + ct.c0.coeffs) % params.q)
    else:
        c1s = plan.inv(plan.pointwise(plan.fwd(ct.c1.coeffs), sk.s_eval))
        u = (c1s + ct.c0.coeffs) % params.q
    return u


def decrypt_with_budget(ct: Ciphertext, sk: SecretKey) -> tuple[Plaintext, int]:
    """Decrypt and measure the remaining noise budget in one pass.

    m̂ = round(u/Δ) mod p; the budget is ⌊log2 q − log2(2·p·‖w‖∞)⌋ with
    w = u − Δ·round(u/Δ) the residual at plaintext scale: it hits 0 exactly
    when ‖w‖ reaches the Δ/2 decryption boundary.
    """
    params = sk.params
    u = _raw_phase(ct, sk)
    delta = params.delta
    m_raw = (u + delta // 2) // delta
    w = u - delta * m_raw
    poly = ModPoly(m_raw % params.p, params.p)
    vmax = int(np.abs(w).max())
    budget = math.floor(math.log2(params.q) - math.log2(2 * params.p * max(vmax, 1)))
    return Plaintext(poly, ct.encoding), budget


def decrypt(ct: Ciphertext, sk: SecretKey) -> Plaintext:
    return decrypt_with_budget(ct, sk)[0]


def noise_budget(ct: Ciphertext, sk: SecretKey) -> int:
    """Remaining bits of room; > 0 guarantees correct decryption. Test-only probe."""
    return decrypt_with_budget(ct, sk)[1]


# ---------------------------------------------------------------------------
# homomorphic operations


def _check_compat(a: Ciphertext, b: Ciphertext):
    if a.encoding != b.encoding:
        raise EncodingError("mixed-encoding operands")
    if a.domain != b.domain:
        raise EncodingError("mixed-domain operands")


def hadd(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_compat(a, b)
    return Ciphertext(
        ring.poly_add(a.c0, b.c0), ring.poly_add(a.c1, b.c1), a.encoding, a.domain
    )


def psub(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_compat(a, b)
    return Ciphertext(
        ring.poly_sub(a.c0, b.c0), ring.poly_sub(a.c1, b.c1), a.encoding, a.domain
    )


def plain_add(a: Ciphertext, pt: Plaintext, params: RingParams) -> Ciphertext:
    """c0 += Δ·pt: adds the plaintext without touching c1 or adding noise."""
    if a.encoding != pt.encoding:
        raise EncodingError("plaintext encoding does not match the ciphertext")
    dm = _delta_times(pt, params)
    if a.domain == Domain.EVAL:
        plan = ring.get_plan(params.n, params.q)
        dm = plan.fwd(dm)
    c0 = a.c0.coeffs + dm
    c0 -= (c0 >= params.q) * params.q
    return Ciphertext(ModPoly(c0, params.q, a.c0.domain), a.c1.copy(), a.encoding, a.domain)


@dataclass
class PreparedPlaintext:
    """Batch plaintext lifted (centered) to mod q and NTT'd, ready for PMult."""

    evals: np.ndarray
    encoding: Encoding = Encoding.BATCH


def prepare_plaintext(pt: Plaintext, params: RingParams) -> PreparedPlaintext:
    if pt.encoding != Encoding.BATCH:
        raise EncodingError("PMult operands use batch encoding")
    lifted = centered(pt.poly.coeffs, params.p) % params.q
    plan = ring.get_plan(params.n, params.q)
    return PreparedPlaintext(plan.fwd(lifted))


def pmult(a: Ciphertext, pt, params: RingParams) -> Ciphertext:
    """Slot-wise product with a batch plaintext; noise grows ≈ ×√n·p/2."""
    if a.encoding != Encoding.BATCH:
        raise EncodingError("PMult is defined for batch-encoded ciphertexts")
    if a.domain != Domain.EVAL:
        raise EncodingError("PMult operates in the evaluation domain")
    prep = pt if isinstance(pt, PreparedPlaintext) else prepare_plaintext(pt, params)
    plan = ring.get_plan(params.n, params.q)
    return Ciphertext(
        ModPoly(plan.pointwise(a.c0.coeffs, prep.evals), params.q, Domain.EVAL),
        ModPoly(plan.pointwise(a.c1.coeffs, prep.evals), params.q, Domain.EVAL),
        Encoding.BATCH,
        Domain.EVAL,
    )


def cmult(a: Ciphertext, k: int, params: RingParams) -> Ciphertext:
    """All slots scaled by the constant k, any encoding."""
    if not -params.p < k < params.p:
        raise EncodingError("|constant| must be below the plaintext modulus")
    return Ciphertext(
        ring.scalar_mul(a.c0, k), ring.scalar_mul(a.c1, k), a.encoding, a.domain
    )


def drot(a: Ciphertext, step: int) -> Ciphertext:
    """Key-switch-free slot rotation for direct encoding: c'_j = c_j·x^(−step).

    Left-cyclic shift with the sign inverted on wraparound; the noise
    polynomial is permuted the same way, so the budget is bit-identical.
    """
    if a.encoding != Encoding.DIRECT:
        raise EncodingError("DRot is defined for direct-encoded ciphertexts")
    if a.domain != Domain.COEFF:
        raise EncodingError("DRot operates in the coefficient domain")
    return Ciphertext(
        ring.monomial_mul(a.c0, step),
        ring.monomial_mul(a.c1, step),
        Encoding.DIRECT,
        Domain.COEFF,
    )


# ---------------------------------------------------------------------------
# key switching / HRot


# pseudo-step selecting the orbit swap x → x^(2n−1) (slot i ↔ slot n/2+i);
# rotations by 3^step move within each orbit, this Galois element crosses them
COLUMN_ROTATION = -1


@dataclass
class SwitchingKeySet:
    """Per rotation step, decomp_count pairs (swk0, swk1) in evaluation domain."""

    keys: dict[int, list[tuple[np.ndarray, np.ndarray]]]
    params: RingParams
    decomp_log: int

    def contains(self, step: int) -> bool:
        return step in self.keys

    @property
    def steps(self) -> list[int]:
        return sorted(self.keys)

    def storage_bytes(self) -> int:
        l = -(-self.params.q.bit_length() // self.decomp_log)
        return len(self.keys) * l * 2 * self.params.n * 8


def gen_switching_keys(
    sk: SecretKey, steps, rng, decomp_log: int | None = None
) -> SwitchingKeySet:
    """swk0 = −(swk1·s + e) + 2^(T·i)·s(x^(3^step)), digit i = 0..l−1."""
    params = sk.params
    if not steps:
        raise ParameterError("switching-key step list is empty")
    T = decomp_log if decomp_log is not None else params.decomp_log
    l = -(-params.q.bit_length() // T)
    plan = ring.get_plan(params.n, params.q)
    keys = {}
    for step in steps:
        gpow = _galois_element(step, params.n)
        s_rot = ring.apply_galois(sk.s, gpow)
        s_rot_eval = plan.fwd(s_rot.coeffs)
        digits = []
        for i in range(l):
            a_eval = _sample_uniform(params, rng)
            e_eval = plan.fwd(_sample_error(params, rng) % params.q)
            shift = pow(2, T * i, params.q)
            ring._bump("modmul", params.n)
            target = (s_rot_eval.astype(object) * shift) % params.q
            swk0 = (
                -(plan.pointwise(a_eval, sk.s_eval).astype(object) + e_eval) + target
            ) % params.q
            digits.append((swk0.astype(np.int64), a_eval))
        keys[int(step)] = digits
    return SwitchingKeySet(keys, params, T)


def _galois_element(step: int, n: int) -> int:
    if step == COLUMN_ROTATION:
        return 2 * n - 1
    return pow(3, step, 2 * n)


def hrot(a: Ciphertext, step: int, swks: SwitchingKeySet) -> Ciphertext:
    """Batch-encoding rotation: decompose c1, NTT, automorphism, key switch.

    Rotates each of the two slot orbits left-cyclically by `step`
    (COLUMN_ROTATION swaps the orbits instead).
    """
    if a.encoding != Encoding.BATCH:
        raise EncodingError("HRot is defined for batch-encoded ciphertexts")
    if a.domain != Domain.EVAL:
        raise EncodingError("HRot operates in the evaluation domain")
    if not swks.contains(step):
        raise KeyError(f"no switching key for rotation step {step}")
    params = swks.params
    plan = ring.get_plan(params.n, params.q)
    T = swks.decomp_log
    gpow = _galois_element(step, params.n)
    perm = plan.eval_perm(gpow)

    c1_coeff = plan.inv(a.c1.coeffs)
    c0_new = a.c0.coeffs[perm].astype(object)
    c1_new = np.zeros(params.n, dtype=object)
    mask = (1 << T) - 1
    for i, (swk0, swk1) in enumerate(swks.keys[step]):
        digit = (c1_coeff >> (T * i)) & mask
        dig_eval = plan.fwd(digit)[perm]
        ring._bump("modmul", 2 * params.n)
        c0_new = c0_new + dig_eval.astype(object) * swk0
        c1_new = c1_new + dig_eval.astype(object) * swk1
    return Ciphertext(
        ModPoly((c0_new % params.q).astype(np.int64), params.q, Domain.EVAL),
        ModPoly((c1_new % params.q).astype(np.int64), params.q, Domain.EVAL),
        Encoding.BATCH,
        Domain.EVAL,
    )


def to_eval(ct: Ciphertext, params: RingParams) -> Ciphertext:
    if ct.domain == Domain.EVAL:
        return ct
    plan = ring.get_plan(params.n, params.q)
    return Ciphertext(
        ModPoly(plan.fwd(ct.c0.coeffs), params.q, Domain.EVAL),
        ModPoly(plan.fwd(ct.c1.coeffs), params.q, Domain.EVAL),
        ct.encoding,
        Domain.EVAL,
    )


def to_coeff(ct: Ciphertext, params: RingParams) -> Ciphertext:
    if ct.domain == Domain.COEFF:
        return ct
    plan = ring.get_plan(params.n, params.q)
    return Ciphertext(
        ModPoly(plan.inv(ct.c0.coeffs), params.q, Domain.COEFF),
        ModPoly(plan.inv(ct.c1.coeffs), params.q, Domain.COEFF),
        ct.encoding,
        Domain.COEFF,
    )


# ---------------------------------------------------------------------------
# wire format: header {encoding u8, domain u8, seeded u8} + c0 + (seed | c1),
# length-prefixed by the frame layer


def ct_to_bytes(ct: Ciphertext, seed_compress: bool = True) -> bytes:
    seeded = seed_compress and ct.fresh and ct.seed is not None and ct.domain == Domain.COEFF
    head = struct.pack("<BBB", ct.encoding.value, 0 if ct.domain == Domain.COEFF else 1, int(seeded))
    body = ct.c0.coeffs.astype("<u8").tobytes()
    tail = ct.seed if seeded else ct.c1.coeffs.astype("<u8").tobytes()
    return head + body + tail


def ct_from_bytes(data: bytes, params: RingParams) -> Ciphertext:
    enc, dom, seeded = struct.unpack_from("<BBB", data)
    n = params.n
    off = 3
    c0 = np.frombuffer(data[off : off + 8 * n], dtype="<u8").astype(np.int64)
    off += 8 * n
    if seeded:
        seed = data[off : off + 32]
        c1 = expand_seed(seed, params)
    else:
        seed = None
        c1 = np.frombuffer(data[off : off + 8 * n], dtype="<u8").astype(np.int64)
    domain = Domain.COEFF if dom == 0 else Domain.EVAL
    return Ciphertext(
        ModPoly(c0, params.q, domain),
        ModPoly(c1, params.q, domain),
        Encoding(enc),
        domain,
        fresh=bool(seeded),
        seed=seed,
    )


def ct_wire_size(params: RingParams, seeded: bool) -> int:
    return 3 + 8 * params.n + (32 if seeded else 8 * params.n)
