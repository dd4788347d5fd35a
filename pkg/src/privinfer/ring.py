"""Arithmetic in Z_q[x]/(x^n+1): negacyclic NTT, monomial shifts, automorphisms,
and the wide-accumulator lazy-reduction path.

Coefficients are stored as int64 numpy arrays in [0, modulus). Moduli up to
~2^60 are supported; butterfly products that would overflow 64 bits run on
object (big-int) arrays, small moduli (< 2^31) stay on the native int64 path.
"""

import struct
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import AccumulatorBudgetError, ParameterError

# ---------------------------------------------------------------------------
# op-count instrumentation (tests assert e.g. that DRot performs no modular
# multiplies and that online encryption draws no randomness)

OP_COUNTS = {"modmul": 0, "rng_draws": 0}
_counting = False


@contextmanager
def track_ops():
    global _counting
    for k in OP_COUNTS:
        OP_COUNTS[k] = 0
    _counting = True
    try:
        yield OP_COUNTS
    finally:
        _counting = False


def _bump(key, amount):
    if _counting:
        OP_COUNTS[key] += amount


class Domain(Enum):
    COEFF = "coefficient"
    EVAL = "evaluation"


@dataclass
class ModPoly:
    """A length-n polynomial with coefficients mod `modulus`."""

    coeffs: np.ndarray
    modulus: int
    domain: Domain = Domain.COEFF

    def __post_init__(self):
        if self.coeffs.dtype != np.int64:
            self.coeffs = self.coeffs.astype(np.int64)

    @property
    def n(self) -> int:
        return len(self.coeffs)

    def copy(self) -> "ModPoly":
        return ModPoly(self.coeffs.copy(), self.modulus, self.domain)

    def __eq__(self, other):
        return (
            isinstance(other, ModPoly)
            and self.modulus == other.modulus
            and self.domain == other.domain
            and np.array_equal(self.coeffs, other.coeffs)
        )


def zero_poly(n: int, modulus: int, domain: Domain = Domain.COEFF) -> ModPoly:
    return ModPoly(np.zeros(n, dtype=np.int64), modulus, domain)


def _bitrev(x: int, bits: int) -> int:
    y = 0
    for _ in range(bits):
        y = (y << 1) | (x & 1)
        x >>= 1
    return y


class NttPlan:
    """Precomputed negacyclic NTT for one (n, modulus) pair.

    Forward output is in scrambled order: out[i] = f(psi^(2*bitrev(i)+1)).
    The exponent tables make that ordering explicit so slot maps and
    evaluation-domain automorphisms can be built on top of it.
    """

    def __init__(self, n: int, modulus: int):
        if modulus % (2 * n) != 1:
            raise ParameterError(f"modulus {modulus} is not ≡ 1 mod {2 * n}")
        self.n = n
        self.modulus = modulus
        self.native = modulus < 2**31  # products fit int64
        psi = self._find_root()
        self.psi = psi
        bits = n.bit_length() - 1
        dtype = np.int64 if self.native else object
        ipsi = pow(psi, -1, modulus)
        self.psi_brv = np.array(
            [pow(psi, _bitrev(i, bits), modulus) for i in range(n)], dtype=dtype
        )
        self.ipsi_brv = np.array(
            [pow(ipsi, _bitrev(i, bits), modulus) for i in range(n)], dtype=dtype
        )
        self.n_inv = pow(n, -1, modulus)
        self.exp_at_index = np.array(
            [2 * _bitrev(i, bits) + 1 for i in range(n)], dtype=np.int64
        )
        # index_of_exp[e] for odd e in [0, 2n)
        self.index_of_exp = np.full(2 * n, -1, dtype=np.int64)
        self.index_of_exp[self.exp_at_index] = np.arange(n)

    def _find_root(self) -> int:
        q, n = self.modulus, self.n
        for g in range(2, 10000):
            psi = pow(g, (q - 1) // (2 * n), q)
            if pow(psi, n, q) == q - 1:
                return psi
        raise ParameterError(f"no 2n-th root of unity found mod {self.modulus}")

    def fwd(self, a: np.ndarray) -> np.ndarray:
        n, q = self.n, self.modulus
        _bump("modmul", n * (n.bit_length() - 1) // 2)
        if self.native:
            return self._fwd_i64(a)
        a = a.astype(object)
        t, m = n, 1
        while m < n:
            t //= 2
            blocks = a.reshape(m, 2 * t)
            lo = blocks[:, :t].copy()
            v = (blocks[:, t:] * self.psi_brv[m : 2 * m, None]) % q
            blocks[:, :t] = lo + v
            blocks[:, t:] = lo - v
            m *= 2
        return (a % q).astype(np.int64)

    def inv(self, a: np.ndarray) -> np.ndarray:
        n, q = self.n, self.modulus
        _bump("modmul", n * (n.bit_length() - 1) // 2 + n)
        if self.native:
            return self._inv_i64(a)
        a = a.astype(object)
        t, m = 1, n
        while m > 1:
            h = m // 2
            blocks = a.reshape(h, 2 * t)
            lo = blocks[:, :t].copy()
            hi = blocks[:, t:]
            blocks[:, :t] = lo + hi
            blocks[:, t:] = ((lo - hi) * self.ipsi_brv[h : 2 * h, None]) % q
            t *= 2
            m //= 2
        return ((a * self.n_inv) % q).astype(np.int64)

    def _fwd_i64(self, a):
        n, q = self.n, self.modulus
        a = a.astype(np.int64).copy()
        t, m = n, 1
        while m < n:
            t //= 2
            blocks = a.reshape(m, 2 * t)
            lo = blocks[:, :t].copy()
            v = blocks[:, t:] * self.psi_brv[m : 2 * m, None] % q
            blocks[:, :t] = (lo + v) % q
            blocks[:, t:] = (lo - v) % q
            m *= 2
        return a

    def _inv_i64(self, a):
        n, q = self.n, self.modulus
        a = a.astype(np.int64).copy()
        t, m = 1, n
        while m > 1:
            h = m // 2
            blocks = a.reshape(h, 2 * t)
            lo = blocks[:, :t].copy()
            hi = blocks[:, t:]
            blocks[:, :t] = (lo + hi) % q
            blocks[:, t:] = (lo - hi) * self.ipsi_brv[h : 2 * h, None] % q
            t *= 2
            m //= 2
        return a * self.n_inv % q

    def pointwise(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _bump("modmul", self.n)
        if self.native:
            return a * b % self.modulus
        return ((a.astype(object) * b.astype(object)) % self.modulus).astype(np.int64)

    def eval_perm(self, gpow: int) -> np.ndarray:
        """Permutation realizing f(x) -> f(x^gpow) directly on NTT values."""
        exps = self.exp_at_index * gpow % (2 * self.n)
        return self.index_of_exp[exps]


_plans: dict[tuple[int, int], NttPlan] = {}


def get_plan(n: int, modulus: int) -> NttPlan:
    key = (n, modulus)
    if key not in _plans:
        _plans[key] = NttPlan(n, modulus)
    return _plans[key]


# ---------------------------------------------------------------------------
# coefficient-domain ring ops


def poly_add(f: ModPoly, g: ModPoly) -> ModPoly:
    _check_pair(f, g)
    s = f.coeffs + g.coeffs
    s -= (s >= f.modulus) * f.modulus
    return ModPoly(s, f.modulus, f.domain)


def poly_sub(f: ModPoly, g: ModPoly) -> ModPoly:
    _check_pair(f, g)
    s = f.coeffs - g.coeffs
    s += (s < 0) * f.modulus
    return ModPoly(s, f.modulus, f.domain)


def poly_neg(f: ModPoly) -> ModPoly:
    out = np.where(f.coeffs == 0, 0, f.modulus - f.coeffs)
    return ModPoly(out, f.modulus, f.domain)


def scalar_mul(f: ModPoly, k: int) -> ModPoly:
    """f·k mod modulus for arbitrary integer k (big-int safe)."""
    k %= f.modulus
    _bump("modmul", f.n)
    out = (f.coeffs.astype(object) * k) % f.modulus
    return ModPoly(out.astype(np.int64), f.modulus, f.domain)


def _check_pair(f: ModPoly, g: ModPoly):
    if f.modulus != g.modulus:
        raise ParameterError("modulus mismatch")
    if f.n != g.n:
        raise ParameterError("length mismatch")
    if f.domain != g.domain:
        raise ParameterError("domain mismatch")


def ntt_forward(f: ModPoly) -> ModPoly:
    if f.domain != Domain.COEFF:
        raise ParameterError("ntt_forward expects a coefficient-domain polynomial")
    plan = get_plan(f.n, f.modulus)
    return ModPoly(plan.fwd(f.coeffs), f.modulus, Domain.EVAL)


def ntt_inverse(f: ModPoly) -> ModPoly:
    if f.domain != Domain.EVAL:
        raise ParameterError("ntt_inverse expects an evaluation-domain polynomial")
    plan = get_plan(f.n, f.modulus)
    return ModPoly(plan.inv(f.coeffs), f.modulus, Domain.COEFF)


def negacyclic_mul(f: ModPoly, g: ModPoly) -> ModPoly:
    """f·g mod (x^n+1, modulus) via the NTT path."""
    _check_pair(f, g)
    plan = get_plan(f.n, f.modulus)
    fa = f.coeffs if f.domain == Domain.EVAL else plan.fwd(f.coeffs)
    ga = g.coeffs if g.domain == Domain.EVAL else plan.fwd(g.coeffs)
    out = plan.inv(plan.pointwise(fa, ga))
    return ModPoly(out, f.modulus, Domain.COEFF)


def monomial_mul(f: ModPoly, shift: int) -> ModPoly:
    """f(x)·x^(−shift) mod x^n+1: pure index rotation with sign flips.

    shift is reduced mod 2n (a flip of the whole sign for each n crossed);
    no modular multiplication happens on this path.
    """
    n, q = f.n, f.modulus
    a = f.coeffs
    s = shift % (2 * n)
    flip_all = s >= n
    s -= n if flip_all else 0
    out = np.empty(n, dtype=np.int64)
    if s:
        out[: n - s] = a[s:]
        wrap = a[:s]
        out[n - s :] = np.where(wrap == 0, 0, q - wrap)
    else:
        out[:] = a
    if flip_all:
        out = np.where(out == 0, 0, q - out)
    return ModPoly(out, q, f.domain)


_auto_tables: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _auto_table(n: int, gpow: int):
    key = (n, gpow)
    if key not in _auto_tables:
        i = np.arange(n, dtype=np.int64)
        e = i * gpow % (2 * n)
        tgt = e % n
        neg = e >= n
        _auto_tables[key] = (tgt, neg)
    return _auto_tables[key]


def automorphism(f: ModPoly, step: int) -> ModPoly:
    """f(x^(3^step)) mod x^n+1.

    Coefficient i moves to i·3^step mod n; exponents are tracked mod 2n so
    that landing on an odd multiple of n flips the sign (the ring is
    negacyclic, the plain index formula alone would drop that).
    """
    return apply_galois(f, pow(3, step, 2 * f.n))


def apply_galois(f: ModPoly, gpow: int) -> ModPoly:
    if f.domain != Domain.COEFF:
        raise ParameterError("automorphism expects a coefficient-domain polynomial")
    n, q = f.n, f.modulus
    tgt, neg = _auto_table(n, gpow)
    vals = np.where(neg & (f.coeffs != 0), q - f.coeffs, f.coeffs)
    out = np.empty(n, dtype=np.int64)
    out[tgt] = vals
    return ModPoly(out, q, Domain.COEFF)


# ---------------------------------------------------------------------------
# lazy reduction: two int64 limbs per coefficient stand in for a 128-bit
# accumulator; one modular reduction happens at finalize

LIMB_BITS = 30
LIMB_MASK = (1 << LIMB_BITS) - 1
# |scalar-weight| * 2^LIMB_BITS must stay below 2^62
WEIGHT_BUDGET = 1 << 32


class WidePoly:
    """Unreduced accumulator for sums of scalar·poly terms.

    `weight` tracks the accumulated sum of |scalar|; the guard refuses a term
    that could overflow the limbs, before any corruption happens.
    """

    __slots__ = ("lo", "hi", "modulus", "weight")

    def __init__(self, n: int, modulus: int):
        self.lo = np.zeros(n, dtype=np.int64)
        self.hi = np.zeros(n, dtype=np.int64)
        self.modulus = modulus
        self.weight = 0

    @property
    def n(self) -> int:
        return len(self.lo)

    def _charge(self, amount: int):
        if self.weight + amount >= WEIGHT_BUDGET:
            raise AccumulatorBudgetError(
                f"lazy accumulation budget exceeded: |scalar| sum "
                f"{self.weight + amount} ≥ {WEIGHT_BUDGET}"
            )
        self.weight += amount

    def accumulate(self, f: ModPoly, scalar: int):
        self._charge(abs(scalar))
        self.lo += (f.coeffs & LIMB_MASK) * scalar
        self.hi += (f.coeffs >> LIMB_BITS) * scalar

    def accumulate_split(self, lo: np.ndarray, hi: np.ndarray, scalar: int):
        """Same as accumulate, for callers that pre-split the limbs once."""
        self._charge(abs(scalar))
        self.lo += lo * scalar
        self.hi += hi * scalar

    def add_rotated(self, other: "WidePoly", shift: int):
        """acc += other·x^(−shift), entirely in the lazy domain."""
        n = self.n
        s = shift % (2 * n)
        flip = s >= n
        s -= n if flip else 0
        sign = -1 if flip else 1
        self._charge(other.weight)
        for mine, theirs in ((self.lo, other.lo), (self.hi, other.hi)):
            if s:
                mine[: n - s] += sign * theirs[s:]
                mine[n - s :] -= sign * theirs[:s]
            else:
                mine += sign * theirs

    def finalize(self) -> ModPoly:
        """Reduce once; equals the same sum computed with per-step reduction."""
        _bump("modmul", self.n)
        total = (self.hi.astype(object) << LIMB_BITS) + self.lo
        return ModPoly(
            (total % self.modulus).astype(np.int64), self.modulus, Domain.COEFF
        )


def wide_accumulate(acc: WidePoly, f: ModPoly, scalar: int) -> WidePoly:
    acc.accumulate(f, scalar)
    return acc


def finalize(acc: WidePoly) -> ModPoly:
    return acc.finalize()


# ---------------------------------------------------------------------------
# serialization: little-endian 8-byte coefficients, length-prefixed


def poly_to_bytes(f: ModPoly) -> bytes:
    if f.domain != Domain.COEFF:
        raise ParameterError("only coefficient-domain polynomials are serialized")
    return struct.pack("<I", f.n) + f.coeffs.astype("<u8").tobytes()


def poly_from_bytes(data: bytes, modulus: int) -> tuple[ModPoly, int]:
    (n,) = struct.unpack_from("<I", data)
    end = 4 + 8 * n
    coeffs = np.frombuffer(data[4:end], dtype="<u8").astype(np.int64)
    return ModPoly(coeffs, modulus, Domain.COEFF), end
