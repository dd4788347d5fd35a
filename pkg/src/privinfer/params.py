"""Ring parameter set: moduli search, validation, and the pinned parameter file."""

import json
import math
from dataclasses import dataclass
from importlib import resources

_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin (the fixed base set is exact below 3.3e24)."""
    if n < 2:
        return False
    for b in _MR_BASES:
        if n % b == 0:
            return n == b
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def find_ciphertext_modulus(n: int, p: int, bits: int = 60) -> int:
    """Largest `bits`-bit prime q with q ≡ 1 (mod 2n·p).

    q ≡ 1 mod 2n makes the ring NTT-friendly; q ≡ 1 mod p makes Δ·p = q−1,
    so plaintext wraparound during plain addition perturbs the noise by at
    most one unit instead of up to p.
    """
    step = 2 * n * p
    q = (2**bits - 1) // step * step + 1
    while q >= 2 ** (bits - 1):
        if is_prime(q):
            return q
        q -= step
    raise ValueError(f"no {bits}-bit prime ≡ 1 mod {step}")


def find_plaintext_modulus(n: int, min_value: int = 2**18) -> int:
    """Smallest prime p ≥ min_value with p ≡ 1 (mod 2n) (batch encoding needs it)."""
    step = 2 * n
    p = (min_value + step - 1) // step * step + 1
    while not is_prime(p):
        p += step
    return p


@dataclass(frozen=True)
class RingParams:
    """Parameters of Z_q[x]/(x^n+1) with plaintext space Z_p.

    decomp_log is the digit width T of the key-switching decomposition
    (base 2^T); decomp_count l = ceil(bitlen(q)/T) digits cover q.
    """

    n: int
    q: int
    p: int
    sigma: float = 3.2
    decomp_log: int = 16

    def __post_init__(self):
        if self.n < 2 or self.n & (self.n - 1):
            raise ValueError("n must be a power of two")
        if self.q % (2 * self.n) != 1:
            raise ValueError("q must be ≡ 1 mod 2n")
        if self.p % (2 * self.n) != 1:
            raise ValueError("p must be ≡ 1 mod 2n")
        if not self.p < self.q:
            raise ValueError("p must be smaller than q")
        if not (is_prime(self.q) and is_prime(self.p)):
            raise ValueError("q and p must be prime")
        if self.decomp_count * self.decomp_log < self.q.bit_length():
            raise ValueError("decomposition does not cover the modulus")

    @property
    def delta(self) -> int:
        return self.q // self.p

    @property
    def decomp_count(self) -> int:
        return -(-self.q.bit_length() // self.decomp_log)

    @property
    def cbd_k(self) -> int:
        """Centered-binomial width giving variance ≈ sigma^2."""
        return max(1, round(2 * self.sigma * self.sigma))

    def signed_window(self) -> int:
        """Half-open bound of the signed plaintext range (-p/2, p/2]."""
        return self.p // 2

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "q": self.q,
            "p": self.p,
            "sigma": self.sigma,
            "decomp_log": self.decomp_log,
        }

    def fingerprint(self) -> tuple:
        return (self.n, self.q, self.p)


def make_params(n: int, sigma: float = 3.2, decomp_log: int = 16) -> RingParams:
    """Run the documented prime search for degree n.

    Deterministic: the pinned parameter file was produced by exactly this
    routine (checked by the test suite).
    """
    p = find_plaintext_modulus(n)
    return RingParams(
        n=n,
        q=find_ciphertext_modulus(n, p),
        p=p,
        sigma=sigma,
        decomp_log=decomp_log,
    )


def save_params(params: RingParams, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(params.to_dict(), fh, indent=2)
        fh.write("\n")


def load_params(path: str) -> RingParams:
    with open(path) as fh:
        d = json.load(fh)
    return RingParams(**d)


def default_params() -> RingParams:
    """The pinned n=2048 parameter set (60-bit q, 19-bit p)."""
    text = resources.files("privinfer.data").joinpath("params_n2048.json").read_text()
    return RingParams(**json.loads(text))


def log2_q(params: RingParams) -> float:
    return math.log2(params.q)
