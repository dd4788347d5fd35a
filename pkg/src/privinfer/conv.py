"""Homomorphic convolution engines.

The proposed engine works on direct-encoded ciphertexts with DRot + constant
multiplication only: per kernel tap the ciphertext is slot-rotated and scaled
into a lazy (two-limb) accumulator, partial sums are aligned across packed
channels by tile-sized DRots, and one modular reduction happens per output
channel. The conventional baseline packs batch-encoded tiles per rotation
orbit and uses HRot + PMult with per-block weight plaintexts.

Feature maps live in zero-bordered H_p×W_p tiles (H_p = H + f_w − 1) so every
rotation's sign flips and cross-channel bleed land on dummy slots. Tiles
larger than the rotation ring split into per-channel fragments that carry a
halo of pad·(W_p+1) slots on each side, which makes every fragment
self-contained for all tap rotations.
"""

import multiprocessing as mp
from dataclasses import dataclass, field, replace

import numpy as np

from . import bfv, ring
from .bfv import Ciphertext, Encoding
from .errors import AccumulatorBudgetError, EncodingError, ParameterError
from .params import RingParams
from .ring import Domain, LIMB_BITS, LIMB_MASK, ModPoly, WidePoly

MAX_WEIGHT_BITS = 8  # |weight| < 2^8 keeps the lazy-reduction budget honest

# Decomposition base for the baseline's switching keys. Key-switch noise gets
# multiplied by the dense weight-plaintext norm (≈√n·p/2) in the PMult that
# follows each tap rotation, so the base must stay small for the result to
# remain decryptable under a 60-bit q — the classic latency/noise tradeoff of
# key switching (a larger base is faster but noisier).
CONV_DECOMP_LOG = 4


@dataclass
class ConvLayerSpec:
    height: int
    width: int
    f_w: int
    c_i: int
    c_o: int
    weights: np.ndarray  # (c_o, c_i, f_w, f_w) signed ints
    weight_scale: int = 0  # fraction bits carried by the integer weights
    bias: np.ndarray | None = None  # (c_o,) ints at the combined output scale

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.int64).reshape(
            self.c_o, self.c_i, self.f_w * self.f_w
        )
        if self.f_w % 2 == 0:
            raise ParameterError("kernel width must be odd")
        if np.abs(self.weights).max(initial=0) >= 2**MAX_WEIGHT_BITS:
            raise ParameterError(
                f"weights must stay below {MAX_WEIGHT_BITS} bits for lazy reduction"
            )
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.int64)


@dataclass(frozen=True)
class TileLayout:
    """Placement of zero-bordered channel tiles across ciphertext slots.

    `ring` is the rotation-orbit size (n for direct encoding, n/2 for batch:
    HRot rotates the two halves independently); `units` is how many orbits one
    ciphertext carries. Fragmented layouts put one channel fragment per orbit
    with `halo` overlap slots on each side.
    """

    n: int
    height: int
    width: int
    pad: int
    ring: int
    units: int
    c_n: int
    frags: int
    frag_len: int
    halo: int
    stride: int = 1

    @property
    def w_p(self) -> int:
        return self.width + 2 * self.pad

    @property
    def h_p(self) -> int:
        return self.height + 2 * self.pad

    @property
    def tile(self) -> int:
        return self.h_p * self.w_p

    @property
    def fragmented(self) -> bool:
        return self.frags > 1

    def units_for(self, channels: int) -> int:
        if self.fragmented:
            return channels * self.frags
        return -(-channels // self.c_n)

    def ct_count(self, channels: int) -> int:
        return -(-self.units_for(channels) // self.units)

    def out_dims(self) -> tuple[int, int]:
        return self.height // self.stride, self.width // self.stride


def _make_layout(n: int, height: int, width: int, f_w: int, ring_slots: int, units: int) -> TileLayout:
    pad = f_w // 2
    w_p = width + 2 * pad
    h_p = height + 2 * pad
    tile = h_p * w_p
    if tile <= ring_slots:
        return TileLayout(
            n, height, width, pad, ring_slots, units,
            c_n=ring_slots // tile, frags=1, frag_len=tile, halo=0,
        )
    halo = pad * (w_p + 1)
    frag_len = ring_slots - 2 * halo
    if frag_len <= 0:
        raise ParameterError("ring too small for even one padded row window")
    return TileLayout(
        n, height, width, pad, ring_slots, units,
        c_n=1, frags=-(-tile // frag_len), frag_len=frag_len, halo=halo,
    )


def layout_direct(params: RingParams, height: int, width: int, f_w: int) -> TileLayout:
    return _make_layout(params.n, height, width, f_w, params.n, 1)


def layout_batch(params: RingParams, height: int, width: int, f_w: int) -> TileLayout:
    return _make_layout(params.n, height, width, f_w, params.n // 2, 2)


@dataclass
class PackedTensor:
    cts: list[Ciphertext]
    layout: TileLayout
    channels: int
    scale: int = 0


# ---------------------------------------------------------------------------
# slot bookkeeping


def tile_vector(channel: np.ndarray, layout: TileLayout, p: int) -> np.ndarray:
    """One channel as a zero-bordered row-major tile, values mod p."""
    tv = np.zeros((layout.h_p, layout.w_p), dtype=np.int64)
    tv[layout.pad : layout.pad + layout.height, layout.pad : layout.pad + layout.width] = (
        np.asarray(channel, dtype=np.int64) % p
    )
    return tv.ravel()


def channel_positions(layout: TileLayout, j: int) -> tuple[np.ndarray, np.ndarray]:
    """(ciphertext index, slot) of channel j's readable values, stride applied,
    row-major — the canonical feature ordering shared with the plain oracle."""
    h_out, w_out = layout.out_dims()
    ys = layout.pad + layout.stride * np.arange(h_out)
    xs = layout.pad + layout.stride * np.arange(w_out)
    tp = (ys[:, None] * layout.w_p + xs[None, :]).ravel()
    if layout.fragmented:
        k = tp // layout.frag_len
        ug = j * layout.frags + k
        slot = (ug % layout.units) * layout.ring + layout.halo + tp - k * layout.frag_len
        return ug // layout.units, slot
    ug = j // layout.c_n
    block = layout.tile * (j % layout.c_n)
    slot = (ug % layout.units) * layout.ring + block + tp
    return np.full(tp.shape, ug // layout.units, dtype=np.int64), slot


def pack_vectors(values: np.ndarray, layout: TileLayout, p: int) -> list[np.ndarray]:
    """Slot vectors (length n) for a (c, H, W) integer tensor."""
    c = len(values)
    vecs = [np.zeros(layout.n, dtype=np.int64) for _ in range(layout.ct_count(c))]
    for j in range(c):
        tv = tile_vector(values[j], layout, p)
        if layout.fragmented:
            for k in range(layout.frags):
                ug = j * layout.frags + k
                base = (ug % layout.units) * layout.ring
                lo = k * layout.frag_len - layout.halo
                src_lo, src_hi = max(lo, 0), min(lo + layout.ring, layout.tile)
                vecs[ug // layout.units][base + src_lo - lo : base + src_hi - lo] = tv[src_lo:src_hi]
        else:
            ug = j // layout.c_n
            base = (ug % layout.units) * layout.ring + layout.tile * (j % layout.c_n)
            vecs[ug // layout.units][base : base + layout.tile] = tv
    return vecs


def pack_input(
    values: np.ndarray,
    params: RingParams,
    f_w: int,
    encrypt_fn,
    batch: bool = False,
    scale: int = 0,
) -> PackedTensor:
    """Zero-bordered tiles, encoded and encrypted channel group by group.

    encrypt_fn: Plaintext -> Ciphertext (the data holder's encryption path).
    """
    values = np.asarray(values, dtype=np.int64)
    c, h, w = values.shape
    layout = (layout_batch if batch else layout_direct)(params, h, w, f_w)
    encode = bfv.encode_batch if batch else bfv.encode_direct
    cts = [encrypt_fn(encode(vec, params)) for vec in pack_vectors(values, layout, params.p)]
    if batch:
        cts = [bfv.to_eval(ct, params) for ct in cts]
    return PackedTensor(cts, layout, c, scale)


def unpack(tensor: PackedTensor, sk: bfv.SecretKey, signed: bool = True) -> np.ndarray:
    """Decrypt and gather the readable positions back to (c, H', W')."""
    params = sk.params
    decode = bfv.decode_batch if tensor.cts[0].encoding == Encoding.BATCH else bfv.decode_direct
    slots = []
    for ct in tensor.cts:
        pt = bfv.decrypt(ct, sk)
        slots.append(decode(pt, params) if ct.encoding == Encoding.BATCH else decode(pt))
    h_out, w_out = tensor.layout.out_dims()
    out = np.zeros((tensor.channels, h_out * w_out), dtype=np.int64)
    for j in range(tensor.channels):
        ct_idx, slot = channel_positions(tensor.layout, j)
        vals = np.array([slots[ci][si] for ci, si in zip(ct_idx, slot)], dtype=np.int64)
        out[j] = vals
    if signed:
        out = bfv.centered(out, params.p)
    return out.reshape(tensor.channels, h_out, w_out)


# ---------------------------------------------------------------------------
# proposed convolution: DRot + CMult with lazy reduction


def _tap_steps(layout: TileLayout, f_w: int) -> np.ndarray:
    pad = f_w // 2
    dy, dx = np.mgrid[0:f_w, 0:f_w]
    return ((dy - pad) * layout.w_p + (dx - pad)).ravel()


class _ExtPoly:
    """[−a | a | −a] extension of both ciphertext polys: a DRot by any step in
    (−n, n) is the plain slice ext[n+s : 2n+s]; limbs are pre-split once."""

    __slots__ = ("full", "lo", "hi")

    def __init__(self, ct: Ciphertext, q: int, limbs: bool):
        self.full, self.lo, self.hi = [], [], []
        for poly in (ct.c0, ct.c1):
            a = poly.coeffs
            neg = np.where(a == 0, 0, q - a)
            ext = np.concatenate([neg, a, neg])
            self.full.append(ext)
            if limbs:
                self.lo.append(ext & LIMB_MASK)
                self.hi.append(ext >> LIMB_BITS)


class _CtAccum:
    """Lazy accumulator for a whole ciphertext (c0 and c1 together)."""

    __slots__ = ("w0", "w1")

    def __init__(self, n: int, q: int):
        self.w0 = WidePoly(n, q)
        self.w1 = WidePoly(n, q)

    def add_taps(self, ext: _ExtPoly, n: int, steps, weights):
        for s, w in zip(steps, weights):
            if w == 0:
                continue
            w = int(w)
            self.w0.accumulate_split(ext.lo[0][n + s : 2 * n + s], ext.hi[0][n + s : 2 * n + s], w)
            self.w1.accumulate_split(ext.lo[1][n + s : 2 * n + s], ext.hi[1][n + s : 2 * n + s], w)

    def add_rotated(self, other: "_CtAccum", shift: int):
        self.w0.add_rotated(other.w0, shift)
        self.w1.add_rotated(other.w1, shift)

    def finalize(self, encoding=Encoding.DIRECT) -> Ciphertext:
        return Ciphertext(self.w0.finalize(), self.w1.finalize(), encoding, Domain.COEFF)


def _eager_taps(ext: _ExtPoly, n: int, q: int, steps, weights):
    acc = [np.zeros(n, dtype=object), np.zeros(n, dtype=object)]
    for s, w in zip(steps, weights):
        if w == 0:
            continue
        w = int(w)
        for idx in (0, 1):
            ring._bump("modmul", n)
            acc[idx] = (acc[idx] + ext.full[idx][n + s : 2 * n + s].astype(object) * w) % q
    return acc


def _eager_rotate_add(acc, part, shift: int, n: int, q: int):
    for idx in (0, 1):
        poly = ModPoly(part[idx].astype(np.int64), q)
        rot = ring.monomial_mul(poly, shift)
        acc[idx] = (acc[idx] + rot.coeffs) % q
    return acc


def _check_budget(layer: ConvLayerSpec):
    worst = int(np.abs(layer.weights).sum(axis=(1, 2)).max())
    if worst >= ring.WEIGHT_BUDGET:
        raise AccumulatorBudgetError(
            f"layer needs |weight| sum {worst}, over the lazy accumulation budget"
        )


# worker context for process-parallel output channels (inherited via fork)
_CTX: dict = {}


def _proposed_channel(i: int):
    ctx = _CTX
    n, q = ctx["n"], ctx["q"]
    layout: TileLayout = ctx["layout"]
    weights = ctx["weights"]
    steps = ctx["steps"]
    exts = ctx["exts"]
    lazy = ctx["lazy"]
    outs = []
    for k in range(layout.frags):
        if lazy:
            partial = _CtAccum(n, q)
            for j in range(ctx["c_i"]):
                ext = exts[(j * layout.frags + k) if layout.fragmented else j // layout.c_n]
                t = _CtAccum(n, q)
                t.add_taps(ext, n, steps, weights[i, j])
                partial.add_rotated(t, layout.tile * (j % layout.c_n))
            ct = partial.finalize()
            outs.append((ct.c0.coeffs, ct.c1.coeffs))
        else:
            partial = [np.zeros(n, dtype=object), np.zeros(n, dtype=object)]
            for j in range(ctx["c_i"]):
                ext = exts[(j * layout.frags + k) if layout.fragmented else j // layout.c_n]
                t = _eager_taps(ext, n, q, steps, weights[i, j])
                partial = _eager_rotate_add(partial, t, layout.tile * (j % layout.c_n), n, q)
            outs.append((partial[0].astype(np.int64), partial[1].astype(np.int64)))
    return i, outs


def conv_proposed(
    x: PackedTensor,
    layer: ConvLayerSpec,
    params: RingParams,
    lazy: bool = True,
    workers: int = 1,
) -> PackedTensor:
    """Algorithm: per output channel, accumulate DRot(ct, tap)·w into ⟦t⟧,
    align packed channels with DRot(⟦t⟧, tile·(j mod c_n)), reduce once.

    Output: one ciphertext per output channel (per fragment when split);
    deterministic for any worker count. No switching keys are consumed.
    """
    layout = x.layout
    if (layout.height, layout.width) != (layer.height, layer.width) or layout.pad != layer.f_w // 2:
        raise ParameterError("tensor layout does not match the layer geometry")
    if layout.stride != 1:
        raise ParameterError("convolution input must not carry a pending stride")
    if x.cts[0].encoding != Encoding.DIRECT:
        raise EncodingError("proposed convolution needs direct-encoded input")
    _check_budget(layer)

    global _CTX
    _CTX = {
        "n": params.n,
        "q": params.q,
        "layout": layout,
        "weights": layer.weights,
        "steps": _tap_steps(layout, layer.f_w),
        "exts": [_ExtPoly(ct, params.q, limbs=lazy) for ct in x.cts],
        "lazy": lazy,
        "c_i": layer.c_i,
    }
    try:
        if workers > 1 and layer.c_o > 1:
            with mp.get_context("fork").Pool(min(workers, layer.c_o)) as pool:
                results = pool.map(
                    _proposed_channel,
                    range(layer.c_o),
                    chunksize=max(1, layer.c_o // (4 * workers)),
                )
        else:
            results = [_proposed_channel(i) for i in range(layer.c_o)]
    finally:
        _CTX = {}

    out_layout = replace(layout, c_n=1)
    cts = []
    for i, outs in sorted(results):
        for k, (c0, c1) in enumerate(outs):
            ct = Ciphertext(
                ModPoly(c0, params.q), ModPoly(c1, params.q), Encoding.DIRECT, Domain.COEFF
            )
            if layer.bias is not None and layer.bias[i]:
                ct = bfv.plain_add(ct, _bias_plaintext(out_layout, k, int(layer.bias[i]), params), params)
            cts.append(ct)
    return PackedTensor(cts, out_layout, layer.c_o, x.scale + layer.weight_scale)


def _bias_plaintext(layout: TileLayout, frag: int, value: int, params: RingParams):
    vec = np.zeros(layout.n, dtype=np.int64)
    ys = layout.pad + np.arange(layout.height)
    xs = layout.pad + np.arange(layout.width)
    tp = (ys[:, None] * layout.w_p + xs[None, :]).ravel()
    if layout.fragmented:
        sel = tp // layout.frag_len == frag
        vec[layout.halo + tp[sel] - frag * layout.frag_len] = value % params.p
    else:
        vec[tp] = value % params.p
    return bfv.encode_direct(vec, params)


# ---------------------------------------------------------------------------
# conventional baseline: HRot + PMult on batch-encoded tiles


def conventional_steps(layer: ConvLayerSpec, params: RingParams) -> list[int]:
    """Distinct rotation steps the baseline engine needs for one layer
    (COLUMN_ROTATION included when channels span both slot orbits)."""
    layout = layout_batch(params, layer.height, layer.width, layer.f_w)
    taps = _tap_steps(layout, layer.f_w)
    steps = set()
    offsets = range(1 - layout.c_n, layout.c_n) if not layout.fragmented else (0,)
    for d in offsets:
        for t in taps:
            s = int((t + d * layout.tile) % layout.ring)
            if s:
                steps.add(s)
    if not layout.fragmented and layout.units > 1:
        if max(layout.units_for(layer.c_i), layout.units_for(layer.c_o)) > 1:
            steps.add(bfv.COLUMN_ROTATION)
    return sorted(steps)


def _uniform_prepared(value: int, params: RingParams) -> bfv.PreparedPlaintext:
    # batch plaintext with every slot = value: constant polynomial, so its
    # NTT is the constant vector — no transforms needed
    lifted = int(value) % params.p
    lifted = lifted - params.p if lifted > params.p // 2 else lifted
    return bfv.PreparedPlaintext(np.full(params.n, lifted % params.q, dtype=np.int64))


def conv_conventional(
    x: PackedTensor,
    layer: ConvLayerSpec,
    swks: bfv.SwitchingKeySet,
    params: RingParams,
) -> PackedTensor:
    """Baseline: rotate the input per (tap, channel offset) with HRot and
    multiply rotated ciphertexts by weight plaintexts with PMult.

    Output channels are packed like the input (one per tile block); correctness
    and latency reference only.
    """
    layout = x.layout
    if x.cts[0].encoding != Encoding.BATCH:
        raise EncodingError("conventional convolution needs batch-encoded input")
    if (layout.height, layout.width) != (layer.height, layer.width) or layout.pad != layer.f_w // 2:
        raise ParameterError("tensor layout does not match the layer geometry")
    taps = _tap_steps(layout, layer.f_w)
    n, cpu = params.n, layout.c_n
    in_cts = x.cts
    rot_cache: dict[tuple[int, int, bool], Ciphertext] = {}
    swap_cache: dict[int, Ciphertext] = {}

    def rotated(b: int, step: int, swap: bool = False) -> Ciphertext:
        step %= layout.ring
        key = (b, step, swap)
        if key not in rot_cache:
            if swap and b not in swap_cache:
                swap_cache[b] = bfv.hrot(in_cts[b], bfv.COLUMN_ROTATION, swks)
            base = swap_cache[b] if swap else in_cts[b]
            rot_cache[key] = bfv.hrot(base, step, swks) if step else base
        return rot_cache[key]

    pt_cache: dict = {}

    def prepared_blocks(block_weights: tuple) -> bfv.PreparedPlaintext:
        if block_weights not in pt_cache:
            vec = np.zeros(n, dtype=np.int64)
            for (unit_in, blk), w in np.ndenumerate(np.asarray(block_weights)):
                base = unit_in * layout.ring + blk * layout.tile
                vec[base : base + layout.tile] = w % params.p
            pt_cache[block_weights] = bfv.prepare_plaintext(bfv.encode_batch(vec, params), params)
        return pt_cache[block_weights]

    out_cts: list[Ciphertext] = []
    if layout.fragmented:
        pairs = -(-layout.frags // layout.units)
        for oc in range(layer.c_o):
            for t in range(pairs):
                acc = None
                for j in range(layer.c_i):
                    b = j * pairs + t
                    for k, step in enumerate(taps):
                        w = int(layer.weights[oc, j, k])
                        if w == 0:
                            continue
                        term = bfv.pmult(rotated(b, step), _uniform_prepared(w, params), params)
                        acc = term if acc is None else bfv.hadd(acc, term)
                if acc is None:
                    acc = bfv.cmult(in_cts[0], 0, params)
                if layer.bias is not None and layer.bias[oc]:
                    acc = _conv_bias_batch(acc, layout, t, int(layer.bias[oc]), params)
                out_cts.append(acc)
        out_layout = layout
    else:
        units_in = layout.units_for(layer.c_i)
        units_out = layout.units_for(layer.c_o)
        n_out_cts = layout.ct_count(layer.c_o)
        swaps = (False, True) if layout.units > 1 and max(units_in, units_out) > 1 else (False,)
        accs: list[Ciphertext | None] = [None] * n_out_cts
        for o in range(n_out_cts):
            for b in range(len(in_cts)):
                for swap in swaps:
                    for d in range(1 - cpu, cpu):
                        for k, step in enumerate(taps):
                            bw = np.zeros((layout.units, cpu), dtype=np.int64)
                            any_w = False
                            for h in range(layout.units):
                                # after an orbit swap, half h of the rotated ct
                                # carries the other input unit of ciphertext b
                                iu = layout.units * b + (h ^ int(swap))
                                ou = layout.units * o + h
                                if iu >= units_in or ou >= units_out:
                                    continue
                                for blk in range(cpu):
                                    src = blk + d
                                    if not 0 <= src < cpu:
                                        continue
                                    ic = iu * cpu + src
                                    ocn = ou * cpu + blk
                                    if ic < layer.c_i and ocn < layer.c_o:
                                        w = int(layer.weights[ocn, ic, k])
                                        if w:
                                            bw[h, blk] = w
                                            any_w = True
                            if not any_w:
                                continue
                            rot = rotated(b, int((step + d * layout.tile) % layout.ring), swap)
                            term = bfv.pmult(rot, prepared_blocks(tuple(map(tuple, bw))), params)
                            accs[o] = term if accs[o] is None else bfv.hadd(accs[o], term)
        for o, acc in enumerate(accs):
            if acc is None:
                acc = bfv.cmult(in_cts[0], 0, params)
            out_cts.append(acc)
        out_layout = layout
        if layer.bias is not None and layer.bias.any():
            out_cts = _conv_bias_batch_packed(out_cts, out_layout, layer, params)
    return PackedTensor(out_cts, out_layout, layer.c_o, x.scale + layer.weight_scale)


def _conv_bias_batch(ct: Ciphertext, layout: TileLayout, pair: int, value: int, params: RingParams):
    vec = np.zeros(params.n, dtype=np.int64)
    ys = layout.pad + np.arange(layout.height)
    xs = layout.pad + np.arange(layout.width)
    tp = (ys[:, None] * layout.w_p + xs[None, :]).ravel()
    for h in range(layout.units):
        k = pair * layout.units + h
        if k >= layout.frags:
            break
        sel = tp // layout.frag_len == k
        vec[h * layout.ring + layout.halo + tp[sel] - k * layout.frag_len] = value % params.p
    return bfv.plain_add(ct, bfv.encode_batch(vec, params), params)


def _conv_bias_batch_packed(out_cts, layout: TileLayout, layer: ConvLayerSpec, params: RingParams):
    ys = layout.pad + np.arange(layout.height)
    xs = layout.pad + np.arange(layout.width)
    tp = (ys[:, None] * layout.w_p + xs[None, :]).ravel()
    fixed = []
    for o, ct in enumerate(out_cts):
        vec = np.zeros(params.n, dtype=np.int64)
        for h in range(layout.units):
            ou = layout.units * o + h
            for blk in range(layout.c_n):
                oc = ou * layout.c_n + blk
                if oc >= layer.c_o:
                    break
                base = h * layout.ring + blk * layout.tile
                vec[base + tp] = int(layer.bias[oc]) % params.p
        fixed.append(bfv.plain_add(ct, bfv.encode_batch(vec, params), params))
    return fixed


# ---------------------------------------------------------------------------
# pooling and fully connected layers


def avg_pool(x: PackedTensor, k: int, params: RingParams) -> PackedTensor:
    """k×k sliding sums via DRot + HAdd; the divide by k² is deferred to the
    fixed-point rescale and the subsample to the next repack (stride marker)."""
    layout = x.layout
    if layout.height % k or layout.width % k:
        raise ParameterError(f"pool size {k} does not divide {layout.height}×{layout.width}")
    if layout.stride != 1:
        raise ParameterError("pooling input must not carry a pending stride")
    if layout.fragmented and (k - 1) * (layout.w_p + 1) > layout.halo:
        raise ParameterError("pool window exceeds the fragment halo")
    dy, dx = np.mgrid[0:k, 0:k]
    steps = (dy * layout.w_p + dx).ravel()
    ones = np.ones(len(steps), dtype=np.int64)
    out = []
    for ct in x.cts:
        ext = _ExtPoly(ct, params.q, limbs=True)
        acc = _CtAccum(params.n, params.q)
        acc.add_taps(ext, params.n, steps, ones)
        out.append(acc.finalize())
    return PackedTensor(out, replace(layout, stride=k), x.channels, x.scale)


def fully_connected(
    x: PackedTensor,
    weights: np.ndarray,
    params: RingParams,
    bias: np.ndarray | None = None,
    weight_scale: int = 0,
) -> list[Ciphertext]:
    """Matrix-vector product via CMult/DRot/HAdd: one output ciphertext per
    row, the dot product sitting in slot 0 (junk-robust for any input)."""
    weights = np.asarray(weights, dtype=np.int64)
    c_out, v_in = weights.shape
    if np.abs(weights).max(initial=0) >= 2**MAX_WEIGHT_BITS:
        raise ParameterError("fc weights exceed the lazy-reduction bound")
    ct_idx = []
    slots = []
    for j in range(x.channels):
        ci, sl = channel_positions(x.layout, j)
        ct_idx.append(ci)
        slots.append(sl)
    ct_idx = np.concatenate(ct_idx)
    slots = np.concatenate(slots)
    if len(slots) != v_in:
        raise ParameterError(f"weight matrix expects {v_in} inputs, tensor has {len(slots)}")
    exts = [_ExtPoly(ct, params.q, limbs=True) for ct in x.cts]
    n = params.n
    outs = []
    for o in range(c_out):
        acc = _CtAccum(n, params.q)
        for v in range(v_in):
            w = int(weights[o, v])
            if w == 0:
                continue
            ext = exts[ct_idx[v]]
            s = int(slots[v])
            acc.w0.accumulate_split(ext.lo[0][n + s : 2 * n + s], ext.hi[0][n + s : 2 * n + s], w)
            acc.w1.accumulate_split(ext.lo[1][n + s : 2 * n + s], ext.hi[1][n + s : 2 * n + s], w)
        ct = acc.finalize()
        if bias is not None and bias[o]:
            vec = np.zeros(n, dtype=np.int64)
            vec[0] = int(bias[o]) % params.p
            ct = bfv.plain_add(ct, bfv.encode_direct(vec, params), params)
        outs.append(ct)
    return outs


def read_scalar_outputs(cts: list[Ciphertext], sk: bfv.SecretKey) -> np.ndarray:
    """Slot-0 values of per-output ciphertexts, centered."""
    vals = [bfv.decode_direct(bfv.decrypt(ct, sk))[0] for ct in cts]
    return bfv.centered(np.array(vals, dtype=np.int64), sk.params.p)


# ---------------------------------------------------------------------------
# storage accounting


def conventional_plaintext_count(layer: ConvLayerSpec, params: RingParams) -> int:
    layout = layout_batch(params, layer.height, layer.width, layer.f_w)
    taps = layer.f_w * layer.f_w
    if layout.fragmented:
        pairs = -(-layout.frags // layout.units)
        return layer.c_o * layer.c_i * pairs * taps
    return layout.ct_count(layer.c_o) * layout.ct_count(layer.c_i) * (2 * layout.c_n - 1) * taps


def storage_report(layers: list[ConvLayerSpec], params: RingParams, decomp_log: int = CONV_DECOMP_LOG) -> dict:
    """Server-side bytes for the two conv paths (Table-style accounting).

    Proposed: raw signed-byte weights, zero switching keys. Conventional:
    weight plaintexts (n×8 bytes each) plus the switching-key set."""
    T = decomp_log
    l = -(-params.q.bit_length() // T)
    raw = sum(l_.c_o * l_.c_i * l_.f_w * l_.f_w for l_ in layers)
    steps = set()
    for l_ in layers:
        steps.update(conventional_steps(l_, params))
    pt_bytes = sum(conventional_plaintext_count(l_, params) for l_ in layers) * params.n * 8
    return {
        "proposed_weight_bytes": raw,
        "proposed_swk_bytes": 0,
        "conventional_weight_bytes": pt_bytes,
        "conventional_swk_bytes": len(steps) * l * 2 * params.n * 8,
    }


VGG16_GEOMETRY = [
    (64, 64, 3, 64), (64, 64, 64, 64),
    (32, 32, 64, 128), (32, 32, 128, 128),
    (16, 16, 128, 256), (16, 16, 256, 256), (16, 16, 256, 256),
    (8, 8, 256, 512), (8, 8, 512, 512), (8, 8, 512, 512),
    (4, 4, 512, 512), (4, 4, 512, 512), (4, 4, 512, 512),
]


def vgg16_step_set(params: RingParams) -> list[int]:
    """Rotation steps a conventional VGG-16 pipeline provisions, following the
    reference packing (unpadded row-major tiles, output channels packed,
    partial sums aligned by tile-multiple rotations). Storage-accounting
    reference for the switching-key table."""
    ring_slots = params.n // 2
    steps = set()
    for h, w, _, _ in VGG16_GEOMETRY:
        tile = h * w
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                s = (dy * w + dx) % ring_slots
                if s:
                    steps.add(s)
        if tile <= ring_slots:
            cpu = ring_slots // tile
            for d in range(1, cpu):
                s = d * tile % ring_slots
                if s:
                    steps.add(s)
    return sorted(steps)
