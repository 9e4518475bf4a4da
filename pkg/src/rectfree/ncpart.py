"""Noncrossing-partition combinatorics and moment/cumulant conversions.

Everything here is exact: enumeration of (noncrossing) set partitions and
pairings, block-minimum parity statistics, the partition-to-pairing bijection
on the interleaved alphabet, and the three moment/cumulant dictionaries

* rectangular: m_{2n} = sum over even-block noncrossing partitions of [2n] of
  lambda^(e(pi)) * prod c_{|V|},
* classical:   m_k = sum over all set partitions of [k] of prod c*_{|V|},
* Marchenko-Pastur: m_n = sum over noncrossing pairings of [2n] of a^(o(pi)),

where e(pi) / o(pi) count blocks with even / odd minimum.  The arithmetic is
plain Python (works with ints, floats and fractions.Fraction alike), so these
functions double as exact oracles for the analytic transform engine.

Enumerations are generated lazily; the moment dictionaries stream them, and
the ``enumerate_*`` functions materialize canonical, deterministically ordered
lists (small sizes are cached).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

__all__ = [
    "SetPartition",
    "NCPartition",
    "NCPairing",
    "is_noncrossing",
    "enumerate_set_partitions",
    "enumerate_nc",
    "enumerate_nc_even",
    "enumerate_nc_pairings",
    "min_parity_stats",
    "nc_to_pairing",
    "moments_from_rect_cumulants",
    "rect_cumulants_from_moments",
    "classical_moments_from_cumulants",
    "classical_cumulants_from_moments",
    "mp_moment",
    "partition_table_rows",
]

MAX_NC_N = 16
MAX_PAIRING_N = 24
_CACHE_LIMIT = 12  # materialized lists larger than Catalan(12) are not cached


def _canonical_blocks(blocks) -> tuple[tuple[int, ...], ...]:
    blocks = tuple(tuple(sorted(int(i) for i in b)) for b in blocks)
    return tuple(sorted(blocks, key=lambda b: b[0]))


@dataclass(frozen=True)
class SetPartition:
    """Partition of [n] = {1, .., n} into disjoint blocks, ordered by minima."""

    blocks: tuple[tuple[int, ...], ...]

    def __init__(self, blocks):
        blocks = _canonical_blocks(blocks)
        seen = [i for b in blocks for i in b]
        n = len(seen)
        if sorted(seen) != list(range(1, n + 1)):
            raise ValueError("blocks must partition {1,..,n}")
        object.__setattr__(self, "blocks", blocks)

    @property
    def n(self) -> int:
        return sum(len(b) for b in self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def __str__(self) -> str:
        return "|".join("{" + ",".join(map(str, b)) + "}" for b in self.blocks)


class NCPartition(SetPartition):
    """Set partition verified to be noncrossing."""

    def __init__(self, blocks):
        super().__init__(blocks)
        if not is_noncrossing(self.blocks):
            raise ValueError(f"partition {self} has a crossing")


class NCPairing(NCPartition):
    """Noncrossing partition all of whose blocks have exactly two elements."""

    def __init__(self, blocks):
        super().__init__(blocks)
        if any(len(b) != 2 for b in self.blocks):
            raise ValueError("pairing blocks must have size 2")


def is_noncrossing(blocks) -> bool:
    """True iff no a < b < c < d has a, c in one block and b, d in another."""
    label = {}
    for idx, b in enumerate(blocks):
        for i in b:
            label[i] = idx
    seq = [label[i] for i in sorted(label)]
    stack: list[int] = []
    remaining = {idx: len(b) for idx, b in enumerate(blocks)}
    open_set: set[int] = set()
    for lab in seq:
        if stack and stack[-1] == lab:
            pass
        elif lab in open_set:
            return False  # block resumes while another one is still open above it
        else:
            stack.append(lab)
            open_set.add(lab)
        remaining[lab] -= 1
        if remaining[lab] == 0:
            stack.pop()
            open_set.discard(lab)
    return True


def enumerate_set_partitions(n: int):
    """Yield all set partitions of [n] as block tuples."""
    if n < 1:
        raise ValueError("n must be >= 1")

    def rec(i, blocks):
        if i > n:
            yield tuple(tuple(b) for b in blocks)
            return
        for b in blocks:
            b.append(i)
            yield from rec(i + 1, blocks)
            b.pop()
        blocks.append([i])
        yield from rec(i + 1, blocks)
        blocks.pop()

    yield from rec(1, [])


# ---------------------------------------------------------------------------
# lazy noncrossing generators over integer ranges
# ---------------------------------------------------------------------------

def _gen_nc(lo: int, hi: int, even_only: bool):
    """Yield noncrossing partitions of {lo, .., hi} as tuples of blocks.

    The block of ``lo`` is chosen first; the gaps between its consecutive
    members and the tail after its last member are partitioned independently
    (a crossing would otherwise connect a gap to the outside).
    """
    if lo > hi:
        yield ()
        return

    def segments_product(segs, i):
        if i == len(segs):
            yield ()
            return
        a, b = segs[i]
        for p in _gen_nc(a, b, even_only):
            for q in segments_product(segs, i + 1):
                yield p + q

    def rec(members, segs):
        last = members[-1]
        tail_len = hi - last
        if not even_only or (len(members) % 2 == 0 and tail_len % 2 == 0):
            block = tuple(members)
            all_segs = list(segs)
            if tail_len:
                all_segs.append((last + 1, hi))
            for combo in segments_product(all_segs, 0):
                yield (block,) + combo
        for m2 in range(last + 1, hi + 1):
            gap = m2 - last - 1
            if even_only and gap % 2:
                continue
            members.append(m2)
            if gap:
                segs.append((last + 1, m2 - 1))
            yield from rec(members, segs)
            if gap:
                segs.pop()
            members.pop()

    yield from rec([lo], [])


def _gen_pairings(lo: int, hi: int):
    """Yield noncrossing pairings of {lo, .., hi} (even count of elements)."""
    if lo > hi:
        yield ()
        return
    for m in range(lo + 1, hi + 1, 2):
        for p_in in _gen_pairings(lo + 1, m - 1):
            for p_out in _gen_pairings(m + 1, hi):
                yield ((lo, m),) + p_in + p_out


def _sort_key(blocks):
    return tuple((b[0], b) for b in blocks)


def _materialize(n: int, kind: str) -> tuple:
    if kind == "nc":
        parts = [_canonical_blocks(p) for p in _gen_nc(1, n, False)]
    elif kind == "even":
        parts = [_canonical_blocks(p) for p in _gen_nc(1, n, True)]
    else:
        parts = [_canonical_blocks(p) for p in _gen_pairings(1, n)]
    parts.sort(key=_sort_key)
    return tuple(parts)


@lru_cache(maxsize=48)
def _materialize_cached(n: int, kind: str) -> tuple:
    return _materialize(n, kind)


def _blocks_list(n: int, kind: str) -> tuple:
    if n <= _CACHE_LIMIT:
        return _materialize_cached(n, kind)
    return _materialize(n, kind)


def enumerate_nc(n: int) -> list[NCPartition]:
    """All noncrossing partitions of [n], canonically ordered.

    Ordered lexicographically on the block-minimum sequence, then on block
    contents, so output is reproducible byte for byte.
    """
    if not 1 <= n <= MAX_NC_N:
        raise ValueError(f"n must be in [1, {MAX_NC_N}]")
    return [NCPartition(p) for p in _blocks_list(n, "nc")]


def enumerate_nc_even(n: int) -> list[NCPartition]:
    """Noncrossing partitions of [n] with all block sizes even (n even)."""
    if n % 2 or not 2 <= n <= MAX_NC_N:
        raise ValueError(f"n must be even and in [2, {MAX_NC_N}]")
    return [NCPartition(p) for p in _blocks_list(n, "even")]


def enumerate_nc_pairings(n: int) -> list[NCPairing]:
    """All noncrossing pairings of [n] (n even); count is Catalan(n/2)."""
    if n % 2 or not 2 <= n <= MAX_PAIRING_N:
        raise ValueError(f"n must be even and in [2, {MAX_PAIRING_N}]")
    return [NCPairing(p) for p in _blocks_list(n, "pair")]


def min_parity_stats(p: SetPartition) -> tuple[int, int]:
    """(e, o): number of blocks whose minimum is even / odd."""
    e = sum(1 for b in p.blocks if b[0] % 2 == 0)
    return e, len(p.blocks) - e


def nc_to_pairing(p: NCPartition) -> NCPairing:
    """Bijection from noncrossing partitions of [n] to pairings of [2n].

    Position i of [n] owns the letters y_i = 2i-1 and z_i = 2i of the
    interleaved alphabet y_1 < z_1 < ... < y_n < z_n.  Interval blocks are
    peeled off one at a time; a block occupying consecutive remaining
    positions contributes {y_first, z_last} plus the chain pairs
    {z_j, y_next}.  The image satisfies o(image) = number of blocks of p.
    """
    remaining = list(range(1, p.n + 1))
    todo = list(p.blocks)
    pairs = []
    while todo:
        for b in todo:
            i0 = remaining.index(b[0])
            if remaining[i0:i0 + len(b)] == list(b):  # interval of what is left
                pairs.append((2 * b[0] - 1, 2 * b[-1]))
                for a, c in zip(b, b[1:]):
                    pairs.append((2 * a, 2 * c - 1))
                del remaining[i0:i0 + len(b)]
                todo.remove(b)
                break
        else:
            raise ValueError("no interval block found; partition must be crossing")
    return NCPairing(pairs)


# ---------------------------------------------------------------------------
# moment / cumulant dictionaries
# ---------------------------------------------------------------------------

def _prod(values):
    out = 1
    for v in values:
        out = out * v
    return out


def moments_from_rect_cumulants(lam, cumulants) -> list:
    """Even moments m_2, .., m_{2K} from rectangular cumulants c_2, .., c_{2K}.

    Exact sum over even-block noncrossing partitions of [2n] weighted by
    lambda^(number of blocks with even minimum); works with Fractions too.
    """
    cumulants = list(cumulants)
    K = len(cumulants)
    if K > 8:
        raise ValueError("at most 8 cumulant orders (enumeration bound)")
    moments = []
    for n in range(1, K + 1):
        total = 0
        for blocks in _gen_nc(1, 2 * n, True):
            e = sum(1 for b in blocks if b[0] % 2 == 0)
            w = _prod(cumulants[len(b) // 2 - 1] for b in blocks)
            total = total + lam**e * w
        moments.append(total)
    return moments


def rect_cumulants_from_moments(lam, moments) -> list:
    """Inverse of :func:`moments_from_rect_cumulants` (triangular solve)."""
    moments = list(moments)
    K = len(moments)
    if K > 8:
        raise ValueError("at most 8 moment orders (enumeration bound)")
    cumulants: list = []
    for n in range(1, K + 1):
        # only the single-block partition of [2n] involves c_{2n}; its e is 0
        rest = 0
        for blocks in _gen_nc(1, 2 * n, True):
            if len(blocks) == 1:
                continue
            e = sum(1 for b in blocks if b[0] % 2 == 0)
            w = _prod(cumulants[len(b) // 2 - 1] for b in blocks)
            rest = rest + lam**e * w
        cumulants.append(moments[n - 1] - rest)
    return cumulants


def classical_moments_from_cumulants(cumulants) -> list:
    """Moments m_1, .., m_K from classical cumulants c*_1, .., c*_K.

    Exact sum over all set partitions of [k].
    """
    cumulants = list(cumulants)
    K = len(cumulants)
    if K > 10:
        raise ValueError("at most 10 orders (Bell-number bound)")
    moments = []
    for k in range(1, K + 1):
        total = 0
        for blocks in enumerate_set_partitions(k):
            total = total + _prod(cumulants[len(b) - 1] for b in blocks)
        moments.append(total)
    return moments


def classical_cumulants_from_moments(moments) -> list:
    """Inverse of :func:`classical_moments_from_cumulants`."""
    moments = list(moments)
    K = len(moments)
    if K > 10:
        raise ValueError("at most 10 orders (Bell-number bound)")
    cumulants: list = []
    for k in range(1, K + 1):
        rest = 0
        for blocks in enumerate_set_partitions(k):
            if len(blocks) == 1:
                continue
            rest = rest + _prod(cumulants[len(b) - 1] for b in blocks)
        cumulants.append(moments[k - 1] - rest)
    return cumulants


def mp_moment(a, n: int):
    """n-th Marchenko-Pastur moment: sum of a^(o(pi)) over pairings of [2n]."""
    if not 1 <= n <= 12:
        raise ValueError("n must be in [1, 12]")
    total = 0
    for blocks in _gen_pairings(1, 2 * n):
        o = sum(1 for b in blocks if b[0] % 2 == 1)
        total = total + a**o
    return total


def partition_table_rows(n: int, kind: str = "partitions"):
    """Rows (n, id, blocks, e, o) for CSV dumps of the enumerations."""
    if kind == "partitions":
        parts = enumerate_nc(n)
    elif kind == "even":
        parts = enumerate_nc_even(n)
    elif kind == "pairings":
        parts = enumerate_nc_pairings(n)
    else:
        raise ValueError(f"unknown enumeration kind {kind!r}")
    rows = []
    for i, p in enumerate(parts):
        e, o = min_parity_stats(p)
        rows.append((n, i, str(p), e, o))
    return rows
