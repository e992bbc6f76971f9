"""Shorthand text rendering of an auction and its one-hot character encoding.

Grammar (clauses joined by ``|``, in this order; a clause is omitted when its
field is missing or its history list is empty)::

    pub:<label>|ad:<sku_id>|price:<int>|jdln:<0|1>|cpc:<d.dd>
        |bought:<id>@<days>[,<id>@<days>...]|browsed:<id>@<days>[,...]

History entries are listed most-recent-first.  The text is lowered and cut
to the first 600 characters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

MAX_LEN = 600

# 26 letters, 10 digits, space, newline, 33 symbols (tab completes the set).
ALPHABET = (
    "abcdefghijklmnopqrstuvwxyz"
    "0123456789"
    " \n"
    "-,;.!?:'\"/\\|_@#$%^&*~`+=<>()[]{}"
    "\t"
)
ALPHABET_SIZE = len(ALPHABET)
assert ALPHABET_SIZE == 71
CHAR_INDEX = {c: i for i, c in enumerate(ALPHABET)}
# Index used for padding / unknown characters in the compact code array.
NULL = ALPHABET_SIZE

_LUT = np.full(128, NULL, dtype=np.int16)
for _c, _i in CHAR_INDEX.items():
    _LUT[ord(_c)] = _i


@dataclass(frozen=True)
class EncodedState:
    """One-hot view of a description.

    ``codes`` holds the alphabet index of each of the 600 positions, or
    ``NULL`` for padding/out-of-alphabet; both the dense matrix and the sparse
    pair list are derived from it.
    """

    codes: np.ndarray

    @property
    def dense(self) -> np.ndarray:
        return codes_to_dense(self.codes)

    @property
    def sparse(self) -> list[tuple[int, int]]:
        return sparse_view(self)


def describe(request, catalog=None) -> str:
    parts = [f"pub:{request.publisher.label}", f"ad:{request.ad_sku}"]
    sku = None
    if catalog is not None:
        try:
            sku = catalog[request.ad_sku]
        except KeyError:
            sku = None
    if sku is not None:
        parts.append(f"price:{int(sku.price)}")
        parts.append(f"jdln:{int(bool(sku.jdln_flag))}")
    cents = getattr(request, "bid_click_cents", None)
    if cents is not None:
        parts.append(f"cpc:{cents // 100}.{cents % 100:02d}")
    user = request.user
    if user is not None:
        if user.bought:
            parts.append("bought:" + ",".join(f"{s}@{d}" for s, d in _recent_first(user.bought)))
        if user.browsed:
            parts.append("browsed:" + ",".join(f"{s}@{d}" for s, d in _recent_first(user.browsed)))
    return "|".join(parts)[:MAX_LEN]


def _recent_first(items):
    return sorted(items, key=lambda x: x[1])


def encode_codes(text: str) -> np.ndarray:
    """Alphabet index per position (length 600, NULL-padded)."""
    codes = np.full(MAX_LEN, NULL, dtype=np.int16)
    text = text.lower()[:MAX_LEN]
    if text:
        raw = np.frombuffer(text.encode("utf-32-le"), dtype=np.uint32)
        ascii_ = raw < 128
        vals = np.full(raw.shape, NULL, dtype=np.int16)
        vals[ascii_] = _LUT[raw[ascii_]]
        codes[: len(vals)] = vals
    return codes


def one_hot(text: str) -> EncodedState:
    return EncodedState(encode_codes(text))


def codes_to_dense(codes: np.ndarray) -> np.ndarray:
    dense = np.zeros((MAX_LEN, ALPHABET_SIZE), dtype=np.float64)
    pos = np.flatnonzero(codes != NULL)
    dense[pos, codes[pos]] = 1.0
    return dense


def sparse_view(encoded: EncodedState) -> list[tuple[int, int]]:
    codes = encoded.codes
    pos = np.flatnonzero(codes != NULL)
    return [(int(p), int(codes[p])) for p in pos]


def sparse_from_dense(dense: np.ndarray) -> list[tuple[int, int]]:
    rows, cols = np.nonzero(dense)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def codes_from_sparse(pairs, length: int = MAX_LEN) -> np.ndarray:
    """Rebuild the code array; duplicate positions are rejected."""
    codes = np.full(length, NULL, dtype=np.int16)
    seen = set()
    for p, c in pairs:
        if p in seen:
            raise ValueError(f"duplicate position {p} in sparse view")
        if not (0 <= p < length and 0 <= c < ALPHABET_SIZE):
            raise ValueError(f"sparse entry {(p, c)} out of range")
        seen.add(p)
        codes[p] = c
    return codes


def dense_from_sparse(pairs) -> np.ndarray:
    return codes_to_dense(codes_from_sparse(pairs))


def encode_request(request, catalog=None) -> np.ndarray:
    return encode_codes(describe(request, catalog))


def decode(codes: np.ndarray, limit: Optional[int] = None) -> str:
    chars = [ALPHABET[c] if c != NULL else "" for c in codes[:limit]]
    return "".join(chars)
