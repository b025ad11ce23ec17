"""LDPC codes from alist files: systematic encoding and normalized min-sum decoding."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ..autodiff import ConfigurationError

__all__ = [
    "AlistError",
    "RankError",
    "LdpcCode",
    "parse_alist",
    "format_alist",
    "load_code",
    "random_regular_h",
]


class AlistError(ValueError):
    """Malformed alist text; the message carries the offending line number."""


class RankError(ValueError):
    """Parity-check matrix without full row rank."""


def _ints(line: str, lineno: int) -> list[int]:
    try:
        return [int(tok) for tok in line.split()]
    except ValueError as exc:
        raise AlistError(f"line {lineno}: expected integers, got {line.strip()!r}") from exc


def parse_alist(text: str) -> np.ndarray:
    """Parse MacKay's alist format into a dense 0/1 ``(m, n)`` matrix."""
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    if len(lines) < 4:
        raise AlistError(f"line {len(lines) + 1}: alist header truncated")
    it = iter(lines)

    def take(expected: int | None = None):
        try:
            lineno, ln = next(it)
        except StopIteration:
            raise AlistError(f"line {lines[-1][0] + 1}: unexpected end of file") from None
        vals = _ints(ln, lineno)
        if expected is not None and len(vals) != expected:
            raise AlistError(f"line {lineno}: expected {expected} values, found {len(vals)}")
        return lineno, vals

    lineno, head = take(2)
    n, m = head
    if n <= 0 or m <= 0:
        raise AlistError(f"line {lineno}: dimensions must be positive, got n={n}, m={m}")
    lineno, (max_col, max_row) = take(2)
    col_line, col_deg = take(n)
    row_line, row_deg = take(m)
    if max(col_deg) != max_col:
        raise AlistError(f"line {col_line}: maximum column degree {max(col_deg)} disagrees with header {max_col}")
    if max(row_deg) != max_row:
        raise AlistError(f"line {row_line}: maximum row degree {max(row_deg)} disagrees with header {max_row}")
    if sum(col_deg) != sum(row_deg):
        raise AlistError(f"line {row_line}: column degrees sum to {sum(col_deg)} but row degrees to {sum(row_deg)}")

    H = np.zeros((m, n), dtype=np.uint8)
    for j in range(n):
        lineno, vals = take()
        rows = [v for v in vals if v != 0]
        if len(rows) != col_deg[j]:
            raise AlistError(f"line {lineno}: column {j + 1} lists {len(rows)} entries, degree says {col_deg[j]}")
        if len(set(rows)) != len(rows):
            raise AlistError(f"line {lineno}: column {j + 1} repeats a row index")
        for r in rows:
            if not 1 <= r <= m:
                raise AlistError(f"line {lineno}: row index {r} out of range 1..{m}")
            H[r - 1, j] = 1
    for i in range(m):
        lineno, vals = take()
        cols = [v for v in vals if v != 0]
        if len(cols) != row_deg[i]:
            raise AlistError(f"line {lineno}: row {i + 1} lists {len(cols)} entries, degree says {row_deg[i]}")
        for c in cols:
            if not 1 <= c <= n:
                raise AlistError(f"line {lineno}: column index {c} out of range 1..{n}")
        if sorted(cols) != sorted((np.flatnonzero(H[i]) + 1).tolist()):
            raise AlistError(f"line {lineno}: row {i + 1} disagrees with the column lists")
    return H


def format_alist(H: np.ndarray) -> str:
    H = np.asarray(H) % 2
    m, n = H.shape
    col_deg = H.sum(axis=0).astype(int)
    row_deg = H.sum(axis=1).astype(int)
    out = [f"{n} {m}", f"{col_deg.max()} {row_deg.max()}"]
    out.append(" ".join(map(str, col_deg)))
    out.append(" ".join(map(str, row_deg)))
    for j in range(n):
        rows = list(np.flatnonzero(H[:, j]) + 1) + [0] * (col_deg.max() - col_deg[j])
        out.append(" ".join(map(str, rows)))
    for i in range(m):
        cols = list(np.flatnonzero(H[i]) + 1) + [0] * (row_deg.max() - row_deg[i])
        out.append(" ".join(map(str, cols)))
    return "\n".join(out) + "\n"


def _rref_gf2(H: np.ndarray) -> tuple[np.ndarray, list[int]]:
    A = (np.asarray(H) % 2).astype(bool)
    m, n = A.shape
    pivots: list[int] = []
    row = 0
    for col in range(n):
        if row == m:
            break
        hits = np.flatnonzero(A[row:, col])
        if hits.size == 0:
            continue
        p = row + hits[0]
        if p != row:
            A[[row, p]] = A[[p, row]]
        others = np.flatnonzero(A[:, col])
        others = others[others != row]
        A[others] ^= A[row]
        pivots.append(col)
        row += 1
    return A, pivots


@dataclass
class LdpcCode:
    """Binary LDPC code defined by its parity-check matrix."""

    H: np.ndarray
    name: str = "ldpc"
    norm: float = 0.75
    _parity: np.ndarray = field(init=False, repr=False)
    info_positions: np.ndarray = field(init=False, repr=False)
    parity_positions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.H = (np.asarray(self.H) % 2).astype(np.uint8)
        m, n = self.H.shape
        R, pivots = _rref_gf2(self.H)
        if len(pivots) < m:
            raise RankError(f"parity-check matrix has rank {len(pivots)} < {m} rows")
        info = np.array([c for c in range(n) if c not in set(pivots)], dtype=np.intp)
        self.parity_positions = np.array(pivots, dtype=np.intp)
        self.info_positions = info
        # row i of R: c[pivot_i] + sum_j R[i, info_j] u_j = 0
        self._parity = R[:, info].astype(np.uint8)
        self._build_decoder()

    @property
    def n(self) -> int:
        return self.H.shape[1]

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def k(self) -> int:
        return self.n - self.m

    @property
    def rate(self) -> float:
        return self.k / self.n

    @classmethod
    def from_alist(cls, path: str | Path, **kw) -> "LdpcCode":
        path = Path(path)
        return cls(parse_alist(path.read_text()), name=kw.pop("name", path.stem), **kw)

    def _build_decoder(self) -> None:
        rows, cols = np.nonzero(self.H)
        order = np.lexsort((cols, rows))
        self._edge_row = rows[order]
        self._edge_col = cols[order]
        n_edges = len(order)
        deg = np.bincount(self._edge_row, minlength=self.m)
        dmax = deg.max()
        slots = np.full((self.m, dmax), n_edges, dtype=np.intp)  # n_edges is the padding slot
        start = np.concatenate([[0], np.cumsum(deg)[:-1]])
        for i in range(self.m):
            slots[i, : deg[i]] = np.arange(start[i], start[i] + deg[i])
        self._check_slots = slots
        self._pad = slots == n_edges
        self._var_sum = sp.csr_matrix(
            (np.ones(n_edges), (self._edge_col, np.arange(n_edges))), shape=(self.n, n_edges)
        )
        self._Hs = sp.csr_matrix(self.H.astype(np.int32))

    def encode(self, info_bits) -> np.ndarray:
        """Systematic encoding; accepts ``(k,)`` or ``(batch, k)`` bits."""
        u = np.asarray(info_bits, dtype=np.int64)
        if u.shape[-1] != self.k:
            raise ConfigurationError(f"expected {self.k} information bits, got {u.shape[-1]}")
        squeeze = u.ndim == 1
        u = u.reshape(-1, self.k)
        cw = np.zeros((u.shape[0], self.n), dtype=np.int8)
        cw[:, self.info_positions] = u
        cw[:, self.parity_positions] = (u @ self._parity.T.astype(np.int64)) % 2
        return cw[0] if squeeze else cw

    def syndrome(self, codewords) -> np.ndarray:
        c = np.atleast_2d(np.asarray(codewords, dtype=np.int32))
        return np.asarray(self._Hs @ c.T).T % 2

    def decode_full(self, llrs, max_iters: int = 25):
        """Min-sum decode of ``(batch, n)`` LLRs (positive favours bit 0).

        Returns hard codeword decisions, a per-codeword convergence flag and the
        number of iterations each codeword used.
        """
        llr = np.atleast_2d(np.asarray(llrs, dtype=np.float64))
        if llr.shape[-1] != self.n:
            raise ConfigurationError(f"expected {self.n} LLRs per codeword, got {llr.shape[-1]}")
        batch = llr.shape[0]
        n_edges = len(self._edge_col)
        c2v = np.zeros((batch, n_edges))
        hard = (llr < 0).astype(np.int8)
        converged = np.zeros(batch, dtype=bool)
        iters = np.zeros(batch, dtype=np.int32)
        active = np.arange(batch)
        for it in range(1, max_iters + 1):
            L = llr[active]
            c = c2v[active]
            total = L + (self._var_sum @ c.T).T
            v2c = total[:, self._edge_col] - c
            padded = np.concatenate([v2c, np.full((len(active), 1), np.inf)], axis=1)
            msgs = padded[:, self._check_slots]  # (B, m, dmax)
            mag = np.abs(msgs)
            sgn = np.where(msgs < 0, -1.0, 1.0)
            sgn[:, self._pad] = 1.0
            prod = np.prod(sgn, axis=2, keepdims=True)
            idx = np.argmin(mag, axis=2)
            min1 = np.take_along_axis(mag, idx[..., None], axis=2)
            mag2 = mag.copy()
            np.put_along_axis(mag2, idx[..., None], np.inf, axis=2)
            min2 = mag2.min(axis=2, keepdims=True)
            is_min = np.arange(mag.shape[2]) == idx[..., None]
            out = self.norm * prod * sgn * np.where(is_min, min2, min1)
            out = np.where(np.isfinite(out), out, 0.0)
            new_c = np.empty((len(active), n_edges))
            valid = ~self._pad
            new_c[:, self._check_slots[valid]] = out[:, valid]
            c2v[active] = new_c
            total = L + (self._var_sum @ new_c.T).T
            dec = (total < 0).astype(np.int8)
            hard[active] = dec
            ok = ~self.syndrome(dec).any(axis=1)
            iters[active] = it
            converged[active[ok]] = True
            active = active[~ok]
            if active.size == 0:
                break
        return hard, converged, iters

    def decode(self, llrs, max_iters: int = 25):
        """Return ``(info_bits, converged)`` for ``(n,)`` or ``(batch, n)`` LLRs."""
        squeeze = np.asarray(llrs).ndim == 1
        hard, converged, _ = self.decode_full(llrs, max_iters)
        info = hard[:, self.info_positions]
        if squeeze:
            return info[0], bool(converged[0])
        return info, converged


def random_regular_h(n: int, col_weight: int, row_weight: int, seed: int, max_tries: int = 200) -> np.ndarray:
    """Random (col_weight, row_weight)-regular H without 4-cycles and with full rank."""
    if (n * col_weight) % row_weight:
        raise ConfigurationError("n * col_weight must be divisible by row_weight")
    m = n * col_weight // row_weight
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        H = np.zeros((m, n), dtype=bool)
        row_fill = np.zeros(m, dtype=int)
        ok = True
        for j in rng.permutation(n):
            chosen: list[int] = []
            for _ in range(col_weight):
                # rows already meeting a chosen row in some column would close a 4-cycle
                blocked = H[:, H[chosen].any(axis=0)].any(axis=1) if chosen else np.zeros(m, dtype=bool)
                blocked[chosen] = True
                cand = np.flatnonzero((row_fill < row_weight) & ~blocked)
                if cand.size == 0:
                    ok = False
                    break
                least = row_fill[cand].min()
                r = int(rng.choice(cand[row_fill[cand] == least]))
                chosen.append(r)
                row_fill[r] += 1
            if not ok:
                break
            H[chosen, j] = True
        if not ok:
            continue
        _, pivots = _rref_gf2(H)
        if len(pivots) == m:
            return H.astype(np.uint8)
    raise RankError("could not construct a full-rank regular code; try another seed")


def load_code(name: str = "ldpc_648_r12") -> LdpcCode:
    """Load a bundled code by name, or any alist file by path."""
    p = Path(name)
    if p.suffix == ".alist" and p.exists():
        return LdpcCode.from_alist(p)
    ref = resources.files("qatnrx.data.codes") / f"{name}.alist"
    if not ref.is_file():
        raise FileNotFoundError(f"unknown LDPC code {name!r}")
    return LdpcCode(parse_alist(ref.read_text()), name=name)
