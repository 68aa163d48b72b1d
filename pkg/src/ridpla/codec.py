"""Bit-level payload protection: CRC-16, LFSR scrambling, a rate-1/2
convolutional code with soft Viterbi decoding, and QPSK mapping.

The decode path reports failure through a CRC mismatch rather than raising;
frame corruption is an expected runtime outcome.
"""

from __future__ import annotations

import numpy as np

CRC_POLY = 0x1021  # CRC-16/CCITT
CRC_INIT = 0xFFFF

# K=7 convolutional code, generators 133/171 (octal), zero-tail terminated.
CONSTRAINT = 7
G0, G1 = 0o133, 0o171
_N_STATES = 1 << (CONSTRAINT - 1)

SCRAMBLER_SEED = 0x5A
_SCRAMBLER_TAPS = (7, 4)  # x^7 + x^4 + 1


def crc16(data: bytes) -> int:
    reg = CRC_INIT
    for byte in data:
        reg ^= byte << 8
        for _ in range(8):
            if reg & 0x8000:
                reg = ((reg << 1) ^ CRC_POLY) & 0xFFFF
            else:
                reg = (reg << 1) & 0xFFFF
    return reg


def append_crc(data: bytes) -> bytes:
    return data + crc16(data).to_bytes(2, "big")


def check_crc(data: bytes) -> bool:
    return len(data) >= 2 and crc16(data[:-2]) == int.from_bytes(data[-2:], "big")


def bytes_to_bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))


def bits_to_bytes(bits: np.ndarray) -> bytes:
    return np.packbits(bits.astype(np.uint8)).tobytes()


_scramble_cache: dict[int, np.ndarray] = {}


def scramble_sequence(n: int, seed: int = SCRAMBLER_SEED) -> np.ndarray:
    """First n outputs of the x^7+x^4+1 LFSR started from ``seed``."""
    key = seed
    cached = _scramble_cache.get(key)
    if cached is None or len(cached) < n:
        length = max(n, 4096)
        state = seed & 0x7F or 0x7F
        out = np.empty(length, dtype=np.uint8)
        for i in range(length):
            bit = ((state >> (_SCRAMBLER_TAPS[0] - 1)) ^ (state >> (_SCRAMBLER_TAPS[1] - 1))) & 1
            out[i] = state & 1
            state = ((state << 1) | bit) & 0x7F
        _scramble_cache[key] = out
        cached = out
    return cached[:n]


def scramble(bits: np.ndarray, seed: int = SCRAMBLER_SEED) -> np.ndarray:
    """XOR with the LFSR sequence; an involution, so it also descrambles."""
    return (bits ^ scramble_sequence(len(bits), seed)).astype(np.uint8)


def _parity_table() -> np.ndarray:
    tab = np.zeros(1 << CONSTRAINT, dtype=np.uint8)
    for value in range(1 << CONSTRAINT):
        tab[value] = bin(value).count("1") & 1
    return tab


_PARITY = _parity_table()


def conv_encode(bits: np.ndarray) -> np.ndarray:
    """Rate-1/2 encode with zero-tail; output interleaves the two generators.

    Over GF(2) the encoder output is the mod-2 convolution of the input with
    each generator's tap vector.
    """
    bits = np.asarray(bits, dtype=np.uint8)
    g0_taps = np.array([(G0 >> (CONSTRAINT - 1 - i)) & 1 for i in range(CONSTRAINT)], dtype=np.uint8)
    g1_taps = np.array([(G1 >> (CONSTRAINT - 1 - i)) & 1 for i in range(CONSTRAINT)], dtype=np.uint8)
    padded = np.concatenate([bits, np.zeros(CONSTRAINT - 1, dtype=np.uint8)])
    y0 = np.convolve(padded, g0_taps)[: len(padded)] % 2
    y1 = np.convolve(padded, g1_taps)[: len(padded)] % 2
    out = np.empty(2 * len(padded), dtype=np.uint8)
    out[0::2] = y0
    out[1::2] = y1
    return out


def _build_trellis():
    # predecessors[s'] lists the two (state, input bit) pairs reaching s',
    # with the corresponding +/-1 output symbols for each generator.
    prev_state = np.zeros((_N_STATES, 2), dtype=np.int64)
    sym0 = np.zeros((_N_STATES, 2))
    sym1 = np.zeros((_N_STATES, 2))
    prev_bit = np.zeros((_N_STATES, 2), dtype=np.uint8)
    fill = np.zeros(_N_STATES, dtype=np.int64)
    for state in range(_N_STATES):
        for bit in (0, 1):
            window = (bit << (CONSTRAINT - 1)) | state  # newest bit first
            nxt = window >> 1
            o0 = _PARITY[window & G0]
            o1 = _PARITY[window & G1]
            j = fill[nxt]
            prev_state[nxt, j] = state
            prev_bit[nxt, j] = bit
            sym0[nxt, j] = 1.0 - 2.0 * o0
            sym1[nxt, j] = 1.0 - 2.0 * o1
            fill[nxt] += 1
    return prev_state, prev_bit, sym0, sym1


_PREV_STATE, _PREV_BIT, _SYM0, _SYM1 = _build_trellis()

try:  # the trellis loop is sequential; jit it when numba is around
    from numba import njit

    @njit(cache=True)
    def _viterbi_kernel(soft, n_steps, prev_state, prev_bit, sym0, sym1):
        n_states = prev_state.shape[0]
        pm = np.full(n_states, -1e30)
        pm[0] = 0.0
        backptr = np.zeros((n_steps, n_states), dtype=np.uint8)
        new = np.empty(n_states)
        for step in range(n_steps):
            r0 = soft[2 * step]
            r1 = soft[2 * step + 1]
            for s in range(n_states):
                c0 = pm[prev_state[s, 0]] + r0 * sym0[s, 0] + r1 * sym1[s, 0]
                c1 = pm[prev_state[s, 1]] + r0 * sym0[s, 1] + r1 * sym1[s, 1]
                if c1 > c0:
                    new[s] = c1
                    backptr[step, s] = 1
                else:
                    new[s] = c0
                    backptr[step, s] = 0
            pm, new = new, pm
        bits = np.zeros(n_steps, dtype=np.uint8)
        state = 0
        for step in range(n_steps - 1, -1, -1):
            j = backptr[step, state]
            bits[step] = prev_bit[state, j]
            state = prev_state[state, j]
        return bits

except ImportError:  # pragma: no cover - numba is an optional accelerator
    def _viterbi_kernel(soft, n_steps, prev_state, prev_bit, sym0, sym1):
        pm = np.full(_N_STATES, -1e30)
        pm[0] = 0.0
        backptr = np.zeros((n_steps, _N_STATES), dtype=np.uint8)
        for step in range(n_steps):
            cand = pm[prev_state] + soft[2 * step] * sym0 + soft[2 * step + 1] * sym1
            best = np.argmax(cand, axis=1)
            backptr[step] = best
            pm = cand[np.arange(_N_STATES), best]
        bits = np.zeros(n_steps, dtype=np.uint8)
        state = 0
        for step in range(n_steps - 1, -1, -1):
            j = backptr[step, state]
            bits[step] = prev_bit[state, j]
            state = prev_state[state, j]
        return bits


def viterbi_decode(soft: np.ndarray, n_bits: int) -> np.ndarray:
    """Max-correlation soft-decision Viterbi decode of ``n_bits`` payload bits.

    ``soft`` holds one real value per coded bit with positive meaning bit 0;
    hard bits may be passed as +/-1.  The zero tail pins the final state.
    """
    soft = np.ascontiguousarray(soft, dtype=np.float64)
    n_steps = n_bits + CONSTRAINT - 1
    if len(soft) < 2 * n_steps:
        raise ValueError("soft input shorter than the coded block")
    bits = _viterbi_kernel(soft, n_steps, _PREV_STATE, _PREV_BIT, _SYM0, _SYM1)
    return bits[:n_bits]


def qpsk_modulate(bits: np.ndarray) -> np.ndarray:
    """Gray-mapped QPSK, unit average power; bit pairs (b0, b1) -> I, Q."""
    bits = np.asarray(bits, dtype=np.uint8)
    if len(bits) % 2:
        raise ValueError("QPSK needs an even number of bits")
    i = 1.0 - 2.0 * bits[0::2]
    q = 1.0 - 2.0 * bits[1::2]
    return (i + 1j * q) / np.sqrt(2.0)


def qpsk_soft_demodulate(symbols: np.ndarray) -> np.ndarray:
    """Per-bit soft values (positive = bit 0), interleaved I then Q."""
    symbols = np.asarray(symbols)
    soft = np.empty(2 * len(symbols))
    soft[0::2] = np.real(symbols)
    soft[1::2] = np.imag(symbols)
    return soft * np.sqrt(2.0)
