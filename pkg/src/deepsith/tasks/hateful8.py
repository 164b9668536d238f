"""Hateful-8: classify one of eight Morse-like patterns that is followed by
noise made of the same dots, dashes and pauses.

A dot is one active step, a dash three; elements are separated by one silent
step. Each class code has four elements and at most three dashes, so it
occupies at most 13 steps and the 17-step decodable window always ends in at
least three silent steps (the end-of-letter pause).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CODES",
    "WINDOW",
    "Hateful8Sample",
    "encode",
    "gen_noise",
    "gen_hateful8",
    "make_hateful8_dataset",
]

WINDOW = 17
DOT, DASH = 1, 3
PAUSE = 3
PAUSE_PROB = 0.1

# Four-element Morse letters B C F H L P V Z; the class index is just a label.
CODES = ("-...", "-.-.", "..-.", "....", ".-..", ".--.", "...-", "--..")


@dataclass(frozen=True, eq=False)
class Hateful8Sample:
    input: np.ndarray  # (WINDOW + noise_len,) of 0/1
    label: int


def encode(code: str) -> np.ndarray:
    """The 17-step decodable window for one code."""
    out = np.zeros(WINDOW)
    t = 0
    for j, sym in enumerate(code):
        if j:
            t += 1
        width = DASH if sym == "-" else DOT
        out[t : t + width] = 1.0
        t += width
    if t > WINDOW - PAUSE:
        raise ValueError(f"code {code!r} does not leave room for the terminal pause")
    return out


def gen_noise(length: int, rng: np.random.Generator) -> np.ndarray:
    """Dots and dashes in equal proportion, one-step gaps, occasional three-step pauses."""
    out = np.zeros(length)
    t = 0
    while t < length:
        width = DASH if rng.random() < 0.5 else DOT
        out[t : t + width] = 1.0
        t += width
        t += PAUSE if rng.random() < PAUSE_PROB else 1
    return out


def gen_hateful8(noise_len: int, cls: int, seed) -> Hateful8Sample:
    if not 0 <= cls < len(CODES):
        raise ValueError(f"class must be in 0..{len(CODES) - 1}, got {cls}")
    if noise_len < 0:
        raise ValueError("noise_len must be >= 0")
    rng = np.random.default_rng(seed)
    return Hateful8Sample(np.concatenate([encode(CODES[cls]), gen_noise(noise_len, rng)]), cls)


def make_hateful8_dataset(
    noise_len: int, per_class: int, seed: int, dtype=np.float64
) -> tuple[np.ndarray, np.ndarray]:
    """``per_class`` noise draws of every class; returns ``(X (n, T, 1), labels (n,))``.

    Sample ``j`` of class ``c`` is seeded by ``(seed, c, j)``.
    """
    xs, ys = [], []
    for cls in range(len(CODES)):
        for j in range(per_class):
            sample = gen_hateful8(noise_len, cls, (seed, cls, j))
            xs.append(sample.input)
            ys.append(cls)
    return np.stack(xs).astype(dtype)[:, :, None], np.array(ys)
