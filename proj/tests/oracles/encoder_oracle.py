#!/usr/bin/env python3
"""Independent reimplementation of the hashed bag-of-tokens state encoder.

Prints the reference vector frozen into tests/dialogue_test.cpp.
"""
import re

FNV_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_BASIS
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & MASK
    return h


def tokenize(text):
    return [t for t in re.split(r"[^a-z0-9]+", text.lower()) if t]


def encode(history, turn, max_turns, segment, dim):
    buckets = dim - 4
    v = [0.0] * dim
    for speaker, text in history:
        toks = tokenize(text)
        if not toks:
            continue
        salt = b"agent|" if speaker == "agent" else b"user|"
        for t in toks:
            v[fnv1a64(salt + t.encode()) % buckets] += 1.0 / len(toks)
    v[buckets] = turn / max_turns
    v[buckets + 1] = (max_turns - turn) / max_turns
    v[buckets + 2] = (fnv1a64(b"segment|" + segment.encode()) % 32 + 1) / 32
    v[buckets + 3] = 1.0
    return v


if __name__ == "__main__":
    history = [
        ("agent", "Hi there, welcome to the shop!"),
        ("user", "Hi! Just looking around."),
        ("agent", "What kind of coffee do you usually enjoy?"),
        ("user", "Mostly espresso, I guess."),
        ("agent", "The Brio espresso machine would suit you."),
        ("user", "That sounds perfect."),
    ]
    vec = encode(history, 3, 5, "retail", 16)
    print("{" + ", ".join(repr(x) for x in vec) + "}")
    print("fnv1a64('') =", hex(fnv1a64(b"")), " fnv1a64('a') =", hex(fnv1a64(b"a")))
    print("fingerprint input check:", hex(fnv1a64(b"talktrack-encoder|hashed-bag|v1|D16")))
