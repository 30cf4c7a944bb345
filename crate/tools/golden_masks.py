#!/usr/bin/env python3
"""Reference implementation of the mask constructions, independent of the
Rust crate. Regenerates crates/core/tests/golden/masks.jsonl; the Rust test
suite compares its own output against that file, so any divergence between
the two implementations fails loudly.
"""
import json
import math
import os

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def mix(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return (z ^ (z >> 31)) & MASK64


class SplitMix64:
    def __init__(self, state: int):
        self.state = state & MASK64

    @classmethod
    def keyed(cls, seed: int, counter: int) -> "SplitMix64":
        return cls(mix(seed ^ mix(counter ^ GOLDEN)))

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return mix(self.state)

    def next_below(self, bound: int) -> int:
        return self.next_u64() % bound

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]


def keep_count(n: int, r: float) -> int:
    x = (1.0 - r) * n
    return max(1, math.floor(x + 0.5))  # round half away from zero (x >= 0)


def random_mask(gh, gw, r, seed, idx):
    n = gh * gw
    k = keep_count(n, r)
    order = list(range(n))
    SplitMix64.keyed(seed, idx).shuffle(order)
    return sorted(order[:k])


def grid_mask(gh, gw, r):
    if r == 0.25:
        keep = lambda i, j: not (i % 2 == 1 and j % 2 == 1)
    elif r == 0.5:
        keep = lambda i, j: i % 2 == j % 2
    elif r == 0.75:
        keep = lambda i, j: i % 2 == 0 and j % 2 == 0
    else:
        raise ValueError(r)
    return [i * gw + j for i in range(gh) for j in range(gw) if keep(i, j)]


def block_mask(gh, gw, r, seed, idx):
    n = gh * gw
    k = keep_count(n, r)
    target = r * n
    best_area, best_dist = 0, float("inf")
    for h in range(1, gh + 1):
        for w in range(1, gw + 1):
            area = h * w
            dist = abs(area - target)
            if dist < best_dist or (dist == best_dist and area < best_area):
                best_dist, best_area = dist, area
    if n - best_area != k:
        raise ValueError(f"infeasible: {gh}x{gw} r={r}")
    placements = [
        (h, w, top, left)
        for h in range(1, gh + 1)
        for w in range(1, gw + 1)
        if h * w == best_area
        for top in range(gh - h + 1)
        for left in range(gw - w + 1)
    ]
    h, w, top, left = placements[SplitMix64.keyed(seed, idx).next_below(len(placements))]
    return [
        i * gw + j
        for i in range(gh)
        for j in range(gw)
        if not (top <= i < top + h and left <= j < left + w)
    ]


CASES = [
    ("random", 2, 2, 0.0, 7, 0),
    ("random", 14, 14, 0.5, 1, 0),
    ("random", 14, 14, 0.5, 1, 1),
    ("random", 16, 16, 0.3, 123, 77),
    ("random", 6, 6, 0.86, 2, 5),
    ("random", 7, 5, 0.4, 99, 12),
    ("grid", 2, 2, 0.75, 0, 0),
    ("grid", 2, 2, 0.5, 0, 0),
    ("grid", 4, 4, 0.25, 0, 0),
    ("grid", 8, 6, 0.5, 0, 0),
    ("grid", 14, 14, 0.75, 0, 0),
    ("block", 4, 4, 0.25, 3, 0),
    ("block", 14, 14, 0.5, 9, 4),
    ("block", 16, 16, 0.3, 11, 2),
    ("block", 8, 8, 0.25, 5, 19),
]


def main():
    out_path = os.path.join(
        os.path.dirname(__file__), "..", "crates", "core", "tests", "golden", "masks.jsonl"
    )
    rows = []
    for strategy, gh, gw, r, seed, idx in CASES:
        if strategy == "random":
            kept = random_mask(gh, gw, r, seed, idx)
        elif strategy == "grid":
            kept = grid_mask(gh, gw, r)
        else:
            kept = block_mask(gh, gw, r, seed, idx)
        assert kept == sorted(set(kept)) and all(0 <= i < gh * gw for i in kept)
        assert len(kept) == keep_count(gh * gw, r), (strategy, gh, gw, r)
        rows.append(
            {
                "strategy": strategy,
                "grid_h": gh,
                "grid_w": gw,
                "ratio": r,
                "seed": seed,
                "sample_index": idx,
                "kept": kept,
            }
        )
    with open(out_path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, separators=(",", ":")) + "\n")
    print(f"wrote {len(rows)} rows to {os.path.normpath(out_path)}")


if __name__ == "__main__":
    main()
