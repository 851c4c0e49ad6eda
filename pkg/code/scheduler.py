# %%
"""
Length-sorted batch planning with fixed or length-scaled batch sizes, and
exact padding accounting.

Lengths are frame counts from the front-end formula, so every quantity
below is an integer until the final ratios.
"""
import json
import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from errors import ConfigError, DurationTooShort, ParseError
from frontend import frame_count

logger = logging.getLogger(__name__)

MAX_DURATION_S = 21.0

# ----------------------------
# 0. manifest
# ----------------------------

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    audio: str
    text: str
    duration: float

    @property
    def frames(self):
        return frame_count(self.duration)


@dataclass(frozen=True)
class Manifest:
    entries: tuple
    excluded: int = 0

    @property
    def total_count(self):
        return len(self.entries)

    @property
    def exclusion_fraction(self):
        seen = len(self.entries) + self.excluded
        return self.excluded / seen if seen else 0.0

    def by_id(self):
        return {entry.id: entry for entry in self.entries}

    def subset(self, ids):
        wanted = set(ids)
        return Manifest(entries=tuple(e for e in self.entries if e.id in wanted))

    def to_frame(self):
        return pd.DataFrame([vars(e) for e in self.entries], columns=["id", "audio", "text", "duration"])


def load_manifest(path, max_duration_s=MAX_DURATION_S):
    """Read a JSONL manifest, dropping clips longer than `max_duration_s`."""
    entries = []
    seen = set()
    excluded = 0
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                entry = ManifestEntry(id=str(record["id"]), audio=str(record["audio"]),
                                      text=str(record["text"]), duration=float(record["duration"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(line_number, str(exc)) from exc
            if entry.id in seen:
                raise ParseError(line_number, f"duplicate id {entry.id!r}")
            if not (math.isfinite(entry.duration) and entry.duration > 0):
                raise ParseError(line_number, f"duration must be positive and finite, got {entry.duration}")
            try:
                entry.frames
            except DurationTooShort as exc:
                raise ParseError(line_number, str(exc)) from exc
            seen.add(entry.id)
            if entry.duration > max_duration_s:
                excluded += 1
                continue
            entries.append(entry)
    manifest = Manifest(entries=tuple(entries), excluded=excluded)
    logger.info("manifest %s: kept %d, excluded %d (%.3f%%) longer than %.1f s",
                path, len(entries), excluded, 100 * manifest.exclusion_fraction, max_duration_s)
    return manifest


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as f:
        for entry in entries:
            f.write(json.dumps({"id": entry.id, "audio": entry.audio, "text": entry.text,
                                "duration": entry.duration}) + "\n")


# ----------------------------
# 1. plans
# ----------------------------

@dataclass(frozen=True)
class Batch:
    ids: tuple
    frames: tuple

    @property
    def size(self):
        return len(self.ids)

    @property
    def max_frames(self):
        return max(self.frames)

    @property
    def total_cells(self):
        return self.size * self.max_frames

    @property
    def useful_cells(self):
        return sum(self.frames)

    @property
    def padded_cells(self):
        return self.total_cells - self.useful_cells


@dataclass(frozen=True)
class BatchPlan:
    batches: tuple
    policy: str
    base_batch: int
    cap_ratio: int = 1

    @property
    def entry_ids(self):
        return [utt_id for batch in self.batches for utt_id in batch.ids]

    def shuffled(self, seed):
        """Same batches in a seeded random order; contents are untouched."""
        order = np.random.default_rng(seed).permutation(len(self.batches))
        return BatchPlan(tuple(self.batches[i] for i in order), self.policy, self.base_batch, self.cap_ratio)

    def to_frame(self):
        return pd.DataFrame(
            [{"batch": i, "size": b.size, "max_frames": b.max_frames,
              "padded_cells": b.padded_cells, "useful_cells": b.useful_cells}
             for i, b in enumerate(self.batches)]
        )


@dataclass(frozen=True)
class SchedulerConfig:
    policy: str = "varied"
    base_k: int = 32
    cap_ratio: int = 5
    max_duration_s: float = MAX_DURATION_S

    def __post_init__(self):
        if self.policy not in ("fixed", "varied"):
            raise ConfigError(f"unknown batching policy {self.policy!r}")
        if self.base_k < 1 or self.cap_ratio < 1:
            raise ConfigError("base_k and cap_ratio must be at least 1")


def _sorted_entries(manifest):
    return sorted(manifest.entries, key=lambda e: (e.frames, e.id))


def _chunk(entries, k):
    return tuple(
        Batch(ids=tuple(e.id for e in entries[i : i + k]), frames=tuple(e.frames for e in entries[i : i + k]))
        for i in range(0, len(entries), k)
    )


def plan_sorted_fixed(manifest, k):
    if k < 1:
        raise ConfigError("batch size must be at least 1")
    return BatchPlan(_chunk(_sorted_entries(manifest), k), policy="fixed", base_batch=k)


def plan_shuffled_fixed(manifest, k, seed=0):
    """Fixed-size batches over a random entry order (the unsorted baseline)."""
    if k < 1:
        raise ConfigError("batch size must be at least 1")
    entries = list(manifest.entries)
    order = np.random.default_rng(seed).permutation(len(entries))
    return BatchPlan(_chunk([entries[i] for i in order], k), policy="shuffled", base_batch=k)


def _round_half_down(num, den):
    return -(-(2 * num - den) // (2 * den))


def varied_size(longest, global_longest, base_k, cap_ratio):
    """clamp(round(base_k * L_max / L), base_k, cap_ratio * base_k), halves rounded down."""
    size = _round_half_down(base_k * global_longest, max(longest, 1))
    return min(max(size, base_k), cap_ratio * base_k)


def plan_varied(manifest, base_k, cap_ratio=5, memory_budget=None):
    """
    Sorted batches whose size grows as the bucket's longest utterance shrinks.

    Batches are filled left to right over the ascending order, taking the
    largest size s such that s does not exceed the scaled size for the
    batch's own longest item and s * longest stays within the budget.
    """
    if base_k < 1 or cap_ratio < 1:
        raise ConfigError("base_k and cap_ratio must be at least 1")
    entries = _sorted_entries(manifest)
    if not entries:
        return BatchPlan((), policy="varied", base_batch=base_k, cap_ratio=cap_ratio)
    frames = [e.frames for e in entries]
    global_longest = frames[-1]
    budget = memory_budget if memory_budget is not None else base_k * max(global_longest, 1)

    batches = []
    start = 0
    while start < len(entries):
        chosen = base_k
        for size in range(cap_ratio * base_k, base_k, -1):
            end = min(start + size, len(entries))
            longest = frames[end - 1]
            if size <= varied_size(longest, global_longest, base_k, cap_ratio) and size * longest <= budget:
                chosen = size
                break
        batches.extend(_chunk(entries[start : start + chosen], chosen))
        start += chosen

    plan = BatchPlan(tuple(batches), policy="varied", base_batch=base_k, cap_ratio=cap_ratio)
    fixed_cost = padding_report(plan_sorted_fixed(manifest, base_k)).estimated_epoch_cost
    if padding_report(plan).estimated_epoch_cost > fixed_cost:
        logger.warning("varied plan costs more than the fixed plan at k=%d", base_k)
    return plan


# ----------------------------
# 2. padding accounting
# ----------------------------

@dataclass(frozen=True)
class PaddingReport:
    batch_count: int
    total_cells: int
    useful_cells: int
    padded_cells: int
    waste_fraction: float
    estimated_epoch_cost: int

    def to_dict(self):
        return dict(vars(self))


def padding_report(plan):
    """
    Cell accounting for a plan. The step-cost proxy is the sum of each batch's
    longest length: recurrent steps run once per frame of the longest item.
    """
    total = sum(b.total_cells for b in plan.batches)
    useful = sum(b.useful_cells for b in plan.batches)
    return PaddingReport(
        batch_count=len(plan.batches),
        total_cells=total,
        useful_cells=useful,
        padded_cells=total - useful,
        waste_fraction=(total - useful) / total if total else 0.0,
        estimated_epoch_cost=sum(b.max_frames for b in plan.batches),
    )


def compare_policies(manifest, base_k, cap_ratio=5, seed=0):
    plans = {
        "shuffled": plan_shuffled_fixed(manifest, base_k, seed),
        "fixed": plan_sorted_fixed(manifest, base_k),
        "varied": plan_varied(manifest, base_k, cap_ratio),
    }
    table = pd.DataFrame({name: padding_report(plan).to_dict() for name, plan in plans.items()}).T
    fixed_cost = table.loc["fixed", "estimated_epoch_cost"]
    table["cost_vs_fixed"] = table["estimated_epoch_cost"] / fixed_cost if fixed_cost else np.nan
    return table


def build_plan(manifest, cfg):
    if cfg.policy == "fixed":
        return plan_sorted_fixed(manifest, cfg.base_k)
    return plan_varied(manifest, cfg.base_k, cfg.cap_ratio)


def main():
    # -------------------
    # bimodal toy manifest: fifty 1 s clips, ten 10 s clips
    # -------------------
    entries = [ManifestEntry(id=f"short{i:02d}", audio="", text="", duration=1.0) for i in range(50)]
    entries += [ManifestEntry(id=f"long{i:02d}", audio="", text="", duration=10.0) for i in range(10)]
    manifest = Manifest(entries=tuple(entries))

    print(compare_policies(manifest, base_k=2, cap_ratio=5))
    print(plan_varied(manifest, 2, cap_ratio=5).to_frame())


if __name__ == "__main__":
    main()
