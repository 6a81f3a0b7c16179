"""Throughput of each placement policy as fast memory grows.

Numbers are normalized to running entirely in fast memory. The page-hotness
baseline needs several 5-second periods before it moves anything, hence the
long run.
"""
from hmtier.simengine.machine import reference_hw
from hmtier.simengine.training import bucket_workloads, compare_policies
from hmtier.trace import SynthParams, generate_synthetic

FRACTIONS = [0.1, 0.2, 0.4, 0.6, 1.0]
POLICIES = ["fast-only", "sentinel", "ial", "slow-only"]


def main():
    trace = generate_synthetic(SynthParams(), 0, 2)
    peak = bucket_workloads(trace)[0].report.peak_memory_bytes
    sizes = [int(f * peak) for f in FRACTIONS]
    rows = compare_policies(trace, reference_hw(), sizes, POLICIES, 1200, fractions=FRACTIONS)
    table = {(r.fraction, r.result.policy): r.normalized for r in rows}
    print("fast size  " + "".join(f"{p:>11}" for p in POLICIES))
    for f in FRACTIONS:
        print(f"{f:8.0%}   " + "".join(f"{table[f, p]:11.3f}" for p in POLICIES))


if __name__ == "__main__":
    main()
