"""Sweep the migration interval with fast memory at 20% of peak.

Short intervals leave too little compute to hide each prefetch (case 3, the
transfer is still running when the data is needed); long intervals must hold
more data in fast memory at once (case 2, no room). The best interval sits in
between.
"""
from hmtier.simengine.machine import reference_hw
from hmtier.simengine.training import bucket_workloads, sweep_mi
from hmtier.trace import SynthParams, generate_synthetic


def main():
    trace = generate_synthetic(SynthParams(), 0, 2)
    peak = bucket_workloads(trace)[0].report.peak_memory_bytes
    rows, warnings = sweep_mi(trace, reference_hw(int(0.2 * peak)), 24)
    print(" MI  steps/s  case1 case2 case3")
    for r in rows:
        c1, c2, c3 = r.result.steady_cases()
        mark = "  <- best" if r.sweet_spot else ""
        print(f"{r.mi:3d} {r.result.steady_throughput:8.2f} {c1:6d} {c2:5d} {c3:5d}{mark}")
    if warnings:
        print("warnings:", ", ".join(warnings))


if __name__ == "__main__":
    main()
