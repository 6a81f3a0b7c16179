"""Check how small fast memory can get.

Fast memory must at least hold the reserved region for short-lived objects
plus the largest long-lived object; below that the run is flagged.
"""
from hmtier.policy.sentinel import check_lower_bound
from hmtier.simengine.machine import reference_hw
from hmtier.simengine.training import bucket_workloads, run_training
from hmtier.trace import PAGE_SIZE, SynthParams, generate_synthetic


def main():
    trace = generate_synthetic(SynthParams(), 0, 2)
    wls = bucket_workloads(trace)
    lb = check_lower_bound(wls[0], 0)
    print(f"reserved region {lb.reserved_bytes} B + largest long-lived {lb.largest_long_lived_bytes} B "
          f"= bound {lb.bound_bytes} B")
    for label, size in [("at bound", lb.bound_bytes), ("one page below", lb.bound_bytes - PAGE_SIZE),
                        ("half the bound", lb.bound_bytes // 2)]:
        res = run_training(trace, "sentinel", reference_hw(size), 60, workloads=wls)
        print(f"{label:>15}: {res.lower_bound.status.name:12s} {res.steady_throughput:6.2f} steps/s")


if __name__ == "__main__":
    main()
