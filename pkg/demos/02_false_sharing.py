"""Compare page-level hotness before and after reorganizing objects.

A stock first-fit allocator mixes hot and cold objects on one page, so a
page-granular migrator sees the wrong access counts. Grouping by liveness
pattern and access bucket removes every flagged page.
"""
from hmtier.allocator import naive_allocate, reorganize
from hmtier.profiler import false_sharing_report, profile_step
from hmtier.trace import SynthParams, generate_synthetic


def summarize(name, fs):
    print(f"{name}: {len(fs.flagged_pages)} flagged pages")
    for bucket in fs.object_bytes:
        print(f"  {bucket:>6}: objects {fs.object_bytes[bucket]:10d} B   pages {fs.page_bytes.get(bucket, 0):10d} B")


def main():
    report = profile_step(generate_synthetic(SynthParams(), 0, 1), 0)
    naive, _ = naive_allocate(report.object_profiles)
    summarize("first-fit allocator", false_sharing_report(report, naive))
    summarize("grouped and packed", false_sharing_report(report, reorganize(report.object_profiles)))


if __name__ == "__main__":
    main()
