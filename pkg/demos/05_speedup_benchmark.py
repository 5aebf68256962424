"""Walltime benchmark: vanilla vs chain vs tree on matched prompts.

Reports the speedup ratio, both acceptance-length variants, and the
acceptance-rate table. Speedup is bounded above by tau (each verification
round costs at least one target forward plus the draft work), so tau is
the number to watch.
"""

from demo_common import trained_pair
from specdec import TreeTopology, compute_alpha_n, make_corpus
from specdec.bench import format_table, speedup_benchmark

target, head, _ = trained_pair()
held_out = make_corpus(seed=99, size_tokens=6000)
prompts = [list(s[:16]) for s in held_out.sequences[:4]]

print("benchmarking (2 warmups + 3 timed repetitions per prompt per mode)...")
report = speedup_benchmark(
    target, head, prompts,
    max_new_tokens=96,
    temperature=0.0,
    gamma=4,
    topology=TreeTopology([4, 2, 1], budget=10),
    repetitions=3,
    seed=0,
)
report.alphas = {
    f"{n}-alpha": compute_alpha_n(target, head, held_out, n, temperature=0.0,
                                  trials=120, seed=7).alpha
    for n in range(5)
}
print()
print(format_table(report))

chain = next(r for r in report.rows if r.mode == "chain")
tree = next(r for r in report.rows if r.mode == "tree")
print(f"\ntree tau gain over chain: +{tree.tau_with_bonus - chain.tau_with_bonus:.2f}")
for row in (chain, tree):
    assert row.speedup <= row.tau_with_bonus + 1e-9, "speedup cannot exceed tau"
print("speedup <= tau bound holds for both speculative modes.")
