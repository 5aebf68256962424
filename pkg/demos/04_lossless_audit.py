"""Statistical audit: the speculative output law equals the target's.

Runs many single speculative rounds from a fixed prefix, compares the
empirical first-token law against the target's true conditional (total
variation distance + chi-square), then repeats with a deliberately broken
acceptance rule to show the audit has the power to catch one.
"""

from demo_common import trained_pair
from specdec import encode_text
from specdec.bench import lossless_audit, mutated_acceptance_probability

target, head, _ = trained_pair()
prompt = encode_text("the otter ")
TRIALS = 20_000

print(f"auditing {TRIALS} speculative rounds at temperature 1...")
report = lossless_audit(target, head, prompt, trials=TRIALS, temperature=1.0,
                        gamma=2, seed=0)
for w in report.windows:
    bound = report.tvd_bound(w.trials)
    print(f"  prefix_len={w.prefix_len}: TVD={w.tvd:.4f} (bound {bound:.4f})  "
          f"chi2 p={w.p_value:.3f}")
print(f"honest acceptance rule: {'PASS' if report.passed else 'FAIL'}")

print("\nsame audit with a corrupted acceptance rule (negative control)...")
broken = lossless_audit(target, head, prompt, trials=TRIALS, temperature=1.0,
                        gamma=2, seed=0, windows=1,
                        acceptance_fn=mutated_acceptance_probability)
w = broken.windows[0]
print(f"  TVD={w.tvd:.4f} (bound {broken.tvd_bound(w.trials):.4f})  chi2 p={w.p_value:.2e}")
print(f"broken acceptance rule: {'PASS' if broken.passed else 'FAIL'}")
assert report.passed and not broken.passed
