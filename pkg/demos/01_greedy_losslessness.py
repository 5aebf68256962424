"""Greedy losslessness: speculative decoding emits the exact greedy text.

Chain and tree speculative decoding accept draft tokens only when they
match what the target itself would produce, so at temperature 0 the output
is identical to vanilla greedy decoding, token for token — while using far
fewer target forward passes.
"""

from demo_common import trained_pair
from specdec import Engine, GenerationParams, count_forwards, decode_tokens, default_topology, encode_text

target, head, _ = trained_pair()
engine = Engine(target, head)
prompt = encode_text("the fox ")

runs = {}
for mode in ("vanilla", "chain", "tree"):
    params = GenerationParams(
        mode=mode,
        temperature=0.0,
        max_new_tokens=96,
        gamma=4,
        tree=default_topology() if mode == "tree" else None,
        seed=0,
    )
    tokens, log = engine.generate(prompt, params)
    runs[mode] = tokens
    target_fw, draft_fw = count_forwards(log)
    print(f"{mode:8s} target_forwards={target_fw:3d} draft_forwards={draft_fw:3d}")
    print(f"         {decode_tokens(tokens)!r}")

assert runs["chain"] == runs["vanilla"], "chain output diverged!"
assert runs["tree"] == runs["vanilla"], "tree output diverged!"
print("\nall three modes emitted the identical token sequence.")
