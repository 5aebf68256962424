"""Anatomy of a draft tree: topology, attention mask, one-pass verification.

A depth-m tree costs exactly m draft forwards no matter how many nodes it
holds, and the whole tree is scored by ONE target forward under a mask that
lets each node see only the prefix and its own ancestor chain.
"""

import numpy as np

from demo_common import trained_pair
from specdec import (
    DraftState,
    TreeTopology,
    build_tree_draft,
    causal_mask,
    decode_tokens,
    encode_text,
    forward,
    linearize_tree,
    no_grad,
    tree_attention_mask,
)

target, head, _ = trained_pair()
prompt = encode_text("the crow ")

with no_grad():
    feats, logits = forward(target, prompt, list(range(len(prompt))),
                            causal_mask(0, len(prompt)))
pending = int(np.argmax(logits.data[-1]))
state = DraftState(feats.data.copy(), prompt + [pending])

topology = TreeTopology([4, 2, 1], budget=10)
rng = np.random.default_rng(0)
tree = build_tree_draft(state, head, topology, temperature=1.0, rng=rng)

print(f"topology branching {topology.branching}, budget {topology.budget}")
print(f"built {len(tree.nodes)} nodes in {tree.num_forwards} draft forwards\n")
for node in tree.nodes:
    indent = "  " * (node.depth - 1)
    parent = "root" if node.parent is None else f"node {node.parent}"
    print(f"{indent}node {node.node_id}: {decode_tokens([node.token])!r} "
          f"q={node.draft_prob:.3f} depth={node.depth} <- {parent}")

tokens, positions, order = linearize_tree(tree)
mask = tree_attention_mask(tree, prefix_len=4)
print("\nlinearized positions (siblings share one):", positions)
print("tree attention mask over 4 prefix slots + 10 nodes:")
for i, row in enumerate(mask.astype(int)):
    print(f"  node {order[i]:2d}: {''.join(str(b) for b in row)}")
print("\neach row's attention count = prefix + depth:",
      [int(mask[i].sum()) for i in range(len(tree.nodes))])
