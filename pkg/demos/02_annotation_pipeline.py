"""Easy, hard and adversarial splits from simulated annotators.

Stage 1 shuffles every expression and asks five bag-of-words annotators to
ground it. When most of them miss, word order carried the meaning and the
instance is hard. Stage 2 rewrites each hard expression so it names the
box the annotators confused most, reusing the same content words. Stage 3
keeps a rewrite only if a full-parse panel agrees on it.
"""

from collections import Counter

from reflab.diagnostics import AnnotatorPanel, annotate, diagnose, shuffle_tokens
from reflab.worldgen import generate_instances

data = generate_instances(seed=11, n=3000, split="test")
easy, hard, adv, votes, stats = diagnose(data, seed=11)

print(f"{stats.n_input} instances: {stats.n_easy} easy, {stats.n_hard} hard "
      f"(hard fraction {stats.hard_fraction:.3f})")
print(f"adversarial rewrites kept: {stats.n_adversarial}; dropped without a rewrite: "
      f"{stats.n_dropped_no_rewrite}; rejected by validators: {stats.n_rejected_stage3}")
print("forms among hard instances:", dict(Counter(i.expr.form for i in hard)))

inst = hard[0]
vote = next(v for v in votes if v.instance_id == inst.instance_id)
print(f"\nhard example {inst.instance_id}: '{' '.join(inst.expr.tokens)}' (gold box {inst.gold_box})")
print(f"  stage-1 annotators chose {vote.choices}; confusion counts {vote.confusion_counts}")
shuffled = shuffle_tokens(inst.expr, seed=1)
print(f"  a shuffled reading: '{' '.join(shuffled.tokens)}'")

by_id = {i.instance_id: i for i in hard}
for a in adv[:3]:
    o = by_id[a.instance_id]
    print(f"\n  original    '{' '.join(o.expr.tokens)}' -> box {o.gold_box}")
    print(f"  adversarial '{' '.join(a.expr.tokens)}' -> box {a.gold_box}")

panel = AnnotatorPanel("full_parse", noise_rate=0.03, seed=2)
rec = [annotate(panel, i.scene, i.expr, i.instance_id) for i in data[:2000]]
acc = sum(sum(r.correct) for r in rec) / sum(len(r.correct) for r in rec)
print(f"\nfull-parse annotator accuracy on original expressions: {acc:.3f}")
