"""Scenes, referring expressions and how they resolve.

A scene is a handful of labelled boxes on the unit square. An expression
is rendered from a small parse (subject, optional relation, object) and
must pick out exactly one box. Run with ``python demos/01_scenes_and_expressions.py``.
"""

from reflab.geometry import iou, relation_holds
from reflab.worldgen import NP, Parse, generate_instances, generate_scene, render, resolve_expression

scene = generate_scene(seed=7)
print(f"scene {scene.scene_id}: {len(scene.boxes)} boxes")
for b in scene.boxes:
    print(f"  box {b.id}: {b.size:5s} {b.color:6s} {b.category:7s} at ({b.x:.2f}, {b.y:.2f}) size {b.w:.2f} x {b.h:.2f}")

# the generator guarantees at least one repeated category, so a bare noun is ambiguous
cat = next(b.category for b in scene.boxes if sum(o.category == b.category for o in scene.boxes) > 1)
print(f"\n'the {cat}' resolves to boxes {sorted(resolve_expression(scene, Parse(NP(cat))))}")

a, b = scene.boxes[0], scene.boxes[1]
print(f"\nIoU of box {a.id} and box {b.id}: {iou(a, b):.4f}")
for rel in ("left_of", "right_of", "above", "below"):
    print(f"  box {a.id} {rel:8s} box {b.id}: {relation_holds(rel, a, b)}")

print("\nfive generated instances (each expression denotes its gold box alone):")
for inst in generate_instances(seed=3, n=5):
    e = inst.expr
    print(f"  [{e.form:22s}] {' '.join(e.tokens):45s} -> box {e.gold_box}")
    assert resolve_expression(inst.scene, e.parse) == {e.gold_box}

p = Parse(NP("ball", color="red"), "left_of", True, NP("cup"))
print("\nrendering keeps a part-of-speech tag per token:")
print("  " + " ".join(f"{t}/{g}" for t, g in zip(*render(p))))
