"""Bag-of-words versus order-aware grounding on the easy and hard splits.

Both models score every box by a dot product between an expression vector
and a box vector. The BOW encoder averages word embeddings, so it cannot
tell 'the cup left of the ball' from 'the ball left of the cup'. The SEQ
encoder adds position embeddings and attention. Takes about a minute.
"""

from dataclasses import replace

from reflab.diagnostics import diagnose
from reflab.harness.evaluate import perturbation_report
from reflab.model import tensorize
from reflab.training import ModelConfig, TrainConfig, accuracy, train
from reflab.worldgen import generate_instances

pool = generate_instances(seed=5, n=3500)
train_set = [replace(i, split="dev" if k < 500 else "train") for k, i in enumerate(pool)]
test = generate_instances(seed=6, n=4000, split="test")
easy, hard, adv, _, stats = diagnose(test, seed=6)
print(f"train {len(train_set) - 500}, dev 500; test {len(test)} -> easy {len(easy)}, hard {len(hard)}, adversarial {len(adv)}")

cfg = TrainConfig(epochs=12)
for encoder in ("bow", "seq"):
    res = train(train_set, regime="ce", model_cfg=ModelConfig(encoder=encoder), train_cfg=cfg, seed=0)
    row = {name: accuracy(res.params, tensorize(split)) for name, split in (("easy", easy), ("hard", hard), ("adv", adv))}
    print(f"\n{encoder}: best epoch {res.best_epoch}; " + ", ".join(f"{k} {v:.3f}" for k, v in row.items()))
    table = perturbation_report(res.params, easy + hard, seed=1)
    for split, r in table.items():
        print(f"  {split:5s} original {r['original']:.3f}  shuffled {r['shuf']:.3f}  nouns+adjectives {r['nj']:.3f}")
