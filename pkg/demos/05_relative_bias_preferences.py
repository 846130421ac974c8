"""
What does the relative bias learn?
==================================

After training a T5-bias model, each head's table can be turned into a
distribution over relative distances d = j - i via a softmax. Decoder heads
only ever see d <= 0, so their exports omit positive distances.
"""

import os
import tempfile

import numpy as np

from scanformer import scan
from scanformer.attention import read_bias_preferences
from scanformer.evaluation import export_bias
from scanformer.model import ModelConfig, Seq2SeqModel
from scanformer.training import TrainConfig, fit, split_vocabs

# a short training run on short commands is enough for the tables to move
data = [ex for ex in scan.full_dataset() if len(ex.actions) <= 8]
rng = np.random.default_rng(0)
split = scan.Split("short", [data[i] for i in sorted(rng.choice(len(data), 256, replace=False))], [])
sv, tv = split_vocabs(split)
model = Seq2SeqModel(ModelConfig(variant="sag_t5", n_layers=2, n_heads=4, d_model=32, d_ffn=64, span=3,
                                 src_vocab_size=len(sv), tgt_vocab_size=len(tv)))
run_dir = tempfile.mkdtemp(prefix="bias-")
fit(model, split, TrainConfig(epochs=20, batch_size=32, lr=3e-3, checkpoint_every=0), vocabs=(sv, tv), run_dir=run_dir)

for path in export_bias(os.path.join(run_dir, "final.npz"), os.path.join(run_dir, "bias")):
    distances, probs = read_bias_preferences(path)
    print(os.path.basename(path))
    print("   d:", " ".join(f"{d:5d}" for d in distances))
    for h, row in enumerate(probs):
        print(f"  h{h}:", " ".join(f"{p:5.2f}" for p in row))
