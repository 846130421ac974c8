"""
Four ways to mix a sequence
===========================

Besides plain multi-head self-attention, the model supports a gated
(SAG) variant, a convolutional GLU mixer, a hard fixed span and a learned
T5-style relative bias. This script builds one of each and inspects them.
"""

import numpy as np

from scanformer import autodiff as ad
from scanformer.attention import fixed_span_bias, t5_bias
from scanformer.model import ModelConfig, Seq2SeqModel

# the fixed span is an additive mask: 0 inside |i - j| <= s, -inf outside
print(fixed_span_bias(5, 1).data)

# the learned relative bias starts at zero; one table per layer, (2s+1) x heads
cfg = dict(n_layers=2, n_heads=4, d_model=32, d_ffn=64, span=2, dropout=0.0, attention_dropout=0.0)
model = Seq2SeqModel(ModelConfig(variant="sag_t5", **cfg))
table = model.encoder_span.tables[0]
table.data[:, 0] = np.arange(5)  # head 0 now prefers keys to the left of the query
print("encoder layer 0, head 0 bias:\n", t5_bias(model.encoder_span, 0, 5, causal=False).data[0])

# gates: sigma(beta) with beta starting at -1, so every mixer starts out damped
print("initial gates:", [round(g.value().item(), 4) for g in model.gates()])

# with unit gates and a zero table the model computes exactly the vanilla Transformer
vanilla = Seq2SeqModel(ModelConfig(variant="vanilla", **cfg))
t5 = Seq2SeqModel(ModelConfig(variant="sag_t5", **cfg))
t5.set_gate_override(1.0)
src = np.array([[3, 4, 5, 2]])
tgt = np.array([[1, 6, 7]])
print("max |t5 - vanilla|:", np.abs(t5(src, tgt).data - vanilla(src, tgt).data).max())

# parameter overhead of each variant relative to vanilla
base = vanilla.num_parameters()
for variant in ("sag", "sag_conv", "sag_fixed_span", "sag_t5"):
    extra = Seq2SeqModel(ModelConfig(variant=variant, **cfg)).num_parameters() - base
    print(f"{variant:15} {extra:+d} parameters")
