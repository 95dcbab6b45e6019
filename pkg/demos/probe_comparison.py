"""Linear probe of a pretrained encoder against the same network at init.

Uses the checkpoint written by pretrain_and_visualize.py. The probe is a
softmax regression on mean-pooled tokens from each block; the best block
is reported.

    python demos/probe_comparison.py [out_dir]
"""
import sys
from pathlib import Path

from mimlab.evaluation import linear_probe, train_test_split
from mimlab.trainer import build_model, load_checkpoint, load_dataset, state_from_checkpoint

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
ck = load_checkpoint(out / "final.smim")
cfg = ck.config
data = load_dataset(cfg.data)
train, test = train_test_split(data, cfg.eval.test_fraction, cfg.seed)

pretrained, spec = state_from_checkpoint(ck)
fresh = build_model(cfg, spec)

for name, state in (("pretrained", pretrained), ("random init", fresh)):
    r = linear_probe(state, train, test, cfg.eval, cfg.seed)
    layers = " ".join(f"{a:.3f}" for a in r.per_layer)
    print(f"{name:>12}: best {r.accuracy:.3f} (block {r.feature_source}); per block {layers}")
