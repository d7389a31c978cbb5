"""A small flag ablation in the attr/loc/obj/soft/hard/dist naming.

Short runs (600 iterations, one seed) on a small dataset, so absolute
numbers are noisy; the point is the table layout and the grid syntax.

    python3 demos/ablation_table.py
"""

import tempfile
from pathlib import Path

from kprn import scene as sc
from kprn import synthgen as sg
from kprn.trainkit import TrainConfig, expand_grid, format_table, run_ablation
from kprn.wordvec import load_embeddings

out = Path(tempfile.mkdtemp(prefix="kprn-ablation-"))
sg.generate_dataset(sg.SynthConfig(train_scenes=100, val_scenes=40, seed=1), out)
train = sc.read_dataset(out / "train.jsonl")
val = sc.read_dataset(out / "val.jsonl")
table = load_embeddings(out / "embeddings.txt")

grid = expand_grid([
    "obj=off,on",
    "mode=hard threshold=0.1,0.3",
])
base = TrainConfig(iters=600, eval_every=0)
rows = run_ablation(train, val, table, base, grid)
print(format_table(rows), end="")
