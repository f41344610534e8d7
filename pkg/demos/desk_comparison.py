"""Desk-scale comparison of STL and DOS on imbalanced synthetic digits.

Runs the shared desk setup (ten 28x28 synthetic classes, four reduced to
10%, the C6-C16-F400-F120 network, three DOS rounds) for the given seeds and
prints minority/majority F1, the in-class variance per round, and the
per-round time relative to one STL epoch.

    python demos/desk_comparison.py 0 1 2
"""
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
import desk  # noqa: E402

seeds = [int(a) for a in sys.argv[1:]] or [0]
for seed in seeds:
    r = desk.run(seed)
    print(f"seed {seed}: minority classes {r.minority}, {r.seconds:.0f}s")
    for name, rep in (("STL", r.stl_report), ("DOS", r.dos_report)):
        mjr = float(np.mean(rep.f1[rep.group_mask(False)]))
        print(f"  {name} minority F1 {desk.minority_f1(rep):.3f}  majority F1 {mjr:.3f}")
    print("  in-class variance by round", np.round(desk.round_variances(r), 2).tolist())
    stl = np.mean([e["seconds"] for e in r.stl_epochs])
    dos = np.mean([e["seconds"] for e in r.dos_rounds if e["kind"] == "dos_round"])
    print(f"  DOS round / STL epoch = {dos / stl:.2f}")
