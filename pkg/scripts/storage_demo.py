"""Bundle byte accounting for a hand-written plan over synthetic snapshots.

    python3 scripts/storage_demo.py --tasks 9 --plan "1,2,8;4,6,7"
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from gwmerge.merger import assemble_bundle, write_bundle
from gwmerge.planner import MergePlan
from gwmerge.synthetic import make_snapshots


def parse_plan(text: str, n_tasks: int) -> MergePlan:
    groups = [[int(t) for t in g.split(",")] for g in text.split(";") if g.strip()]
    seen = {t for g in groups for t in g}
    groups += [[t] for t in range(1, n_tasks + 1) if t not in seen]
    return MergePlan(groups, len(groups))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tasks", type=int, default=9)
    ap.add_argument("--plan", default="1,2,8;4,6,7", help="merged groups as '1,2;3,4', rest stay singletons")
    ap.add_argument("--hidden", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--method", choices=("average", "fisher"), default="average",
                    help="methods that need no base snapshot")
    a = ap.parse_args()

    _, snaps = make_snapshots(a.tasks, np.random.default_rng(a.seed), hidden=a.hidden)
    snaps = dict(enumerate(snaps, start=1))
    plan = parse_plan(a.plan, a.tasks)
    bundle = assemble_bundle(plan, snaps, method=a.method)
    pre = sum(s.nbytes("backbone") for s in snaps.values())
    with tempfile.TemporaryDirectory() as tmp:
        out = write_bundle(bundle, tmp)
        files = sorted(Path(out).iterdir())
        on_disk = sum(f.stat().st_size for f in files if f.name.startswith("backbone_"))
    post = bundle.backbone_nbytes()
    for k, c in enumerate(plan.clusters, start=1):
        print(f"cluster {k}: tasks {c}  backbone bytes {4 * sum(v.size for v in bundle.backbones[k].values())}")
    print(f"backbone payload: {pre} -> {post} bytes, ratio {pre / post:.4f}")
    print(f"backbone files on disk (with headers): {on_disk} bytes; heads {bundle.head_nbytes()} bytes")


if __name__ == "__main__":
    main()
