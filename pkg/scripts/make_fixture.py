"""Write a synthetic multi-task fixture (embeddings, snapshots, Fisher diagonals, predictions, config).

    python3 scripts/make_fixture.py out/fixture --tasks 9 --target 3 --seed 0
"""

import argparse
from pathlib import Path

from gwmerge.merger import METHODS
from gwmerge.synthetic import FixtureSpec, write_fixture


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("directory", type=Path)
    ap.add_argument("--tasks", type=int, default=FixtureSpec.n_tasks)
    ap.add_argument("--points", type=int, default=FixtureSpec.n_points)
    ap.add_argument("--dim", type=int, default=FixtureSpec.dim)
    ap.add_argument("--hidden", type=int, default=FixtureSpec.hidden)
    ap.add_argument("--labels", type=int, default=FixtureSpec.n_labels)
    ap.add_argument("--eval-samples", type=int, default=FixtureSpec.n_eval)
    ap.add_argument("--target", type=int, default=FixtureSpec.target_clusters)
    ap.add_argument("--seed", type=int, default=FixtureSpec.seed)
    ap.add_argument("--planner", choices=("greedy", "exact"), default="exact")
    ap.add_argument("--merge-method", choices=METHODS, default="average")
    a = ap.parse_args()
    spec = FixtureSpec(a.tasks, a.points, a.dim, a.hidden, a.labels, a.eval_samples, a.target, a.seed)
    print(write_fixture(a.directory, spec, a.planner, a.merge_method))


if __name__ == "__main__":
    main()
