"""Regenerate tests/golden/pipeline_golden.json from the default synthetic fixture.

    python3 scripts/make_golden.py [--out tests/golden/pipeline_golden.json]
"""

import argparse
import json
import tempfile
from pathlib import Path

from gwmerge.config import load_config
from gwmerge.pipeline import run_digest, run_pipeline
from gwmerge.synthetic import FixtureSpec, write_fixture

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=ROOT / "tests" / "golden" / "pipeline_golden.json")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        cfg = load_config(write_fixture(tmp, FixtureSpec()))
        run_pipeline(cfg)
        digest = run_digest(cfg.output_dir)
    digest["fixture"] = {k: getattr(FixtureSpec(), k) for k in FixtureSpec.__dataclass_fields__}
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(digest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.out}: plan {digest['plan']}, ratio {digest['storage_reduction_ratio']}")


if __name__ == "__main__":
    main()
