"""Dataset population script: writes seeded synthetic homography pairs in the dataset layout."""

import argparse
import sys

from config import MatchConfig
from scalematch.dataset import write_pair
from scalematch.errors import MatchError
from scalematch.metrics import scale_ratio
from scalematch.synthetic import SyntheticPairSpec, generate_pair


def populate(root: str, count: int, seed: int, config: MatchConfig = None) -> int:
    """Write ``count`` pairs with seeds seed, seed+1, ...; returns the number written."""
    config = config or MatchConfig()
    print(f"Creating {count} synthetic pairs in {root}...")
    written = 0
    for k in range(count):
        spec = SyntheticPairSpec.from_config(config, seed=seed + k)
        try:
            pair, geometry = generate_pair(spec)
        except MatchError as e:
            print(f"⚠️ Skipped seed {seed + k}: {e}")
            continue
        pair_dir = write_pair(root, pair, geometry)
        written += 1
        print(f"  {pair_dir.name}: scale ratio {scale_ratio(geometry.homography, pair.size_a):.2f}")
    print(f"✅ Wrote {written}/{count} pairs")
    return written


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True)
    parser.add_argument("--pairs", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config")
    args = parser.parse_args()
    try:
        populate(args.out, args.pairs, args.seed, MatchConfig.from_file(args.config))
    except Exception as e:
        print(f"❌ Error populating dataset: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
