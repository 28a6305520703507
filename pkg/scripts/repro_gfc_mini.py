"""Full pipeline on the two-agent mini layout; writes the result tables to --out."""
import argparse

from amarl.harness import repro_gfc

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--fixture", default="gfc-mini")
    ap.add_argument("--out", default="out/gfc-mini")
    ap.add_argument("--episodes", type=int, default=20_000)
    ap.add_argument("--eval-episodes", type=int, default=10_000)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    summary = repro_gfc(args.fixture, args.out, seeds=seeds, episodes=args.episodes,
                        eval_episodes=args.eval_episodes)
    for mode, data in summary["modes"].items():
        print(f"{mode}: unsafe episode rate {data['unsafe_rate']:.4f}")
