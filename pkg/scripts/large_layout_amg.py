"""Direct abstract-game construction on the large layout, with timing per agent count."""
import argparse
import time

from amarl import gfc

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--agents", type=int, nargs="+", default=[1, 2, 3])
    args = ap.parse_args()
    base = gfc.GridSpec.load("gfc-paper-like")
    for n in args.agents:
        spec = base.with_agents(n)
        t0 = time.perf_counter()
        safe, opt = gfc.direct_amg(spec)
        dt = time.perf_counter() - t0
        print(f"{n} agent(s): {spec.state_count()} concrete states, {safe.n_states} abstract states, "
              f"{safe.game.n_rows} joint options, {dt:.1f}s")
