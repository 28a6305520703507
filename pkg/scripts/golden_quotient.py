"""Quotient of the small golden game and its cross-model bisimulation classes."""
import argparse
import json

from amarl.harness import repro_fig3

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="out/fig3")
    data = repro_fig3(ap.parse_args().out)
    print(json.dumps(data, indent=1))
