import json
import logging
import os
import sys

# Add the project root to sys.path so we can import the package
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import argparse
from pathlib import Path

from nbfa.core.chain import ChainConfig, ChainTrace, run_chain
from nbfa.core.distributions import RngStream
from nbfa.core.evaluation import diagnostics, op_count_ratio, plot_traces, write_diagnostics_csv
from nbfa.core.model import Hyperparams
from nbfa.core.synthetic import nbfa_corpus


def compare_samplers(
    V: int, J: int, K: int, tokens: int, iters: int, K_init: int, seed: int, out: Path | None
) -> None:
    corpus = nbfa_corpus(V, J, K, tokens, RngStream(seed, 99))
    traces: dict[str, ChainTrace] = {}
    for sampler in ("cp", "blocked", "collapsed"):
        config = ChainConfig(
            model="nbfa",
            sampler=sampler,
            iterations=iters,
            burn_in=iters // 2,
            collect_every=5,
            K_init=K_init,
            seed=seed,
            hyper=Hyperparams(),
        )
        traces[sampler] = run_chain(config, corpus.matrix).trace

    report = {label: diagnostics(trace).to_dict() for label, trace in traces.items()}
    report["cp_vs_blocked_op_ratio"] = {"ratio": op_count_ratio(traces["cp"], traces["blocked"])}
    print(json.dumps(report, indent=2))

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_diagnostics_csv(traces, out / "diagnostics.csv")
        plot_traces(traces, out / "k_trace.png")
        print(f"Wrote diagnostics to {out}", file=sys.stderr)


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Run the three NBFA samplers side by side")
    parser.add_argument("--V", type=int, default=50)
    parser.add_argument("--J", type=int, default=40)
    parser.add_argument("--K", type=int, default=5, help="Generating number of factors")
    parser.add_argument("--tokens", type=int, default=100, help="Mean tokens per sample")
    parser.add_argument("--iters", type=int, default=500)
    parser.add_argument("--K-init", dest="K_init", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, help="Directory for the CSV and plot")
    args = parser.parse_args()

    # Configure logging to stderr
    logging.basicConfig(level=logging.INFO, stream=sys.stderr)

    compare_samplers(
        args.V, args.J, args.K, args.tokens, args.iters, args.K_init, args.seed, args.out
    )
