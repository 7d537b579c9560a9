"""Compare the numba kernels against the pure-numpy fallback.

Each backend runs in its own interpreter because the choice is made at import
time from SPARSEDECODE_BACKEND.  A warm-up call is issued first so numba's JIT
cost is not charged to the timed runs.

    python benchmarks/bench_backends.py --n 20000 --budget 256
"""

import argparse
import json
import os
import subprocess
import sys
import textwrap

WORKER = textwrap.dedent("""
    import json, sys, time
    from sparsedecode import BACKEND, DecodeConfig, ModelConfig, default_schedule, generate, synth_weights
    from sparsedecode.harness import bench_kernels

    args = json.loads(sys.argv[1])
    bench_kernels(n=256, budget=16, n_layers=4, reselect=3, iters=1)  # warm-up / JIT
    report = bench_kernels(n=args["n"], budget=args["budget"], n_layers=args["layers"],
                           reselect=args["reselect"], iters=args["iters"])

    cfg = ModelConfig(n_layers=8, n_heads=4, n_kv_heads=2, head_dim=16, d_ff=128, vocab_size=128)
    w = synth_weights(cfg, 0)
    prompt = [i % 128 for i in range(1, args["prompt"] + 1)]
    dcfg = DecodeConfig(mode="tidal", budget=args["budget"], schedule=default_schedule(8, 3))
    generate(prompt[:8], 2, w, dcfg)
    t0 = time.perf_counter()
    res = generate(prompt, args["steps"], w, dcfg)
    gen_s = time.perf_counter() - t0

    print(json.dumps({"backend": BACKEND,
                      "kernels": {k: v["mean_seconds"] for k, v in report["kernels"].items()},
                      "generate_seconds": gen_s, "tokens": res.tokens}))
""")


def run(backend, params):
    env = dict(os.environ, SPARSEDECODE_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", WORKER, json.dumps(params)],
                         env=env, capture_output=True, text=True)
    if out.returncode:
        sys.exit(f"{backend} worker failed:\n{out.stderr}")
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20000, help="cache length for kernel timings")
    ap.add_argument("--budget", type=int, default=256)
    ap.add_argument("--layers", type=int, default=32)
    ap.add_argument("--reselect", type=int, default=13)
    ap.add_argument("--iters", type=int, default=5)
    ap.add_argument("--prompt", type=int, default=256)
    ap.add_argument("--steps", type=int, default=32)
    params = vars(ap.parse_args())

    results = {b: run(b, params) for b in ("numba", "numpy")}
    if results["numba"]["backend"] != "numba":
        print("numba unavailable; both runs used the numpy fallback")

    print(f"{'kernel':<12}{'numba (ms)':>14}{'numpy (ms)':>14}{'speedup':>10}")
    for name in results["numpy"]["kernels"]:
        a = results["numba"]["kernels"][name] * 1e3
        b = results["numpy"]["kernels"][name] * 1e3
        print(f"{name:<12}{a:>14.3f}{b:>14.3f}{b / a:>9.2f}x")
    a = results["numba"]["generate_seconds"]
    b = results["numpy"]["generate_seconds"]
    print(f"{'generate':<12}{a * 1e3:>14.1f}{b * 1e3:>14.1f}{b / a:>9.2f}x")
    same = results["numba"]["tokens"] == results["numpy"]["tokens"]
    print(f"emitted tokens identical across backends: {same}")


if __name__ == "__main__":
    main()
