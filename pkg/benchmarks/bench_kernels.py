"""Time the numba and numpy kernel backends on packed reward groups.

    python benchmarks/bench_kernels.py --groups 100 10000 --group-size 8

Each row reports the best of ``--repeat`` timings per backend and the
largest absolute difference between the two outputs. The first numba call
is made before timing so compilation is excluded.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from vidagent import kernels


def make_batch(n_groups: int, group_size: int, seed: int):
    rng = np.random.default_rng(seed)
    rewards = rng.choice([-0.05, 0.03, 0.43, 1.0, 1.2, 1.5], size=n_groups * group_size).astype(np.float64)
    rewards += rng.normal(0, 0.01, size=rewards.size)
    offsets = np.arange(0, rewards.size + 1, group_size, dtype=np.int64)
    ratios = rng.lognormal(0, 0.2, size=rewards.size)
    logp_theta = rng.normal(-2, 1, size=rewards.size * 16)
    logp_ref = logp_theta + rng.normal(0, 0.1, size=logp_theta.size)
    return rewards, offsets, ratios, logp_theta, logp_ref


def best_of(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(n_groups: int, group_size: int, repeat: int, seed: int) -> list[dict]:
    rewards, offsets, ratios, lt, lr = make_batch(n_groups, group_size, seed)
    rows = []
    outputs = {}
    for name in kernels.available():
        k = kernels.get(name)
        adv, _, _ = k.group_advantages(rewards, offsets, 1e-6)  # warm-up / compile
        surr = k.clipped_surrogate(ratios, adv, offsets, 0.2)
        kl = k.kl_k3(lt, lr)
        outputs[name] = (adv, surr, kl)
        rows.append({
            "backend": name,
            "groups": n_groups,
            "advantages_ms": 1e3 * best_of(lambda: k.group_advantages(rewards, offsets, 1e-6), repeat),
            "surrogate_ms": 1e3 * best_of(lambda: k.clipped_surrogate(ratios, adv, offsets, 0.2), repeat),
            "kl_ms": 1e3 * best_of(lambda: k.kl_k3(lt, lr), repeat),
        })
    if len(outputs) == 2:
        (a1, s1, k1), (a2, s2, k2) = outputs.values()
        diff = max(np.max(np.abs(a1 - a2)), np.max(np.abs(s1 - s2)), abs(k1 - k2))
        for r in rows:
            r["max_abs_diff"] = float(diff)
    return rows


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--groups", type=int, nargs="+", default=[32, 1_000, 100_000])
    ap.add_argument("--group-size", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print(f"{'backend':8} {'groups':>8} {'adv ms':>9} {'surr ms':>9} {'kl ms':>9} {'max diff':>10}")
    for n in args.groups:
        for r in run(n, args.group_size, args.repeat, args.seed):
            diff = f"{r['max_abs_diff']:.1e}" if "max_abs_diff" in r else "-"
            print(f"{r['backend']:8} {r['groups']:>8} {r['advantages_ms']:>9.3f} "
                  f"{r['surrogate_ms']:>9.3f} {r['kl_ms']:>9.3f} {diff:>10}")


if __name__ == "__main__":
    main()
