"""Time the numba kernels against their numpy twins, plus one encoder pass.

    python benchmarks/bench_kernels.py [--repeat 50] [--batch 256]

Each kernel is called once before timing so numba compilation (or the
on-disk cache load) is excluded. Prints the best-of-N time per call.
"""
import argparse
import time

import numpy as np

from fairacq.kernels import numba_impl, numpy_impl


def best_of(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(batch, rng):
    d, L, H = 102, 14, 32
    colmask = rng.random((batch, d)) < 0.3
    values = rng.standard_normal((batch, d))
    M = rng.standard_normal((batch, L, H))
    mask = rng.random((batch, L)) < 0.8
    mask[:, 0] = True
    q = rng.standard_normal((batch, H))
    a, _ = numpy_impl.attend_forward(M, mask, q)
    dr = rng.standard_normal((batch, H))
    z = rng.standard_normal((batch, 4 * H))
    c = rng.standard_normal((batch, H))
    gates, c1, tc, _ = numpy_impl.lstm_forward(z, c)
    idx = rng.integers(0, d + 1, size=batch * L)
    rows = rng.standard_normal((batch * L, 64))
    qv = rng.standard_normal((batch, 14))
    legal = rng.random((batch, 14)) < 0.5
    legal[:, -1] = True
    return {
        "pack_tokens": (values, colmask),
        "attend_forward": (M, mask, q),
        "attend_backward": (M, a, q, dr),
        "lstm_forward": (z, c),
        "lstm_backward": (dr, dr, gates, c, tc),
        "scatter_add_rows": (d + 1, idx, rows),
        "masked_argmax": (qv, legal),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--batch", type=int, default=256)
    args = ap.parse_args()
    if numba_impl is None:
        print("numba backend unavailable (FAIRACQ_DISABLE_NUMBA set?); nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, kargs in cases(args.batch, rng).items():
        t_np = best_of(getattr(numpy_impl, name), kargs, args.repeat)
        t_nb = best_of(getattr(numba_impl, name), kargs, args.repeat)
        print(f"{name:<18}{t_np * 1e6:12.1f}{t_nb * 1e6:12.1f}{t_np / t_nb:10.2f}")

    from fairacq.data import make_synthetic
    from fairacq.env import tokens_for
    from fairacq.networks import ModelBundle
    ds = make_synthetic(2000)
    bundle = ModelBundle(ds.n_features, ds.n_groups)
    ids = rng.integers(0, ds.n_instances, size=args.batch)
    tok = tokens_for(ds, ids, rng.random((args.batch, ds.n_groups)) < 0.5)
    t = best_of(lambda: bundle.label_loss_grads(tok, ds.labels[ids]), (), max(5, args.repeat // 5))
    print(f"label loss + grads, batch {args.batch}: {t * 1e3:.2f} ms")


if __name__ == "__main__":
    main()
