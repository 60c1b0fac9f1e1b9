"""Compare the numba and pure-numpy kernel paths on detector-sized inputs.

    python benchmarks/bench_kernels.py [--repeat N]

Both implementations are imported directly, so the ``SIFDAL_PURE_NUMPY``
switch is irrelevant here.
"""

import argparse
import timeit

import numpy as np

from sifdal.kernels import _numba_impl as nb_impl
from sifdal.kernels import _numpy_impl as np_impl

# (batch, c_in, hw, c_out, stride): the stem and stages at width 16, batch 16
CONV_CASES = [
    (16, 3, 64, 16, 2),
    (16, 16, 32, 32, 2),
    (16, 32, 16, 32, 2),
    (16, 32, 8, 32, 2),
    (16, 32, 4, 32, 2),
]


def bench(fn, repeat):
    fn()  # warm-up / compile
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'shape':<22}{'numba ms':>10}{'numpy ms':>10}{'ratio':>8}")
    for n, c, hw, o, s in CONV_CASES:
        x = rng.normal(size=(n, c, hw, hw))
        w = rng.normal(size=(o, c, 3, 3))
        g = rng.normal(size=(n, o, (hw - 1) // s + 1, (hw - 1) // s + 1))
        cases = {
            "conv3x3_forward": lambda impl: impl.conv3x3_forward(x, w, s),
            "conv3x3_backward_input": lambda impl: impl.conv3x3_backward_input(g, w, s, hw, hw),
            "conv3x3_backward_weight": lambda impl: impl.conv3x3_backward_weight(g, x, s),
        }
        for name, call in cases.items():
            t_nb = bench(lambda: call(nb_impl), args.repeat) * 1e3
            t_np = bench(lambda: call(np_impl), args.repeat) * 1e3
            print(f"{name:<28}{str((n, c, hw, o)):<22}{t_nb:>10.2f}{t_np:>10.2f}{t_np / t_nb:>8.2f}")
    boxes = rng.uniform(0, 64, size=(400, 2))
    boxes = np.concatenate([boxes, boxes + rng.uniform(2, 20, size=(400, 2))], axis=1)
    for name, call in {"iou_matrix": lambda impl: impl.iou_matrix(boxes, boxes),
                       "greedy_nms": lambda impl: impl.greedy_nms(boxes, 0.5)}.items():
        t_nb = bench(lambda: call(nb_impl), args.repeat) * 1e3
        t_np = bench(lambda: call(np_impl), args.repeat) * 1e3
        print(f"{name:<28}{'(400, 4)':<22}{t_nb:>10.2f}{t_np:>10.2f}{t_np / t_nb:>8.2f}")


if __name__ == "__main__":
    main()
