"""Export stage-3 ERF heat maps with and without swapping as text matrices.

The output files can be rendered with any plotting tool, e.g.
``plt.imshow(np.loadtxt("erf_swap.txt") ** 0.25)``.
"""

import argparse

import numpy as np

from foldscan.model import ModelConfig, build, erf_map


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--image-size", type=int, default=128)
    ap.add_argument("--probes", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cut", choices=("stage3_mamba", "full"), default="stage3_mamba")
    ap.add_argument("--prefix", default="erf")
    args = ap.parse_args()

    probes = np.random.default_rng(args.seed).standard_normal(
        (args.probes, 3, args.image_size, args.image_size))
    for swap in (True, False):
        cfg = ModelConfig(image_size=args.image_size, depths=(1, 1, 4, 2), swap=swap, seed=args.seed)
        heat = erf_map(build(cfg), probes, cut=args.cut)
        path = f"{args.prefix}_{'swap' if swap else 'noswap'}.txt"
        np.savetxt(path, heat, fmt="%.10e")
        rows, cols = np.nonzero(heat)
        print(f"{path}: nonzero pixels {len(rows)} / {heat.size}, last nonzero row {rows.max()}")


if __name__ == "__main__":
    main()
