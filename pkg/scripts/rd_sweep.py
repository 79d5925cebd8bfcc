"""Rate-distortion sweep over quantization precision and tiling on the bundled images.

Writes one CSV per run plus a combined summary to --out.
"""
import argparse
import csv
from dataclasses import replace
from pathlib import Path

from ncollage.metrics import BenchConfig, bench
from ncollage.raster import load_image

HERE = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--images", default=str(HERE / "tests" / "data"))
    p.add_argument("--out", default="rd_sweep")
    p.add_argument("--epsilons", default="2,3,4")
    p.add_argument("--blocks", default="0,16", help="0 encodes the whole image as one code")
    p.add_argument("--gd-steps", type=int, default=100)
    p.add_argument("--repeats", type=int, default=1)
    args = p.parse_args()

    images = [(f.name, load_image(f)) for f in sorted(Path(args.images).glob("*.p[gp]m"))]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = BenchConfig(gd_steps=args.gd_steps, repeats=args.repeats)
    summary = []
    for eps in (int(e) for e in args.epsilons.split(",")):
        for block in (int(b) for b in args.blocks.split(",")):
            cfg = replace(base, epsilon=eps, block_size=block or None)
            report = bench(images, ["pifs", "pifs_aug", "collage", "dct"], cfg)
            report.write_csv(out / f"eps{eps}_block{block}.csv")
            for r in report.rows:
                summary.append({"epsilon": eps, "block": block, "image": r.image, "method": r.method,
                                "bpp": r.bpp, "psnr_db": r.psnr_db, "error": r.error})
                print(f"eps={eps} block={block:3d} {r.image:22s} {r.method:9s} "
                      f"{r.bpp:8.4f} bpp {r.psnr_db:7.2f} dB {r.error}")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]))
        w.writeheader()
        w.writerows(summary)


if __name__ == "__main__":
    main()
