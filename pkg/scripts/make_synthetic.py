"""Write the bundled self-similar test images (PGM, 8-bit)."""
import argparse
from pathlib import Path

from ncollage.raster import save_image
from ncollage.synthetic import selfsimilar_image


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "data"))
    p.add_argument("--seed", type=int, default=7)
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for size in (64, 128):
        path = out / f"selfsimilar{size}.pgm"
        save_image(selfsimilar_image(size, args.seed), path)
        print(path)


if __name__ == "__main__":
    main()
