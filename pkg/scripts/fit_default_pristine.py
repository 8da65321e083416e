"""Rebuild the pristine NIQE model shipped in qudec/resources.

Fits on 25 deterministic 288x288 crops of the photographs bundled with
scikit-image (9 non-overlapping 96x96 blocks per crop).
"""

import argparse
from pathlib import Path

from qudec.data import sample_clean_images
from qudec.niqe import fit_pristine_model

SOURCES = ("astronaut", "coffee", "chelsea", "rocket", "camera", "coins",
           "brick", "grass", "gravel", "moon")
DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "qudec" / "resources" / "pristine_niqe.json"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=DEFAULT_OUT)
    parser.add_argument("--seed", type=int, default=2024)
    args = parser.parse_args()
    images = sample_clean_images(25, size=288, seed=args.seed, sources=SOURCES)
    model = fit_pristine_model(images, descriptor=f"skimage.data photographs {','.join(SOURCES)}, "
                                                  f"25 crops of 288x288, seed {args.seed}")
    model.save(args.out)
    print(f"wrote {args.out} (d={model.feature_dim}): {model.descriptor}")


if __name__ == "__main__":
    main()
