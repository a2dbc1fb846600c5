"""Print the finite-difference gradient check of every layer type and the mini model.

    python3 scripts/gradcheck_report.py [--per-param N]
"""

import argparse
import time

from msesc.gradcheck import check_layers, check_mini_model


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--per-param", type=int, default=6, help="entries checked per parameter tensor (0 = all)")
    args = parser.parse_args()

    start = time.perf_counter()
    for name, err in check_layers().items():
        print(f"{name:18s} {err:.2e}")
    res = check_mini_model(per_param=args.per_param or None)
    print(f"{'mini model':18s} {res.max_error:.2e}  ({res.checked} entries, worst {res.worst_parameter})")
    print(f"elapsed {time.perf_counter() - start:.1f} s")


if __name__ == "__main__":
    main()
