"""Train one fold on the synthetic set and export attention for a click train.

The CSV has one row per 10 ms frame: attention at each stage next to the
waveform envelope, ready for any plotting tool.

    python3 scripts/attention_demo.py --out runs/attention
"""

import argparse
from pathlib import Path

from msesc import experiments as ex
from msesc.audio import write_wav
from msesc.config import load_run_config, load_synth_spec
from msesc.harness import export_attention, load_manifest, train_fold, write_synth


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, default=Path("configs/desk.ini"))
    parser.add_argument("--synth", type=Path, default=Path("configs/synth4.ini"))
    parser.add_argument("--out", type=Path, default=Path("runs/attention"))
    parser.add_argument("--period", type=float, default=0.5, help="click period of the probe clip in seconds")
    args = parser.parse_args()

    manifest = load_manifest(write_synth(load_synth_spec(args.synth), args.out / "data"))
    result, report = train_fold(manifest, 0, load_run_config(args.config), args.out)
    print(f"fold 0 accuracy {report.mean_accuracy:.3f}")

    probe = ex.click_clips(1, period_s=args.period)[0]
    wav = args.out / "probe.wav"
    write_wav(wav, probe)
    print(export_attention(probe, args.out / "fold0.ckpt", args.out / "attention.csv"))


if __name__ == "__main__":
    main()
