"""Walk through the full pipeline on the shipped synthetic bundle.

Ingests the bundle, trains one KAN model with the structural term and one
without, predicts on the validation split and compares the two reports.

    python3 demos/micro_experiment.py [workdir]
"""
import json
import sys
import tempfile
from pathlib import Path

from pepsite.cli import main
from pepsite.synthetic import bundle_dir

MICRO_CFG = Path(__file__).resolve().parents[1] / "src" / "pepsite" / "data" / "micro.cfg"


def run(argv):
    print("$ pepsite " + " ".join(argv))
    code = main(argv)
    if code != 0:
        sys.exit(code)


def experiment(work: Path) -> None:
    man = str(work / "bundle.tsv")
    run(["ingest", str(bundle_dir()), "-o", man])

    preds = []
    for lam in ("0.5", "0"):
        ck = str(work / f"kan_lam{lam}.ckpt")
        run(["train", man, "-o", ck, "-c", str(MICRO_CFG), "--lambda", lam])
        out = work / f"lam{lam}.csv"
        run(["predict", ck, man, "-o", str(out), "--split", "val"])
        preds.append(str(out))

    report = work / "report.json"
    run(["evaluate", *preds, "-m", man, "-o", str(report), "--split", "val",
         "--names", "composite,ce_only", "--plots", str(work / "plots")])
    run(["report", str(report)])

    rows = json.loads(report.read_text())["comparison"]
    best = min(rows, key=lambda r: r["distance_loss_raw_mean"])
    print(f"\nlowest raw distance loss: {best['method']}")
    print(f"artifacts in {work}")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        target = Path(sys.argv[1])
        target.mkdir(parents=True, exist_ok=True)
        experiment(target)
    else:
        with tempfile.TemporaryDirectory() as tmp:
            experiment(Path(tmp))
