"""The command-line workflow, start to finish, in a scratch directory.

Writes a CSV of counts and a JSON model description, then drives the
``iterlace`` entry point through fit -> predict -> diagnose -> sbc,
printing each command and a digest of what it produced.  Everything
lands in a temporary directory that is wiped at the end, so this is
safe to run anywhere.

Run:  python3 demos/cli_workflow.py
"""

import csv
import json
import tempfile
from pathlib import Path

import numpy as np

from iterlace.cli import main as iterlace


def run(argv):
    print("$ iterlace " + " ".join(argv))
    code = iterlace(argv)
    if code != 0:
        raise SystemExit(f"command failed with exit code {code}")
    print()


with tempfile.TemporaryDirectory() as tmp:
    work = Path(tmp)

    # --- data: 50 counts from a rate the model will have to recover ---
    rng = np.random.default_rng(8)
    y = rng.poisson(3.5, 50)
    with open(work / "counts.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y"])
        writer.writerows((int(v),) for v in y)

    # --- model: exponential-prior rate, Poisson counts ---------------
    spec = {
        "components": [
            {
                "name": "lam",
                "model": "iid",
                "n": 1,
                "input": {"kind": "const"},
                "hyper": {"prec": {"fixed": True, "initial": 1.0}},
                "marginal": {"distribution": "exponential", "rate": 0.5},
            }
        ],
        "likelihoods": [
            {
                "family": "poisson",
                "response": "y",
                "data": "counts.csv",
                "formula": "~ log(lam)",
            }
        ],
        "options": {"seed": 31},
    }
    (work / "model.json").write_text(json.dumps(spec, indent=2))
    print("model.json:")
    print(json.dumps(spec, indent=2))
    print()

    run(["fit", "-m", str(work / "model.json"), "-o", str(work / "out")])
    fit_doc = json.loads((work / "out" / "fit.json").read_text())
    print(f"fit.json: converged={fit_doc['converged']}, "
          f"{len(fit_doc['convergence'])} linearisation record(s)")
    print("engine log:")
    for line in fit_doc["log"]:
        print("  " + line)
    print()

    run(["--seed", "2", "predict", "-f", str(work / "out" / "fit.json"),
         "-e", "~ lam", "-n", "4000", "-o", str(work / "rate.csv")])
    with open(work / "rate.csv", newline="") as fh:
        row = next(csv.DictReader(fh))
    exact_mean = (1 + y.sum()) / (0.5 + y.size)
    print(f"posterior rate: mean {float(row['mean']):.3f} "
          f"[{float(row['q0.025']):.3f}, {float(row['q0.975']):.3f}]"
          f"   (conjugate answer: {exact_mean:.3f})")
    print()

    run(["diagnose", "-f", str(work / "out" / "fit.json"),
         "-o", str(work / "diag.json")])
    diag = json.loads((work / "diag.json").read_text())
    print("diagnostics: " + json.dumps(diag, indent=2))
    print()

    run(["--seed", "3", "sbc", "-m", str(work / "model.json"),
         "-K", "40", "-J", "200", "-o", str(work / "sbc")])
    sbc = json.loads((work / "sbc" / "sbc.json").read_text())
    print(f"calibration: K={sbc['K']} J={sbc['J']} "
          f"failures={sbc['failures']} "
          f"KS={sbc['ks_statistic']:.4f} (p={sbc['ks_pvalue']:.3f})")
