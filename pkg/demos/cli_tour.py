"""
The command line, end to end
============================

Every subcommand prints JSON to stdout, so the whole deployment pipeline
scripts cleanly.  This tour shells out the same way a user would.
"""

import json
import os
import subprocess
import sys
import tempfile

import numpy as np


def mvt2(*args):
    """Run a subcommand and parse its JSON output."""
    proc = subprocess.run(
        [sys.executable, "-m", "mvt2.cli", *args],
        capture_output=True,
        text=True,
    )
    print("$ mvt2", " ".join(args), f"-> exit {proc.returncode}")
    return json.loads(proc.stdout) if proc.stdout else None


with tempfile.TemporaryDirectory() as tmp:
    train = os.path.join(tmp, "s1.mvt2")
    fused = os.path.join(tmp, "s1_deploy.mvt2")

    info = mvt2("build", "--variant", "s1", "--seed", "0", "--out", train)
    print("  built", info["params"], "parameters")

    info = mvt2("fuse", "--in", train, "--out", fused)
    print("  fused to", info["params"], "parameters")

    info = mvt2("verify-fusion", "--in", train, "--samples", "5", "--tol", "1e-4")
    print("  all blocks equivalent:", info["all_pass"])

    info = mvt2("count", "--variant", "s1")
    print("  s1 deploy:", info["total_params"], "params,", info["total_macs"], "MACs")

    # raw input: little-endian float32, NCHW
    raw = os.path.join(tmp, "x.raw")
    np.random.default_rng(0).standard_normal((1, 3, 224, 224)).astype("<f4").tofile(raw)
    info = mvt2("infer", "--model", fused, "--input", raw, "--shape", "1,3,224,224", "--topk", "3")
    print("  top classes:", [e["class"] for e in info["topk"][0]])

    report_path = os.path.join(tmp, "report.json")
    info = mvt2("bench", "--model", fused, "--batch", "2", "--iters", "3",
                "--power", "constant:25.8", "--acc", "72.7", "--out", report_path)
    print(f"  {info['throughput_img_s']:.1f} img/s, {info['e_img_mj']:.1f} mJ/image")

    info = mvt2("gradcheck", "--block", "sdta", "--channels", "8", "--hw", "4", "--eps", "1e-5")
    print("  gradient error:", info["error"])
