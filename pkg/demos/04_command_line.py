"""
Command-line walkthrough
========================

Runs the six commands end to end on a tiny configuration.  Each step is
the same invocation you would type in a shell.
"""

import subprocess
import sys
from pathlib import Path

work = Path(__file__).with_suffix("")
work.mkdir(exist_ok=True)

# a config file overrides the desk preset; flags override the file
(work / "tiny.cfg").write_text("preset=desk\nD=32\nK1=1\nK2=1\nepochs=3\nbatch=4\nseed=0\n")


def run(*args):
    cmd = [sys.executable, "-m", "docrectify", *args]
    print("$ docrectify " + " ".join(args))
    done = subprocess.run(cmd, capture_output=True, text=True)
    print(done.stdout + done.stderr, end="")
    print(f"  exit code {done.returncode}\n")
    return done.returncode


cfg = ["--config", str(work / "tiny.cfg")]
run("gen-data", *cfg, "--count", "12", "--out", str(work / "corpus"))
run("pretrain", *cfg, "--corpus", str(work / "corpus"), "--out", str(work / "mae.ckpt"))
run("finetune", *cfg, "--corpus", str(work / "corpus"), "--checkpoint", str(work / "mae.ckpt"),
    "--out", str(work / "rect.ckpt"))
run("rectify", str(work / "corpus"), "--checkpoint", str(work / "rect.ckpt"),
    "--out", str(work / "pred"))
run("eval", str(work / "pred"), *cfg, "--corpus", str(work / "corpus"),
    "--out", str(work / "eval"))
run("demo-reconstruct", *cfg, "--checkpoint", str(work / "mae.ckpt"),
    "--corpus", str(work / "corpus"), "--count", "2", "--out", str(work / "demo"))

# validation failures exit with code 2
(work / "bad.cfg").write_text("P=7\n")
run("gen-data", "--config", str(work / "bad.cfg"), "--out", str(work / "unused"))

print((work / "eval" / "report.csv").read_text())
