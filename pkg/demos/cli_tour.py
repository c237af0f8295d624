# %% [markdown]
# # Command line
#
# The same workflow through the `malariadx` entry point. `--synth` swaps the
# image folder for the synthetic generator, which keeps this runnable anywhere.

# %%
import subprocess
import sys
import tempfile
from pathlib import Path

out = Path(tempfile.mkdtemp())


def run(*args):
    proc = subprocess.run([sys.executable, "-m", "malariadx", *args], capture_output=True, text=True)
    print("$ malariadx", " ".join(args), "->", proc.returncode)
    print(proc.stdout or proc.stderr)
    return proc.returncode


# %%
run("train", "--synth", "--synth-per-class", "10", "--epochs", "2", "--seed", "3",
    "--out", str(out / "run"))
print(sorted(p.name for p in (out / "run").iterdir()))

# %%
run("eval", "--synth", "--synth-per-class", "10", "--seed", "3",
    "--checkpoint", str(out / "run" / "checkpoint.plsm"), "--out", str(out / "eval"))

# %% [markdown]
# Configuration errors exit with status 2 and a single line on stderr.

# %%
run("train", "--synth", "--epochs", "-1")
