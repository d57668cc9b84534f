"""Render one test orbit with shared and with independent noise, then score both.

Usage: python scripts/render_demo.py CHECKPOINT DATASET OUT
"""

import sys
from pathlib import Path

from raydiff.cli import main as cli


def main():
    ckpt, data, out = sys.argv[1:4]
    out = Path(out)
    for noise in ("shared", "independent"):
        d = out / noise
        code = cli(["--out", str(d), "render", f"--checkpoint={ckpt}", f"--data={data}", f"--noise={noise}",
                    "--sigma_mode=deterministic"])
        if code:
            return code
        code = cli(["--out", str(d / "eval"), "eval", f"--frames={d}", f"--cameras={d / 'orbit.txt'}"])
        if code:
            return code
        print(noise, (d / "eval" / "summary.txt").read_text().strip().replace("\n", "  "))
    return 0


if __name__ == "__main__":
    sys.exit(main())
