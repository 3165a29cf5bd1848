"""Runner script that reproduces a results table from the environment.

Reads QSD_PRESET, QSD_VOLUMES, QSD_SEGMENTS, QSD_RUNS, QSD_SEED, QSD_WORKERS and QSD_OUT_DIR
(a .env file is honoured) and runs the `table` subcommand with them.
"""

from pathlib import Path
import sys
import os
import asyncio
from dotenv import load_dotenv

# Ensure the project root is on sys.path when running this script directly
# (so imports like `from qsd_sensitivity.cli ...` work).
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))


async def main():
    """Run the table subcommand configured by the environment"""
    load_dotenv()

    preset_name = os.getenv("QSD_PRESET", "sir")
    volumes = os.getenv("QSD_VOLUMES")
    out_dir = Path(os.getenv("QSD_OUT_DIR", "."))
    out_dir.mkdir(parents=True, exist_ok=True)

    from qsd_sensitivity.cli import main_async

    argv = [
        "table",
        "--preset",
        preset_name,
        "--out",
        str(out_dir / f"{preset_name}_table.csv"),
    ]
    if volumes:
        argv += ["--volumes", volumes]

    print(f"Running {preset_name} table for volumes {volumes or 'default'}...")
    await main_async(argv)
    print(f"Wrote {out_dir / f'{preset_name}_table.csv'}")


if __name__ == "__main__":
    asyncio.run(main())
