"""Package entry point for python -m qsd_sensitivity"""

from qsd_sensitivity.cli import main

if __name__ == "__main__":
    raise SystemExit(main())
