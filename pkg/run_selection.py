"""
Selective prediction for ranked fingerprint retrieval, from the command line.

Examples:
    python run_selection.py simulate --n 200 --bits 1024 --m-max 64 --out data/synthetic
    python run_selection.py score --dataset data/synthetic/dataset.jsonl \
        --predictions data/synthetic/predictions.rgp --out outputs/score
    python run_selection.py curve  ... --losses hit@1,hit@20,tanimoto
    python run_selection.py sgr    ... --delta 0.001 --target-risks 0.1,0.2,0.3
"""

import sys

from src.cli import main


if __name__ == "__main__":
    sys.exit(main())
