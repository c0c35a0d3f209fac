#!/usr/bin/env python3
"""
Script para executar a CLI do MAT-SEI de forma mais fácil

    python run_app.py gen --out data/ds.matds
    python run_app.py train --dataset data/ds.matds --out-dir runs/mat_cl
"""

import os
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import config  # noqa: E402


def main(argv=None):
    # MAT_THREADS precisa chegar ao BLAS antes do primeiro import de numpy
    try:
        config.apply_thread_cap(os.environ)
    except ValueError as e:
        print(f"❌ Erro: {e}", file=sys.stderr)
        return config.EXIT_CONFIG_ERROR

    from apps.cli import main as cli_main

    try:
        return cli_main(argv)
    except KeyboardInterrupt:
        print("\n👋 Até logo!", file=sys.stderr)
        return config.EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
