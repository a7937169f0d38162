"""Command-line entry: python -m mgpstr."""

import sys

from .cli import main

sys.exit(main())
