import sys

from segland.cli import main

sys.exit(main())
