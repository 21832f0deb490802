import sys

from sandbox_measure.cli import main

sys.exit(main())
