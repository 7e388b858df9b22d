import sys

from mlal.cli import main

sys.exit(main())
