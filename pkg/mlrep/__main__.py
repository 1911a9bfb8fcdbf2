import sys

from mlrep.cli import main

sys.exit(main())
