import sys

from stratum.harness.cli import main

sys.exit(main())
