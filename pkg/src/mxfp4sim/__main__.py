import sys

from mxfp4sim.cli import main

sys.exit(main())
