import sys

from djgp.cli import main

sys.exit(main())
