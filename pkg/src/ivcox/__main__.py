import sys

from ivcox.cli import main

sys.exit(main())
