import sys

from gmip.cli import main

sys.exit(main())
