import sys

from ibpcl.cli import main

sys.exit(main())
