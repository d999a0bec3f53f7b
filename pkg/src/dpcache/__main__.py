import sys

from dpcache.cli import main

sys.exit(main())
