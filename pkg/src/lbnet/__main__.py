import sys

from lbnet.cli import main

sys.exit(main())
