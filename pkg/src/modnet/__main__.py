import sys

from modnet.cli import main

sys.exit(main())
