import sys

from magtac.cli import main

sys.exit(main())
