import sys

from fatlab.cli import main

sys.exit(main())
