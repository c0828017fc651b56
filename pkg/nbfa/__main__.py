import sys

from nbfa.cli import main

sys.exit(main())
