import sys

from dilocolab.cli import main

sys.exit(main())
