import sys

from datspect.cli import main

sys.exit(main())
