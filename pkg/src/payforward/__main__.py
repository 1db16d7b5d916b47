import sys

from payforward.cli import main

sys.exit(main())
