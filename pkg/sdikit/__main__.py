import sys

from sdikit._cli import main

sys.exit(main())
