import sys

from vlinknet.cli import main

sys.exit(main())
