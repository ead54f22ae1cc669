import sys

from vgib.app import main

sys.exit(main())
