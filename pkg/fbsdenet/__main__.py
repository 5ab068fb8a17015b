import sys

from fbsdenet.main import main

sys.exit(main())
