import sys

from fedeca.cli import main

sys.exit(main())
