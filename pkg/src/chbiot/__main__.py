import sys

from chbiot.cli_io import main

sys.exit(main())
