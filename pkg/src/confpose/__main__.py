import sys

from confpose.cli import main

sys.exit(main())
