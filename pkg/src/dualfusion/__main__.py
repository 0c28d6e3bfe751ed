import sys

from dualfusion.cli import main

sys.exit(main())
