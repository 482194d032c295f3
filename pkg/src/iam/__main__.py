import sys

from iam.cli import main

sys.exit(main())
