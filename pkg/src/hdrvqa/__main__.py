import sys

from hdrvqa.cli import main

sys.exit(main())
