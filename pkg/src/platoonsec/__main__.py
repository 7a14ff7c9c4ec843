import sys

from platoonsec.cli import main

sys.exit(main())
