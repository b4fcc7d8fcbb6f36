import sys

from mmscript.cli import main

sys.exit(main())
