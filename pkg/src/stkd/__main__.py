from stkd.cli import main
import sys

sys.exit(main())
