from ddsr.cli import main
import sys

sys.exit(main())
