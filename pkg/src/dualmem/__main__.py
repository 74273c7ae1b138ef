from dualmem.cli import main
import sys
sys.exit(main())
