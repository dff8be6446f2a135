# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

import sys
from .cli import main

# If called as "python3 -m l2sa <command> ...", run the command line
# interface and exit with its status.
if __name__ == "__main__":
    sys.exit(main())
