# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

import sys

from .cli import main

sys.exit(main())
