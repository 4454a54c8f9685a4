"""``python -m accelfwd`` runs a destination node (same as ``accelfwd-server``)."""
import sys

from .server import main

sys.exit(main())
