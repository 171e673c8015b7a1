"""``python -m sdcnn``."""

from sdcnn.cli import main

raise SystemExit(main())
