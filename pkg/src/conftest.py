"""pytest setup module."""

import os

os.environ["SDCNN_CONTRACT_MODE"] = "raise"

# Run initialization code for sdcnn
import sdcnn

del sdcnn
