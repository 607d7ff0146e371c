"""Dropout-driven preference optimisation for small segmentation networks."""

from dotenv import load_dotenv

# MAPO_OUTPUT_DIR may come from a local .env.
load_dotenv(override=False)
