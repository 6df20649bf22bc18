"""
loewner-lab - numerical laboratory for Loewner chains driven by rough paths
"""
import logging
import sys

from app.config import settings
from app.cli import main

logging.basicConfig(
    level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)

if __name__ == "__main__":
    sys.exit(main())
