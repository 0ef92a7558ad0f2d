import os
import sys

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "api"))

from app.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
