# Import libraries
import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# External service endpoints used while building the benchmark
IDB_LLM_URL = os.getenv('IDB_LLM_URL', 'http://127.0.0.1:8100/v1/complete')    # Language model endpoint
IDB_T2I_URL = os.getenv('IDB_T2I_URL', 'http://127.0.0.1:8101/v1/generate')    # Text-to-image endpoint
IDB_VLM_URL = os.getenv('IDB_VLM_URL', 'http://127.0.0.1:8102/v1/ask')         # Vision-language model endpoint
IDB_DET_URL = os.getenv('IDB_DET_URL', 'http://127.0.0.1:8103/v1/detect')      # Grounding detector endpoint
IDB_API_KEY = os.getenv('IDB_API_KEY', '')                                     # Bearer token shared by the endpoints
IDB_CLIENT_TIMEOUT = int(os.getenv('IDB_CLIENT_TIMEOUT', "120"))               # HTTP timeout in seconds

# Logging configuration
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()          # Application logging level

# Values below are algorithmic and never read from the environment
NEG_LARGE = -1e9                                   # Stand-in for log(0) in attention biases
TEMPLATE_PREFIX = "A portrait of 2 people"         # Prefix of every template prompt
DEFAULT_CATEGORIES = ("man", "woman", "boy", "girl")
CLIENT_ATTEMPTS = 3                                # Attempts per external call before a stage fails
CLIENT_BACKOFF_SECONDS = 1.0                       # First retry delay, doubled per attempt
SCHEMA_DIR = Path(__file__).resolve().parent.parent / 'schemas'   # JSON Schema documents
