import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Output Configuration
PIPELINE_OUTPUT_DIR = os.environ.get(
    'PIPELINE_OUTPUT_DIR',
    os.path.join(os.path.dirname(os.path.dirname(__file__)), 'runs', 'default')
)
PIPELINE_SEED = int(os.environ.get('PIPELINE_SEED', '7'))

# Logging
LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO').upper()

# Torch runtime; one thread keeps results bitwise reproducible
TORCH_NUM_THREADS = int(os.environ.get('TORCH_NUM_THREADS', '1'))

# Artifact formats
CHECKPOINT_VERSION = 1
ALLOWED_EXTENSIONS = {'json', 'csv', 'pt', 'svg'}
CHECKPOINT_EXTENSIONS = {'pt'}

# Scene configs shipped with the repo
SCENES_FOLDER = os.path.join(os.path.dirname(__file__), 'scenes')
