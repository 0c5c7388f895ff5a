# Settings for the hvae_joint project
#
# Every default the package uses lives here as a module constant. Values an
# operator is expected to change can be overridden through HVAE_* environment
# variables; a .env file in the working directory is loaded first, so it acts
# like the container environment in docker-compose.yaml.
#
# Precedence everywhere: dataclass default (taken from here) < config file
# (key=value) < command-line flag.

import os

from dotenv import find_dotenv, load_dotenv

load_dotenv(find_dotenv(usecwd=True))


def _env_tuple(name, default, cast):
    raw = os.environ.get(name)
    if raw is None or not raw.strip():
        return default
    return tuple(cast(part) for part in raw.split(",") if part.strip())


# Paths
DATA_DIR = os.environ.get('HVAE_DATA_DIR', os.path.join(os.getcwd(), 'data'))
OUT_DIR = os.environ.get('HVAE_OUT_DIR', os.path.join(os.getcwd(), 'out'))

# Log level
LOG_LEVEL = os.environ.get('HVAE_LOG_LEVEL', 'INFO')
LOG_FORMAT = '%(asctime)s [%(levelname)s] %(name)s: %(message)s'

# Worker threads for per-sample gradients (1 = strict reproducible mode)
THREADS = int(os.environ.get('HVAE_THREADS', '1'))

# Reject NaN/Inf at every tensor operation boundary (tests switch it on)
STRICT_FINITE = os.environ.get('HVAE_STRICT_FINITE', 'false').lower() in ('1', 'true', 'yes')

# Phantom generator
PHANTOM_SIZE = int(os.environ.get('HVAE_PHANTOM_SIZE', '32'))
PHANTOM_TUMOR_COUNT = (1, 2)
PHANTOM_RADIUS_RANGE = (0.08, 0.25)
PHANTOM_CONTRAST = 0.35
PHANTOM_SMOOTHNESS = 2.0
PHANTOM_NOISE_SIGMA = 0.03
PHANTOM_EDGE_SOFTNESS = 0.15
PHANTOM_BACKGROUND_RANGE = (0.2, 0.6)

# Generative model architecture
MODEL_WIDTHS = _env_tuple('HVAE_MODEL_WIDTHS', (16, 32, 64), int)
LATENT_DIM = int(os.environ.get('HVAE_LATENT_DIM', '32'))
ATTENTION_REDUCTION = 4
GROUP_SIZE = 8
NORM_EPS = 1e-5
LEAKY_SLOPE = 0.2

# Hamiltonian flow
HMC_STEPS = int(os.environ.get('HVAE_HMC_STEPS', '5'))
HMC_STEP_SIZE = float(os.environ.get('HVAE_HMC_STEP_SIZE', '0.05'))

# Objectives
SIGMA_X = 1.0
MASK_WEIGHT = 1.0
COLLAPSE_KL_THRESHOLD = 0.01

# Generative training
SEED = int(os.environ.get('HVAE_SEED', '0'))
EPOCHS = int(os.environ.get('HVAE_EPOCHS', '300'))
BATCH_SIZE = int(os.environ.get('HVAE_BATCH_SIZE', '32'))
LEARNING_RATE = float(os.environ.get('HVAE_LEARNING_RATE', '1e-3'))
CHECKPOINT_EVERY = int(os.environ.get('HVAE_CHECKPOINT_EVERY', '50'))
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Checkpoints
CHECKPOINT_MAGIC = b'HVAE'
CHECKPOINT_VERSION = 1

# Segmenter (U-Net) training, protocol values: 80 epochs, batch 32
SEG_EPOCHS = int(os.environ.get('HVAE_SEG_EPOCHS', '80'))
SEG_BATCH_SIZE = int(os.environ.get('HVAE_SEG_BATCH_SIZE', '32'))
SEG_DEPTH = 3
SEG_WIDTH = 8

# Evaluation
SAMPLE_THRESHOLD = 0.5
SSIM_WINDOW = 8
EVAL_SUBSET = 100

# Experiment protocol
N_TRAIN = int(os.environ.get('HVAE_N_TRAIN', '100'))
N_TEST = int(os.environ.get('HVAE_N_TEST', '100'))
SYNTHETIC_COUNTS = _env_tuple('HVAE_SYNTHETIC_COUNTS', (100, 200, 300, 500), int)
RUNS = int(os.environ.get('HVAE_RUNS', '10'))
STD_AUG_FACTORS = (2, 3, 5)

# Scrapy settings for ingesting external paired data (see hvae_joint.spiders)
BOT_NAME = 'hvae_joint'

# Local files only
ROBOTSTXT_OBEY = False
TELNETCONSOLE_ENABLED = False
CONCURRENT_REQUESTS = int(os.environ.get('HVAE_INGEST_CONCURRENCY', '4'))

# Set settings whose default value is deprecated to a future-proof value
REQUEST_FINGERPRINTER_IMPLEMENTATION = '2.7'

# Item pipelines for external pairs, run in ascending order
ITEM_PIPELINES = {
    'hvae_joint.pipelines.DuplicateStemPipeline': 100,
    'hvae_joint.pipelines.MaskValidationPipeline': 200,
    'hvae_joint.pipelines.PairCleaningPipeline': 300,
    'hvae_joint.pipelines.ShapeConsistencyPipeline': 500,
    'hvae_joint.pipelines.ManifestPipeline': 800,
}
