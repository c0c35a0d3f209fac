"""
Configurações centralizadas para o sistema MAT-SEI
"""

import os
from pathlib import Path

# Diretórios do projeto
PROJECT_ROOT = Path(__file__).parent
APPS_DIR = PROJECT_ROOT / "apps"
MODULES_DIR = PROJECT_ROOT / "modules"
TESTS_DIR = PROJECT_ROOT / "tests"
DOCS_DIR = PROJECT_ROOT / "docs"
RUNS_DIR = PROJECT_ROOT / "runs"

# Geometria padrão do dataset sintético (desk scale)
DEFAULT_NUM_CLASSES = 6
DEFAULT_SAMPLE_LENGTH = 512
DEFAULT_PER_CLASS_COUNT = 100
DEFAULT_TEST_PER_CLASS_COUNT = 50
DEFAULT_LABELED_RATIO = 0.10
DEFAULT_SNR_DB = 15.0
DEFAULT_IMPAIRMENT_SCALE = 1.0
VALIDATION_FRACTION = 0.30
SAMPLES_PER_SYMBOL = 4
RRC_ROLLOFF = 0.35
RRC_SPAN_SYMBOLS = 8

# Amplitude máxima de cada impairment com impairment_scale = 1.0
IMPAIRMENT_RANGES = {
    'iq_gain_imbalance': 0.15,
    'iq_phase_skew': 0.15,
    'dc_offset': 0.10,
    'phase_noise_std': 0.01,
    'pa_coeff3': 0.10,
}
MIN_IQ_GAIN = 1e-3

# Canal multipath estático de 3 taps (desligado por padrão), pares (re, im)
MULTIPATH_TAPS = ((1.0, 0.0), (0.27, 0.22), (-0.05, 0.09))

# CVNN
DEFAULT_NUM_BLOCKS = 6
DEFAULT_CHANNELS = 64
DEFAULT_KERNEL = 3
FEATURE_WIDTHS = {
    'long': (1024,),
    'short': (512, 128),
}
BATCHNORM_MOMENTUM = 0.1
BATCHNORM_EPS = 1e-5

# Treinamento
DEFAULT_ITERATIONS = 300
DEFAULT_BATCH_SIZE = 32
DEFAULT_LR_M = 1e-3
DEFAULT_LR_A = {
    'center': 1e-3,
    'proxy_anchor': 5e-2,
    'none': 1e-3,
}
DEFAULT_TAU = 0.95
DEFAULT_ALPHA = 32.0
DEFAULT_DELTA = 0.1
DEFAULT_EPSILON = 1.0
DEFAULT_XI = 1e-6
DEFAULT_POWER_ITERS = 1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Formatos de arquivo
DATASET_MAGIC = b'MATDS1'
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b'MATCK1'
CHECKPOINT_VERSION = 2

# Códigos de saída da CLI
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_IO_ERROR = 3
EXIT_NON_FINITE = 4

# Logging
LOG_LEVEL = os.environ.get('MAT_LOG_LEVEL', 'INFO')
LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

# Paralelismo interno dos kernels (numpy/BLAS)
THREADS_ENV_VAR = 'MAT_THREADS'
THREAD_LIMIT_VARS = ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS')


def apply_thread_cap(environ=None):
    """Exporta MAT_THREADS para as variáveis de BLAS. Precisa rodar antes de importar numpy."""
    environ = os.environ if environ is None else environ
    value = environ.get(THREADS_ENV_VAR)
    if not value:
        return None
    threads = int(value)
    if threads < 1:
        raise ValueError(f"{THREADS_ENV_VAR} must be >= 1, got {value}")
    for var in THREAD_LIMIT_VARS:
        environ[var] = str(threads)
    return threads
