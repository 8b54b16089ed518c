"""
Django settings for the replisim project.

Everything tunable is read through python-decouple so a local `.env` file or
environment variables override the defaults below.
"""

from pathlib import Path
from decouple import config, Csv
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# No HTTP surface is served; the key only satisfies Django's startup checks.
SECRET_KEY = config('SECRET_KEY', default='replisim-insecure-local-only')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = config('ALLOWED_HOSTS', default='localhost,127.0.0.1', cast=Csv())

THIRD_PARTY_APPS = [
    'rest_framework',
]

LOCAL_APPS = [
    'cluster',
    'placement',
    'comms',
    'traces',
    'simulation',
]

INSTALLED_APPS = THIRD_PARTY_APPS + LOCAL_APPS

# Nothing is persisted
DATABASES = {}

LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

# Django REST Framework settings (serializers only, no views)
REST_FRAMEWORK = {
    'DEFAULT_RENDERER_CLASSES': [
        'rest_framework.renderers.JSONRenderer',
    ],
    'DEFAULT_PARSER_CLASSES': [
        'rest_framework.parsers.JSONParser',
    ],
    'COERCE_DECIMAL_TO_STRING': False,
    'DEFAULT_AUTHENTICATION_CLASSES': [],
    'DEFAULT_PERMISSION_CLASSES': [],
    'UNAUTHENTICATED_USER': None,
}

# Celery Configuration
CELERY_BROKER_URL = config('REDIS_URL', default='redis://localhost:6379/0')
CELERY_RESULT_BACKEND = config('REDIS_URL', default='redis://localhost:6379/0')
CELERY_ACCEPT_CONTENT = ['json']
CELERY_TASK_SERIALIZER = 'json'
CELERY_RESULT_SERIALIZER = 'json'
CELERY_TIMEZONE = TIME_ZONE
CELERY_TASK_ALWAYS_EAGER = config('CELERY_TASK_ALWAYS_EAGER', default=False, cast=bool)

# Simulation
SIMULATION_OUTPUT_DIR = config('SIMULATION_OUTPUT_DIR', default=str(BASE_DIR / 'output'))
SIMULATION_DISPATCH = config('SIMULATION_DISPATCH', default='inline')  # inline | celery
SIMULATION_CHECK_PLANS = config('SIMULATION_CHECK_PLANS', default=False, cast=bool)
SIMULATION_COMPUTE_BASE_SECONDS = config('SIMULATION_COMPUTE_BASE_SECONDS', default=0.0, cast=float)
SIMULATION_METADATA_SECONDS = config('SIMULATION_METADATA_SECONDS', default=0.0, cast=float)
SIMULATION_INCLUDE_METADATA_LATENCY = config('SIMULATION_INCLUDE_METADATA_LATENCY', default=False, cast=bool)

# Router / comm plans
ROUTER_SCALAR_BYTES = config('ROUTER_SCALAR_BYTES', default=8, cast=int)
COMM_PLAN_TOLERANCE = config('COMM_PLAN_TOLERANCE', default=0.01, cast=float)

# Trace generation defaults
TRACEGEN_DEFAULT_SEED = config('TRACEGEN_DEFAULT_SEED', default=0, cast=int)
TRACEGEN_DEFAULT_VOLATILITY = config('TRACEGEN_DEFAULT_VOLATILITY', default=0.05, cast=float)
TRACEGEN_DEFAULT_SPIKE_PROBABILITY = config('TRACEGEN_DEFAULT_SPIKE_PROBABILITY', default=0.05, cast=float)
TRACEGEN_DEFAULT_INITIAL_SPREAD = config('TRACEGEN_DEFAULT_INITIAL_SPREAD', default=1.5, cast=float)
TRACEGEN_DEFAULT_TOKENS_PER_BATCH = config('TRACEGEN_DEFAULT_TOKENS_PER_BATCH', default=32768, cast=int)

# Verification suite budgets
VERIFY_SEED = config('VERIFY_SEED', default=1234, cast=int)
VERIFY_SCHEDULER_CASES = config('VERIFY_SCHEDULER_CASES', default=10000, cast=int)
VERIFY_VOLUME_SPECS = config('VERIFY_VOLUME_SPECS', default=20, cast=int)
VERIFY_VOLUME_PLACEMENTS = config('VERIFY_VOLUME_PLACEMENTS', default=1000, cast=int)
VERIFY_ALLREDUCE_CASES = config('VERIFY_ALLREDUCE_CASES', default=1000, cast=int)
VERIFY_GATHER_CASES = config('VERIFY_GATHER_CASES', default=500, cast=int)
VERIFY_TRACE_ITERATIONS = config('VERIFY_TRACE_ITERATIONS', default=2000, cast=int)
VERIFY_TRACE_SEEDS = config('VERIFY_TRACE_SEEDS', default='11,23,47', cast=Csv(int))

# Logging Configuration
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {process:d} {thread:d} {message}',
            'style': '{',
        },
        'simple': {
            'format': '{levelname} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'file': {
            'level': 'DEBUG',
            'class': 'logging.FileHandler',
            'filename': BASE_DIR / 'logs' / 'replisim.log',
            'formatter': 'verbose',
        },
        'console': {
            'level': config('CONSOLE_LOG_LEVEL', default='WARNING'),
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'root': {
        'handlers': ['console', 'file'],
        'level': 'INFO',
    },
    'loggers': {
        'django': {
            'handlers': ['console', 'file'],
            'level': 'INFO',
            'propagate': False,
        },
        'cluster': {
            'handlers': ['console', 'file'],
            'level': 'INFO',
            'propagate': False,
        },
        'placement': {
            'handlers': ['console', 'file'],
            'level': 'INFO',
            'propagate': False,
        },
        'comms': {
            'handlers': ['console', 'file'],
            'level': 'INFO',
            'propagate': False,
        },
        'traces': {
            'handlers': ['console', 'file'],
            'level': 'INFO',
            'propagate': False,
        },
        'simulation': {
            'handlers': ['console', 'file'],
            'level': 'INFO',
            'propagate': False,
        },
    },
}

# Ensure logs directory exists
os.makedirs(BASE_DIR / 'logs', exist_ok=True)
