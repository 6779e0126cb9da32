"""
Django settings for config project.

The project carries no web surface: it hosts the ``stefan`` app, whose
management commands (simulate, control, verify, sweep) are the entry points.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/6.0/ref/settings/
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get('SECRET_KEY', 'stefan-insecure-local-key')

DEBUG = os.environ.get('DEBUG', 'False') == 'True'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'stefan',
]

# No database: runs persist to the filesystem only.
DATABASES = {}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Solver / experiment settings

STEFAN_OUTPUT_DIR = Path(os.environ.get('STEFAN_OUTPUT_DIR', BASE_DIR / 'runs'))

try:
    STEFAN_THREADS = int(os.environ.get('STEFAN_THREADS', 1) or 1)
except (ValueError, TypeError):
    STEFAN_THREADS = 1

try:
    STEFAN_SEED = int(os.environ.get('STEFAN_SEED', 12345) or 12345)
except (ValueError, TypeError):
    STEFAN_SEED = 12345

# Regression baselines (energy constant, Hölder quotient, control bound) fixed by the first build.
STEFAN_BASELINE_PATH = Path(os.environ.get('STEFAN_BASELINE_PATH', BASE_DIR / 'stefan' / 'baselines.json'))

# Negative control for the verify suite: replaces the transposed backward step by an explicit one.
STEFAN_DEBUG_CORRUPT_ADJOINT = os.environ.get('STEFAN_DEBUG_CORRUPT_ADJOINT', 'False') == 'True'

STEFAN_LOG_LEVEL = os.environ.get('STEFAN_LOG_LEVEL', 'INFO')


# Logging

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'stefan': {
            'handlers': ['console'],
            'level': STEFAN_LOG_LEVEL,
            'propagate': False,
        },
    },
}
